from pathlib import Path

import pytest

from gravity_oracle import crypto
from gravity_oracle.chain import RESERVE, TargetChain, signing_payload, value_digest
from gravity_oracle.crypto import KeyPair

SCENARIOS = Path(__file__).resolve().parents[1] / "src" / "gravity_oracle" / "simctl" / "scenarios"


def keys(name: str) -> KeyPair:
    return KeyPair.from_seed(f"chain:{name}".encode())


def funded_chain(nodes, supply=100_000, balance=1_000, **kw) -> TargetChain:
    chain = TargetChain("eth", supply, **kw)
    for n in nodes:
        chain.transfer(RESERVE, n, balance)
    return chain


def register_all(chain: TargetChain, nodes, deposit=100):
    for n in nodes:
        chain.register_node(n, keys(n).public_key, deposit)


def sign_pulse(chain: TargetChain, nebula_id: str, round: int, value, signers, timestamp=None):
    neb = chain.nebula(nebula_id)
    ts = chain.height if timestamp is None else timestamp
    d = value_digest(value)
    msg = signing_payload(d, ts, neb.feed_id, nebula_id, round)
    return d, ts, [crypto.sign_message(keys(s).secret_key, msg) for s in signers]


@pytest.fixture
def scenario_dir() -> Path:
    return SCENARIOS


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
