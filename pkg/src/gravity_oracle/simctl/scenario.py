"""Scenario file schema and validation."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

Number = Union[int, float, str]


class ScenarioError(ValueError):
    """Invalid scenario; ``violations`` lists every problem found."""

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("invalid scenario:\n" + "\n".join(f"  - {v}" for v in self.violations))


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ChainConfig(_Model):
    id: str
    supply: int = Field(1_000_000, ge=0)
    min_deposit: int = Field(100, ge=0)
    lock_period: int = Field(365, ge=0)
    fee: int = Field(1, ge=0)
    freshness: int = Field(2, ge=0)


class WalkConfig(_Model):
    start: Number
    step: Number


class SourceConfig(_Model):
    id: str
    mandatory: bool = True
    script: dict[int, Number] = Field(default_factory=dict)
    walk: Optional[WalkConfig] = None


class FeedConfig(_Model):
    id: str
    sources: list[SourceConfig]
    merge: Literal["median", "average", "mode"] = "median"
    decimals: int = Field(0, ge=0)
    aggregation: Literal["median", "average", "mode"] = "median"
    output: Literal["int", "str"] = "int"


class NodeConfig(_Model):
    id: Optional[str] = None
    prefix: Optional[str] = None
    count: Optional[int] = Field(None, ge=1)
    chains: list[str]
    balance: int = Field(1000, ge=0)
    deposit: Optional[int] = None
    extractors: dict[str, list[str]] = Field(default_factory=dict)
    join_tick: int = Field(0, ge=0)
    exit_tick: Optional[int] = None
    genesis: Optional[bool] = None

    def ids(self) -> list[str]:
        if self.id is not None:
            return [self.id]
        width = max(2, len(str(self.count - 1)))
        return [f"{self.prefix}{i:0{width}d}" for i in range(self.count)]


class ScheduleConfig(_Model):
    every: int = Field(5, ge=1)
    offset: int = Field(1, ge=0)


class NebulaConfig(_Model):
    id: str
    chain: str
    feed: str
    n: int = Field(ge=1)
    k: int = Field(ge=1)
    min_score: float = Field(0.0, ge=0, le=100)
    price: int = Field(1, ge=0)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    oracles: Optional[list[str]] = None
    creator: Optional[str] = None


class TopUp(_Model):
    tick: int
    amount: int = Field(0, ge=0)
    reactivate: bool = True


class SubscriptionConfig(_Model):
    user: str
    nebula: str
    method: str = "on_data"
    mode: Literal["deposit", "per-call"] = "deposit"
    kind: Literal["data", "trigger"] = "data"
    balance: int = Field(100, ge=0)
    deposit: int = Field(0, ge=0)
    topups: list[TopUp] = Field(default_factory=list)


class Window(_Model):
    node: str
    start: int = Field(0, alias="from")
    end: Optional[int] = Field(None, alias="to")

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    def covers(self, tick: int) -> bool:
        return tick >= self.start and (self.end is None or tick <= self.end)


class DivergentFault(Window):
    offset: int = 1000


class FraudFault(Window):
    delta: int = 7


class SybilWave(_Model):
    tick: int = Field(ge=1)
    count: int = Field(ge=1)
    prefix: str = "sybil"
    chain: Optional[str] = None


class SourceFaultConfig(_Model):
    source: str
    tick: int
    kind: Literal["silent", "wrong_value", "delayed"]
    value: Optional[Number] = None


class FaultsConfig(_Model):
    offline: list[Window] = Field(default_factory=list)
    divergent: list[DivergentFault] = Field(default_factory=list)
    fraud_reveal: list[FraudFault] = Field(default_factory=list)
    copy_reveal: list[Window] = Field(default_factory=list)
    consul_withhold: list[Window] = Field(default_factory=list)
    sybil: list[SybilWave] = Field(default_factory=list)
    sources: list[SourceFaultConfig] = Field(default_factory=list)


class EigenTrustConfig(_Model):
    a: float = Field(0.15, ge=0, le=1)
    epsilon: float = Field(1e-6, gt=0)
    max_iters: int = Field(1000, ge=1)


class ManualScore(_Model):
    tick: int
    rater: str
    ratee: str
    value: float


class PolicyConfig(_Model):
    eigentrust: EigenTrustConfig = Field(default_factory=EigenTrustConfig)
    build_up_step: float = 1.0
    build_up_cap: float = 10.0
    divergence_tolerance: float = Field(0.05, ge=0)
    unresponsive_after: int = Field(3, ge=1)
    consuls: int = Field(5, ge=1)
    epoch: int = Field(10, ge=1)
    distribution_period: int = Field(7, ge=1)
    round_timeout: int = Field(3, ge=1)
    manual_scores: list[ManualScore] = Field(default_factory=list)


class Scenario(_Model):
    seed: int = Field(ge=0, lt=2**64)
    ticks: int = Field(ge=1)
    chains: list[ChainConfig]
    nodes: list[NodeConfig]
    feeds: list[FeedConfig] = Field(default_factory=list)
    nebulae: list[NebulaConfig] = Field(default_factory=list)
    subscriptions: list[SubscriptionConfig] = Field(default_factory=list)
    faults: FaultsConfig = Field(default_factory=FaultsConfig)
    policy: PolicyConfig = Field(default_factory=PolicyConfig)

    @model_validator(mode="after")
    def _cross_references(self) -> "Scenario":
        problems = cross_reference_problems(self)
        if problems:
            raise ValueError("; ".join(problems))
        return self

    def node_ids(self) -> list[str]:
        return [nid for cfg in self.nodes for nid in cfg.ids()]

    def node_configs(self) -> dict[str, NodeConfig]:
        return {nid: cfg for cfg in self.nodes for nid in cfg.ids()}


def cross_reference_problems(sc: Scenario) -> list[str]:
    out: list[str] = []
    chain_ids = [c.id for c in sc.chains]
    feed_ids = [f.id for f in sc.feeds]
    neb_ids = [n.id for n in sc.nebulae]
    for label, ids in (("chain", chain_ids), ("feed", feed_ids), ("nebula", neb_ids)):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            out.append(f"duplicate {label} ids: {dupes}")

    node_ids: list[str] = []
    for i, cfg in enumerate(sc.nodes):
        if (cfg.id is None) == (cfg.prefix is None or cfg.count is None):
            out.append(f"nodes[{i}]: give either 'id' or both 'prefix' and 'count'")
            continue
        node_ids.extend(cfg.ids())
        for ch in cfg.chains:
            if ch not in chain_ids:
                out.append(f"nodes[{i}]: unknown chain {ch!r}")
        for feed, sources in cfg.extractors.items():
            fc = next((f for f in sc.feeds if f.id == feed), None)
            if fc is None:
                out.append(f"nodes[{i}]: extractor for unknown feed {feed!r}")
                continue
            known = {s.id for s in fc.sources}
            missing = [s for s in sources if s not in known]
            if missing or not sources:
                out.append(f"nodes[{i}]: extractor for {feed!r} uses unknown or no sources {missing}")
        if cfg.exit_tick is not None and cfg.exit_tick <= cfg.join_tick:
            out.append(f"nodes[{i}]: exit_tick must come after join_tick")
    dupes = sorted({n for n in node_ids if node_ids.count(n) > 1})
    if dupes:
        out.append(f"duplicate node ids: {dupes}")
    known_nodes = set(node_ids)

    for f in sc.feeds:
        if not any(s.mandatory for s in f.sources):
            out.append(f"feed {f.id!r}: needs at least one mandatory source")
        for s in f.sources:
            if not s.script and s.walk is None:
                out.append(f"feed {f.id!r} source {s.id!r}: needs a script or a walk")

    for nb in sc.nebulae:
        if nb.k > nb.n:
            out.append(f"nebula {nb.id!r}: K={nb.k} exceeds N={nb.n}")
        if nb.chain not in chain_ids:
            out.append(f"nebula {nb.id!r}: unknown chain {nb.chain!r}")
        if nb.feed not in feed_ids:
            out.append(f"nebula {nb.id!r}: unknown feed {nb.feed!r}")
        for o in nb.oracles or []:
            if o not in known_nodes:
                out.append(f"nebula {nb.id!r}: unknown oracle {o!r}")
        if nb.creator is not None and nb.creator not in known_nodes:
            out.append(f"nebula {nb.id!r}: unknown creator {nb.creator!r}")

    for i, sub in enumerate(sc.subscriptions):
        if sub.nebula not in neb_ids:
            out.append(f"subscriptions[{i}]: unknown nebula {sub.nebula!r}")
        if sub.deposit > sub.balance:
            out.append(f"subscriptions[{i}]: initial deposit exceeds balance")

    f = sc.faults
    for label, windows in (
        ("offline", f.offline),
        ("divergent", f.divergent),
        ("fraud_reveal", f.fraud_reveal),
        ("copy_reveal", f.copy_reveal),
        ("consul_withhold", f.consul_withhold),
    ):
        for w in windows:
            if w.node not in known_nodes:
                out.append(f"faults.{label}: unknown node {w.node!r}")
    source_ids = {s.id for fc in sc.feeds for s in fc.sources}
    for sf in f.sources:
        if sf.source not in source_ids:
            out.append(f"faults.sources: unknown source {sf.source!r}")
        if sf.kind == "wrong_value" and sf.value is None:
            out.append(f"faults.sources: wrong_value at tick {sf.tick} needs a value")
    for w in f.sybil:
        if w.chain is not None and w.chain not in chain_ids:
            out.append(f"faults.sybil: unknown chain {w.chain!r}")

    for m in sc.policy.manual_scores:
        for who in (m.rater, m.ratee):
            if who not in known_nodes:
                out.append(f"policy.manual_scores: unknown node {who!r}")
    return out


def parse_scenario(data: dict) -> Scenario:
    try:
        return Scenario.model_validate(data)
    except ValidationError as err:
        violations = []
        for e in err.errors():
            loc = ".".join(str(x) for x in e["loc"]) or "<root>"
            msg = e["msg"]
            if msg.startswith("Value error, "):
                for part in msg[len("Value error, "):].split("; "):
                    violations.append(part)
            else:
                violations.append(f"{loc}: {msg}")
        raise ScenarioError(violations) from None


def load_scenario(path: Union[str, Path], seed: Optional[int] = None, ticks: Optional[int] = None) -> Scenario:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise ScenarioError([f"{path}: not valid JSON ({err})"]) from None
    if not isinstance(data, dict):
        raise ScenarioError([f"{path}: top level must be an object"])
    if seed is not None:
        data["seed"] = seed
    if ticks is not None:
        data["ticks"] = ticks
    return parse_scenario(data)
