from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from gravity_oracle.economy import (
    ImpactRecord,
    NothingToWithdraw,
    compute_impacts,
    distribute,
    run_distribution,
    withdraw,
)

from conftest import funded_chain, register_all, sign_pulse
from gravity_oracle.chain import write_scores


def rec(nid, impact):
    return ImpactRecord(nid, 1.0, impact, impact)


def test_activity_and_impact():
    [r] = compute_impacts({"n": 10}, 10, {"n": 85})
    assert (r.activity, r.score, r.impact) == (1.0, 0.85, 0.85)
    [v] = compute_impacts({"V": 1}, 10, {"V": 85})
    assert v.impact == pytest.approx(0.085)


def test_offline_node_has_zero_impact():
    [r] = compute_impacts({}, 10, {"F": 90}, oracles=["F"])
    assert r.activity == 0 and r.impact == 0


def test_no_pulses_no_activity():
    assert all(r.activity == 0 for r in compute_impacts({"a": 0}, 0, {"a": 90}))


def test_single_active_node_takes_pot():
    r = distribute([rec("a", 0.5), rec("b", 0.0)], 100)
    assert r.payouts == {"a": 100, "b": 0} and r.remainder == 0


def test_zero_pot():
    r = distribute([rec("a", 0.5), rec("b", 0.2)], 0)
    assert set(r.payouts.values()) == {0}


def test_zero_total_impact_carries_pot():
    r = distribute([rec("a", 0.0)], 37)
    assert r.payouts == {} and r.remainder == 37


def test_negative_pot_rejected():
    with pytest.raises(ValueError):
        distribute([], -1)


impacts = st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=12)


@given(impacts, st.integers(0, 10**6))
def test_payouts_plus_remainder_is_pot(xs, pot):
    r = distribute([rec(f"n{i}", x) for i, x in enumerate(xs)], pot)
    assert sum(r.payouts.values()) + r.remainder == pot
    assert all(isinstance(v, int) and v >= 0 for v in r.payouts.values())


@given(impacts, st.integers(0, 10**6))
def test_payouts_follow_impact_order(xs, pot):
    r = distribute([rec(f"n{i}", x) for i, x in enumerate(xs)], pot)
    for i, x in enumerate(xs):
        if x == 0:
            assert r.payouts.get(f"n{i}", 0) == 0
        for j, y in enumerate(xs):
            if x < y:
                assert r.payouts.get(f"n{i}", 0) <= r.payouts.get(f"n{j}", 0)


@given(impacts, st.integers(0, 10**6))
def test_doubling_impacts_changes_nothing(xs, pot):
    a = distribute([rec(f"n{i}", x) for i, x in enumerate(xs)], pot)
    b = distribute([rec(f"n{i}", 2 * x) for i, x in enumerate(xs)], pot)
    assert a.payouts == b.payouts and a.remainder == b.remainder


def test_share_is_exact_ratio():
    r = distribute([rec("a", 0.3), rec("b", 0.1)], 10)
    assert Fraction(r.shares["a"]).limit_denominator(100) == Fraction(3, 4)


def chain_with_pulses():
    nodes = ["a", "b"]
    chain = funded_chain(nodes + ["m", "u"])
    register_all(chain, nodes)
    chain.set_consuls(["a"])
    write_scores([chain], "a", {"a": 100.0, "b": 50.0})
    chain.create_nebula("m", "neb", "f", 1, 2, 0, 5, nodes)
    chain.deploy_user_contract("u")
    chain.subscribe("u", "neb", "cb", "per-call")
    for r in range(4):
        chain.advance(chain.height + 1)
        leader = chain.nebula("neb").expected_leader(chain.height)
        d, ts, proofs = sign_pulse(chain, "neb", r, 7, [leader])
        chain.pulse_tx("neb", r, d, ts, leader, proofs)
        chain.send_data_tx("neb", r, 7, ["u"])
    return chain


def test_run_distribution_credits_and_withdraw():
    chain = chain_with_pulses()
    report = run_distribution(chain, "neb", 1, 0)
    # each node led two of four pulses: impacts 0.5 and 0.25 over a pot of 20
    assert report.pot == 20
    assert report.payouts == {"a": 13, "b": 6}
    assert report.remainder == 1
    assert chain.nebula("neb").undistributed == 1
    before = chain.balance("a")
    assert withdraw(chain, "neb", "a") == 13
    assert chain.balance("a") == before + 13
    with pytest.raises(NothingToWithdraw):
        withdraw(chain, "neb", "a")
    with pytest.raises(NothingToWithdraw):
        withdraw(chain, "neb", "stranger")
    assert chain.conserved()


def test_empty_period_carries_pot():
    chain = chain_with_pulses()
    report = run_distribution(chain, "neb", 1, chain.height)
    assert report.payouts == {} and report.remainder == 20


def test_record_shape():
    r = distribute([rec("a", 1.0)], 5, "neb", 3).record()
    assert r == {"nebula": "neb", "period": 3, "pot": 5, "shares": {"a": 1.0}, "payouts": {"a": 5}, "remainder": 0}
