"""Reward distribution by activity x score impact shares."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

from .chain import ChainError, NebulaContract, TargetChain


class NothingToWithdraw(ChainError):
    reason = "NothingToWithdraw"


@dataclass(frozen=True)
class ImpactRecord:
    node_id: str
    activity: float
    score: float  # register score / 100
    impact: float


@dataclass
class DistributionReport:
    nebula_id: str
    period: int
    pot: int
    shares: dict[str, float] = field(default_factory=dict)
    payouts: dict[str, int] = field(default_factory=dict)
    remainder: int = 0

    def record(self) -> dict:
        return {
            "nebula": self.nebula_id,
            "period": self.period,
            "pot": self.pot,
            "shares": {k: round(v, 12) for k, v in sorted(self.shares.items())},
            "payouts": dict(sorted(self.payouts.items())),
            "remainder": self.remainder,
        }


def compute_impacts(
    signature_counts: Mapping[str, int],
    accepted_pulses: int,
    scores: Mapping[str, float],
    oracles: Sequence[str] = (),
) -> list[ImpactRecord]:
    """One record per node seen in ``signature_counts`` or ``oracles``.

    ``scores`` are register values in [0, 100].  With no accepted pulses every
    activity is zero.
    """
    nodes = sorted(set(signature_counts) | set(oracles))
    records = []
    for nid in nodes:
        count = signature_counts.get(nid, 0)
        activity = count / accepted_pulses if accepted_pulses else 0.0
        score = scores.get(nid, 0.0) / 100.0
        records.append(ImpactRecord(nid, activity, score, activity * score))
    return records


def distribute(impacts: Sequence[ImpactRecord], pot: int, nebula_id: str = "", period: int = 0) -> DistributionReport:
    """Split ``pot`` in proportion to impact, flooring payouts; the rest carries over."""
    if pot < 0:
        raise ValueError("pot must be non-negative")
    report = DistributionReport(nebula_id, period, pot)
    # Exact rationals so payouts do not wobble with float rounding.
    weights = {r.node_id: Fraction(r.impact) for r in impacts}
    total = sum(weights.values(), Fraction(0))
    if total <= 0:
        report.remainder = pot
        return report
    for nid, w in weights.items():
        share = w / total
        report.shares[nid] = float(share)
        report.payouts[nid] = int(share * pot)
    report.remainder = pot - sum(report.payouts.values())
    return report


def period_activity(nebula: NebulaContract, start_height: int, end_height: int) -> tuple[dict[str, int], int]:
    """Signature counts and accepted pulses with start < height <= end."""
    counts: dict[str, int] = {}
    accepted = 0
    for rec in nebula.pulse_log.values():
        if start_height < rec.height <= end_height:
            accepted += 1
            for s in rec.signers:
                counts[s] = counts.get(s, 0) + 1
    return counts, accepted


def run_distribution(chain: TargetChain, nebula_id: str, period: int, start_height: int) -> DistributionReport:
    """Close a period on one nebula: compute impacts, credit withdrawable balances."""
    neb = chain.nebula(nebula_id)
    counts, accepted = period_activity(neb, start_height, chain.height)
    pot = neb.undistributed
    if accepted == 0:
        report = DistributionReport(nebula_id, period, pot, remainder=pot)
    else:
        impacts = compute_impacts(counts, accepted, chain.system.score_register, neb.oracle_set)
        report = distribute(impacts, pot, nebula_id, period)
    for nid, amount in report.payouts.items():
        if amount:
            neb.withdrawable[nid] = neb.withdrawable.get(nid, 0) + amount
    neb.undistributed = report.remainder
    chain.log_tx(
        "distribute",
        [nebula_id],
        {"pot": pot, "paid": pot - report.remainder, "remainder": report.remainder, "period": period},
    )
    return report


def withdraw(chain: TargetChain, nebula_id: str, node_id: str) -> int:
    neb = chain.nebula(nebula_id)
    amount = neb.withdrawable.get(node_id, 0)
    if amount <= 0:
        chain.log_tx("withdraw_reward", [nebula_id, node_id], result=NothingToWithdraw.reason)
        raise NothingToWithdraw(node_id)
    neb.withdrawable[node_id] = 0
    chain.accounts[node_id] = chain.balance(node_id) + amount
    chain.log_tx("withdraw_reward", [nebula_id, node_id], {"amount": amount})
    return amount
