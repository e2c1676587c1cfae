"""Oracle node: per-round commit, reveal, aggregate, sign and leader submission.

A node never talks to its peers directly.  Everything it learns about a round
comes from finalised ledger messages, so honest nodes acting on the same tick
see the same commits, reveals and signatures and reach the same aggregate.
"""

from __future__ import annotations

import enum
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

from . import crypto
from .chain import (
    ChainError,
    DeliveryReport,
    PulseRejected,
    TargetChain,
    signing_payload,
    value_digest,
)
from .crypto import KeyPair, RevealCheck
from .extractor import Extractor, ExtractorError, MockSource, Params
from .ledger import (
    AggSignaturePayload,
    CommitPayload,
    Kind,
    Ledger,
    LedgerMessage,
    MessageRejected,
    RevealPayload,
    ScoreUpdatePayload,
)
from .reputation import Observation, ScoringPolicy


class Phase(enum.Enum):
    IDLE = "Idle"
    COMMITTED = "Committed"
    REVEALED = "Revealed"
    AGGREGATED = "Aggregated"
    SIGNED = "Signed"
    DONE = "Done"
    FAILED = "Failed"


PHASE_ORDER = [Phase.IDLE, Phase.COMMITTED, Phase.REVEALED, Phase.AGGREGATED, Phase.SIGNED, Phase.DONE]


class FailReason(str, enum.Enum):
    EXTRACTOR_ERROR = "ExtractorError"
    INSUFFICIENT_COMMITS = "InsufficientCommits"
    INSUFFICIENT_REVEALS = "InsufficientReveals"
    NO_QUORUM_DIGEST = "NoQuorumDigest"
    CHAIN_REJECTED = "ChainRejected"
    NOT_DELIVERED = "NotDelivered"
    NO_COMMIT = "NoCommit"
    LEDGER_REJECTED = "LedgerRejected"


class AggregationError(ValueError):
    pass


def aggregate(values: Iterable, rule: str):
    """Deterministic aggregate of revealed values.

    ``median`` is the lower median, ``average`` the floored mean and ``mode``
    the most frequent value with ties going to the smallest.
    """
    vals = sorted(values)
    if not vals:
        raise AggregationError("nothing to aggregate")
    if rule == "median":
        return vals[(len(vals) - 1) // 2]
    if rule == "average":
        if any(isinstance(v, str) for v in vals):
            raise AggregationError("cannot average string values")
        return sum(vals) // len(vals)
    if rule == "mode":
        counts = Counter(vals)
        top = max(counts.values())
        return min(v for v, c in counts.items() if c == top)
    raise AggregationError(f"unknown aggregation rule {rule!r}")


def diverges(value, reference, tolerance: float) -> bool:
    if isinstance(value, str) or isinstance(reference, str):
        return value != reference
    return abs(value - reference) > tolerance * abs(reference)


@dataclass(frozen=True)
class Schedule:
    every: int
    offset: int = 0

    def matches(self, tick: int) -> bool:
        return tick >= self.offset and (tick - self.offset) % self.every == 0

    def round_of(self, tick: int) -> int:
        return (tick - self.offset) // self.every


@dataclass(frozen=True)
class RoundTask:
    nebula_id: str
    chain_id: str
    feed_id: str
    round: int
    start_tick: int
    params: Params


@dataclass(frozen=True)
class NebulaBinding:
    nebula_id: str
    chain_id: str
    feed_id: str
    schedule: Schedule
    aggregation: str = "median"


class Scheduler:
    def __init__(self, bindings: Iterable[NebulaBinding] = ()):
        self.bindings = list(bindings)

    def on_tick(self, tick: int, supported_feeds: Iterable[str]) -> list[RoundTask]:
        feeds = set(supported_feeds)
        tasks = []
        for b in self.bindings:
            if b.feed_id in feeds and b.schedule.matches(tick):
                tasks.append(
                    RoundTask(b.nebula_id, b.chain_id, b.feed_id, b.schedule.round_of(tick), tick, Params(tick, b.feed_id))
                )
        return tasks


@dataclass
class Behavior:
    """Effective fault behaviour of one node for one tick."""

    online: bool = True
    divergent_offset: int = 0
    fraud_delta: int = 0
    copy_reveal: bool = False


HONEST = Behavior()


@dataclass
class PulseParticipation:
    nebula_id: str
    chain_id: str
    feed_id: str
    round: int
    start_tick: int
    phase: Phase = Phase.IDLE
    value: object = None
    salt: bytes = b""
    reveal_tick: Optional[int] = None
    sign_tick: Optional[int] = None
    peer_values: dict[str, object] = field(default_factory=dict)
    flagged: dict[str, str] = field(default_factory=dict)
    ignored: set[str] = field(default_factory=set)
    agg_value: object = None
    agg_digest: Optional[crypto.Digest] = None
    timestamp: Optional[int] = None
    proof: Optional[crypto.Proof] = None
    reason: Optional[str] = None
    history: list[Phase] = field(default_factory=lambda: [Phase.IDLE])
    copycat: bool = False
    delivery: Optional[DeliveryReport] = None

    @property
    def key(self) -> tuple[str, int]:
        return (self.nebula_id, self.round)

    @property
    def terminal(self) -> bool:
        return self.phase in (Phase.DONE, Phase.FAILED)

    def advance(self, phase: Phase) -> None:
        if self.terminal:
            raise RuntimeError(f"round {self.key} already finished ({self.phase.value})")
        if PHASE_ORDER.index(phase) <= PHASE_ORDER.index(self.phase):
            raise RuntimeError(f"phase {self.phase.value} -> {phase.value} is not forward")
        self.phase = phase
        self.history.append(phase)

    def fail(self, reason: str) -> None:
        if self.terminal:
            raise RuntimeError(f"round {self.key} already finished ({self.phase.value})")
        self.phase = Phase.FAILED
        self.reason = reason
        self.history.append(Phase.FAILED)


@dataclass
class NodeContext:
    """What a node can see during a tick: the ledger, chains and raw sources."""

    tick: int
    ledger: Ledger
    chains: Mapping[str, TargetChain]
    sources: Mapping[str, MockSource]
    aggregation: Mapping[str, str]  # nebula id -> aggregation rule
    round_timeout: int = 3
    divergence_tolerance: float = 0.05


class Node:
    def __init__(
        self,
        node_id: str,
        idl_keys: KeyPair,
        chain_keys: Mapping[str, KeyPair],
        rng: random.Random,
        policy: Optional[ScoringPolicy] = None,
    ):
        self.node_id = node_id
        self.idl_keys = idl_keys
        self.chain_keys = dict(chain_keys)
        self.rng = rng
        self.policy = policy or ScoringPolicy()
        self.extractors: dict[str, Extractor] = {}
        self.participations: dict[tuple[str, int], PulseParticipation] = {}
        self.trace: list[dict] = []
        self.fraud_seen: list[tuple[str, int, str, str]] = []

    def __repr__(self) -> str:
        return f"Node({self.node_id})"

    @property
    def supported_feeds(self) -> set[str]:
        return set(self.extractors)

    # -- bookkeeping --------------------------------------------------------

    def _trace(self, tick: int, part: PulseParticipation, transition: str, detail: str = "") -> None:
        self.trace.append(
            {
                "tick": tick,
                "node": self.node_id,
                "nebula": part.nebula_id,
                "feed": part.feed_id,
                "round": part.round,
                "transition": transition,
                "detail": detail,
            }
        )

    def _move(self, tick: int, part: PulseParticipation, phase: Phase, detail: str = "") -> None:
        before = part.phase
        part.advance(phase)
        self._trace(tick, part, f"{before.value}->{phase.value}", detail)

    def _fail(self, tick: int, part: PulseParticipation, reason: str, detail: str = "") -> None:
        before = part.phase
        part.fail(reason)
        self._trace(tick, part, f"{before.value}->Failed", f"{reason} {detail}".strip())

    def _submit(self, ctx: NodeContext, kind: Kind, payload) -> Optional[LedgerMessage]:
        msg = LedgerMessage.create(kind, payload, self.idl_keys)
        try:
            ctx.ledger.submit(msg)
        except MessageRejected:
            return None
        return msg

    def eligible(self, chain: TargetChain, nebula_id: str) -> bool:
        neb = chain.nebula(nebula_id)
        return (
            chain.system.is_active(self.node_id)
            and self.node_id in neb.oracle_set
            and chain.system.score(self.node_id) >= neb.min_score
        )

    def active_rounds(self) -> list[PulseParticipation]:
        return [p for p in self.participations.values() if not p.terminal]

    # -- scheduler ----------------------------------------------------------

    def on_tick(self, tick: int, scheduler: Scheduler) -> list[RoundTask]:
        return scheduler.on_tick(tick, self.supported_feeds)

    # -- phases -------------------------------------------------------------

    def commit_phase(
        self, task: RoundTask, ctx: NodeContext, behavior: Behavior = HONEST
    ) -> Optional[LedgerMessage]:
        chain = ctx.chains[task.chain_id]
        if task.feed_id not in self.extractors or not self.eligible(chain, task.nebula_id):
            return None
        part = PulseParticipation(task.nebula_id, task.chain_id, task.feed_id, task.round, task.start_tick)
        self.participations[part.key] = part
        try:
            point = self.extractors[task.feed_id].extract(task.params, ctx.sources)
        except ExtractorError as err:
            self._fail(ctx.tick, part, FailReason.EXTRACTOR_ERROR.value, str(err))
            return None
        value = point.value
        if behavior.divergent_offset and isinstance(value, int):
            value += behavior.divergent_offset
        part.value = value
        part.salt = self.rng.randbytes(crypto.SALT_SIZE)
        if behavior.copy_reveal:
            # Skips the commitment and later reveals anyway.
            part.copycat = True
            self._trace(ctx.tick, part, "note", "skipped commit")
            return None
        commitment = crypto.make_commitment(task.feed_id, task.round, value, part.salt, self.idl_keys.public_key)
        msg = self._submit(ctx, Kind.COMMIT, CommitPayload(task.nebula_id, commitment))
        if msg is None:
            self._fail(ctx.tick, part, FailReason.LEDGER_REJECTED.value, "commit")
            return None
        self._move(ctx.tick, part, Phase.COMMITTED, f"value={value}")
        return msg

    def _finalized_commits(self, ctx: NodeContext, part: PulseParticipation, chain: TargetChain) -> dict[str, crypto.Commitment]:
        neb = chain.nebula(part.nebula_id)
        members = set(neb.oracle_set)
        commits: dict[str, crypto.Commitment] = {}
        for msg in ctx.ledger.read_messages(Kind.COMMIT, part.feed_id, part.round, part.nebula_id):
            author = ctx.ledger.author_id(msg.author) or _unknown(msg.author)
            body = msg.body
            if author in members and author not in commits and body.commitment.author == msg.author:
                commits[author] = body.commitment
        return commits

    def reveal_phase(
        self, part: PulseParticipation, ctx: NodeContext, behavior: Behavior = HONEST
    ) -> Optional[LedgerMessage]:
        """Reveal once at least K distinct commits are final; fail at the timeout."""
        chain = ctx.chains[part.chain_id]
        neb = chain.nebula(part.nebula_id)
        commits = self._finalized_commits(ctx, part, chain)
        if len(commits) < neb.k:
            if ctx.tick - part.start_tick >= ctx.round_timeout:
                self._fail(ctx.tick, part, FailReason.INSUFFICIENT_COMMITS.value, f"{len(commits)}<{neb.k}")
            return None
        value = part.value
        if behavior.fraud_delta and isinstance(value, int):
            value = value + behavior.fraud_delta
        reveal = crypto.Reveal(value, part.salt, part.feed_id, part.round, self.idl_keys.public_key)
        msg = self._submit(ctx, Kind.REVEAL, RevealPayload(part.nebula_id, reveal))
        if msg is None:
            self._fail(ctx.tick, part, FailReason.LEDGER_REJECTED.value, "reveal")
            return None
        part.reveal_tick = ctx.tick
        if part.copycat:
            self._fail(ctx.tick, part, FailReason.NO_COMMIT.value, "revealed without commitment")
            return msg
        self._move(ctx.tick, part, Phase.REVEALED, f"commits={len(commits)}")
        return msg

    def collect_reveals(
        self, part: PulseParticipation, ctx: NodeContext
    ) -> tuple[dict[str, object], dict[str, str], set[str], set[str]]:
        """Validate finalised reveals against finalised commits.

        Returns (valid values by node, flagged nodes with a reason, committers,
        nodes whose reveal had no finalised commit and was ignored).
        """
        chain = ctx.chains[part.chain_id]
        commits = self._finalized_commits(ctx, part, chain)
        valid: dict[str, object] = {}
        flagged: dict[str, str] = {}
        seen: set[str] = set()
        ignored: set[str] = set()
        for msg in ctx.ledger.read_messages(Kind.REVEAL, part.feed_id, part.round, part.nebula_id):
            author = ctx.ledger.author_id(msg.author) or _unknown(msg.author)
            if author in seen:
                continue
            seen.add(author)
            reveal = msg.body.reveal
            commitment = commits.get(author)
            if commitment is None:
                ignored.add(author)
                continue
            if reveal.author != msg.author:
                flagged[author] = "reveal author mismatch"
                continue
            try:
                check = crypto.open_reveal(commitment, reveal)
            except crypto.RevealMismatch:
                check = RevealCheck.FRAUDULENT
            if check is RevealCheck.VALID:
                valid[author] = reveal.value
            else:
                flagged[author] = "reveal does not match commit"
        return valid, flagged, set(commits), ignored

    def aggregate_phase(
        self, part: PulseParticipation, ctx: NodeContext, behavior: Behavior = HONEST
    ) -> Optional[LedgerMessage]:
        """Aggregate valid reveals, raise peer observations, then sign."""
        if part.reveal_tick is None or ctx.tick <= part.reveal_tick:
            return None
        chain = ctx.chains[part.chain_id]
        neb = chain.nebula(part.nebula_id)
        valid, flagged, committers, ignored = self.collect_reveals(part, ctx)
        revealed = set(valid) | (set(flagged) & committers)
        if not committers <= revealed and ctx.tick - part.start_tick < ctx.round_timeout:
            return None

        observations: list[tuple[str, Observation]] = []
        for peer, why in sorted(flagged.items()):
            if peer == self.node_id:
                continue
            observations.append((peer, Observation.FRAUD))
            self.fraud_seen.append((part.nebula_id, part.round, peer, why))
        for peer in sorted(neb.oracle_set):
            if peer == self.node_id:
                continue
            if peer in committers:
                observations.append((peer, Observation.RESPONSIVE))
            elif chain.system.score(peer) >= neb.min_score:
                observations.append((peer, Observation.MISSED_ROUND))
        part.peer_values = dict(valid)
        part.flagged = dict(flagged)
        part.ignored = set(ignored)

        if len(valid) < neb.k:
            self._emit_observations(ctx, observations)
            self._fail(ctx.tick, part, FailReason.INSUFFICIENT_REVEALS.value, f"{len(valid)}<{neb.k}")
            return None
        rule = ctx.aggregation.get(part.nebula_id, "median")
        agg = aggregate(valid.values(), rule)
        if behavior.divergent_offset and isinstance(agg, int):
            agg += behavior.divergent_offset
        for peer, v in sorted(valid.items()):
            if peer != self.node_id and diverges(v, agg, ctx.divergence_tolerance):
                observations.append((peer, Observation.DIVERGENCE))
        self._emit_observations(ctx, observations)
        part.agg_value = agg
        part.agg_digest = value_digest(agg)
        self._move(ctx.tick, part, Phase.AGGREGATED, f"agg={agg} reveals={len(valid)}")
        return self.sign_phase(part, ctx, chain.height)

    def sign_phase(self, part: PulseParticipation, ctx: NodeContext, timestamp: int) -> Optional[LedgerMessage]:
        keys = self.chain_keys[part.chain_id]
        payload = signing_payload(part.agg_digest, timestamp, part.feed_id, part.nebula_id, part.round)
        part.proof = crypto.sign_message(keys.secret_key, payload)
        part.timestamp = timestamp
        body = AggSignaturePayload(part.agg_digest, timestamp, part.feed_id, part.nebula_id, part.round, part.proof)
        msg = self._submit(ctx, Kind.AGG_SIGNATURE, body)
        if msg is None:
            self._fail(ctx.tick, part, FailReason.LEDGER_REJECTED.value, "signature")
            return None
        part.sign_tick = ctx.tick
        self._move(ctx.tick, part, Phase.SIGNED, part.agg_digest.hex()[:16])
        return msg

    def signature_tally(self, part: PulseParticipation, ctx: NodeContext) -> list[tuple[crypto.Digest, int, list[crypto.Proof]]]:
        """Finalised signatures grouped by (digest, timestamp), best supported first."""
        chain = ctx.chains[part.chain_id]
        neb = chain.nebula(part.nebula_id)
        keys = {chain.oracle_key(o) for o in neb.oracle_set}
        groups: dict[tuple[bytes, int], dict[bytes, crypto.Proof]] = {}
        for msg in ctx.ledger.read_messages(Kind.AGG_SIGNATURE, part.feed_id, part.round, part.nebula_id):
            body = msg.body
            if body.proof.signer not in keys:
                continue
            groups.setdefault((body.agg_digest, body.timestamp), {}).setdefault(body.proof.signer, body.proof)
        ranked = sorted(groups.items(), key=lambda kv: (-len(kv[1]), kv[0][0], kv[0][1]))
        return [(crypto.Digest(d), ts, list(proofs.values())) for (d, ts), proofs in ranked]

    def leader_submit(self, part: PulseParticipation, ctx: NodeContext) -> Optional[DeliveryReport]:
        """Submit pulse_tx and send_data_tx if this node leads at the current height."""
        chain = ctx.chains[part.chain_id]
        neb = chain.nebula(part.nebula_id)
        if part.round in neb.pulse_log:
            self._move(ctx.tick, part, Phase.DONE, f"accepted at {neb.pulse_log[part.round].height}")
            return None
        tally = self.signature_tally(part, ctx)
        best = tally[0] if tally else None
        quorum = best is not None and len(best[2]) >= neb.k
        age = ctx.tick - part.sign_tick
        if neb.expected_leader(chain.height) != self.node_id:
            # One tick past the last height a leader could still submit.
            if age > chain.freshness:
                reason = FailReason.NOT_DELIVERED if quorum else FailReason.NO_QUORUM_DIGEST
                self._fail(ctx.tick, part, reason.value)
            return None
        if not quorum:
            if age >= chain.freshness:
                self._fail(ctx.tick, part, FailReason.NO_QUORUM_DIGEST.value, f"best={len(best[2]) if best else 0}")
            return None
        digest, timestamp, proofs = best
        if digest != part.agg_digest:
            # Only a value hashing to the supported digest may be delivered.
            self._trace(ctx.tick, part, "note", "leader abstains: own aggregate not supported")
            if age >= chain.freshness:
                self._fail(ctx.tick, part, FailReason.NOT_DELIVERED.value, "leader diverged")
            return None
        try:
            chain.pulse_tx(part.nebula_id, part.round, digest, timestamp, self.node_id, proofs)
        except PulseRejected as err:
            self._fail(ctx.tick, part, FailReason.CHAIN_REJECTED.value, err.why.value)
            return None
        try:
            report = chain.send_data_tx(part.nebula_id, part.round, part.agg_value, chain.active_subscribers(part.nebula_id))
        except ChainError as err:
            self._fail(ctx.tick, part, FailReason.CHAIN_REJECTED.value, err.reason)
            return None
        part.delivery = report
        self._move(ctx.tick, part, Phase.DONE, f"leader delivered to {len(report.delivered)}")
        return report

    def step(self, ctx: NodeContext, behavior: Behavior = HONEST) -> None:
        """Advance reveal and aggregation for every open round (node phase of a tick)."""
        for part in sorted(self.active_rounds(), key=lambda p: (p.nebula_id, p.round)):
            if part.phase is Phase.COMMITTED or (part.copycat and part.phase is Phase.IDLE):
                self.reveal_phase(part, ctx, behavior)
            elif part.phase is Phase.REVEALED:
                self.aggregate_phase(part, ctx, behavior)

    def chain_step(self, ctx: NodeContext) -> list[DeliveryReport]:
        """Leader duties and round completion (chain-transaction phase of a tick)."""
        reports = []
        for part in sorted(self.active_rounds(), key=lambda p: (p.nebula_id, p.round)):
            if part.phase is Phase.SIGNED and ctx.tick >= part.sign_tick:
                report = self.leader_submit(part, ctx)
                if report is not None:
                    reports.append(report)
        return reports

    # -- reputation ---------------------------------------------------------

    def _emit_observations(self, ctx: NodeContext, observations) -> list[LedgerMessage]:
        changed = self.policy.apply_automatic_policy(self.node_id, observations)
        return self.publish_scores(ctx, changed, "automatic")

    def publish_scores(self, ctx: NodeContext, changed: Mapping[str, float], mode: str) -> list[LedgerMessage]:
        out = []
        for ratee, value in sorted(changed.items()):
            msg = self._submit(ctx, Kind.SCORE_UPDATE, ScoreUpdatePayload(self.node_id, ratee, value, mode))
            if msg is not None:
                out.append(msg)
        return out

    def observe(self, ctx: NodeContext, observations) -> list[LedgerMessage]:
        return self._emit_observations(ctx, observations)

    def manual_score(self, ctx: NodeContext, ratee: str, value: float) -> list[LedgerMessage]:
        v = self.policy.apply_manual_score(self.node_id, ratee, value)
        return self.publish_scores(ctx, {ratee: v}, "manual")


def _unknown(key: bytes) -> str:
    return "?" + key.hex()[:8]
