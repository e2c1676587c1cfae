"""Deterministic tick loop driving nodes, ledger, chains and the economy.

Per tick: scripted events, node phases, ledger finalisation, chain
transactions, score recalculation, period-boundary distributions.  Every
random draw comes from generators forked off the scenario seed by label, and
every iteration over nodes/chains/nebulae is in sorted order.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .. import __version__, crypto, economy
from ..chain import RESERVE, ChainError, TargetChain, write_scores
from ..crypto import KeyPair
from ..extractor import Extractor, FeedRegistry, FeedSpec, MockSource, SourceFault, SourceRef, bind_extractor, to_raw
from ..ledger import Kind, Ledger, NoQuorum, select_consuls
from ..node import NebulaBinding, Node, NodeContext, Schedule, Scheduler
from ..reputation import EigenTrustParams, Observation, ScoreMatrix, ScoringPolicy, compute_scores
from .faults import EffectiveFaults, inject_faults
from .scenario import NodeConfig, Scenario

log = logging.getLogger(__name__)


def fork_seed(seed: int, label: str) -> int:
    digest = hashlib.sha256(crypto.canonical(seed, label)).digest()
    return int.from_bytes(digest[:8], "big")


def fork_rng(seed: int, label: str) -> random.Random:
    return random.Random(fork_seed(seed, label))


def derive_keys(seed: int, node_id: str, purpose: str) -> KeyPair:
    return KeyPair.from_seed(hashlib.sha256(crypto.canonical("key", seed, node_id, purpose)).digest())


@dataclass
class RoundRecord:
    nebula_id: str
    round: int
    start_tick: int
    status: str = "pending"
    reason: str = ""
    leader: str = ""
    height: int = 0
    digest: str = ""
    value: object = None
    signers: list[str] = field(default_factory=list)
    participants: list[str] = field(default_factory=list)
    excluded: list[str] = field(default_factory=list)
    ignored: list[str] = field(default_factory=list)
    deliveries: dict[str, str] = field(default_factory=dict)

    def record(self) -> dict:
        return {
            "nebula": self.nebula_id,
            "round": self.round,
            "start_tick": self.start_tick,
            "status": self.status,
            "reason": self.reason,
            "leader": self.leader,
            "height": self.height,
            "digest": self.digest,
            "value": self.value,
            "signers": self.signers,
            "participants": self.participants,
            "excluded": self.excluded,
            "ignored": self.ignored,
            "deliveries": dict(sorted(self.deliveries.items())),
        }


@dataclass
class RunResult:
    report: dict
    ledger_log: str
    tx_logs: dict[str, str]
    traces: dict[str, str]
    sim: "Simulation"

    def report_json(self) -> str:
        return json.dumps(self.report, sort_keys=True, indent=2) + "\n"


class Simulation:
    def __init__(self, scenario: Scenario):
        self.sc = scenario
        pol = scenario.policy
        self.params = EigenTrustParams(pol.eigentrust.a, pol.eigentrust.epsilon, pol.eigentrust.max_iters)
        self.tick = 0
        self.ledger = Ledger(pol.consuls)
        self.chains: dict[str, TargetChain] = {}
        self.sources: dict[str, MockSource] = {}
        self.feeds = FeedRegistry()
        self.nodes: dict[str, Node] = {}
        self.node_cfg: dict[str, NodeConfig] = scenario.node_configs()
        self.sybils: set[str] = set()
        self.trust_view: dict[tuple[str, str], float] = {}
        self.scores: dict[str, float] = {}
        self.rounds: dict[tuple[str, int], RoundRecord] = {}
        self.score_samples: list[dict] = []
        self.rotations: list[dict] = []
        self.distributions: list[dict] = []
        self.events: list[dict] = []
        self.fraud_events: dict[tuple[str, int, str], dict] = {}
        self.conservation: dict[str, list[int]] = {}
        self.participation_log: list[dict] = []
        self.deposit_attempts: dict[int, list[tuple[str, str]]] = {}
        self.aggregation: dict[str, str] = {}
        self._dirty_scores = False
        self._faults = EffectiveFaults()
        self._setup()

    # -- setup --------------------------------------------------------------

    def _event(self, kind: str, **detail) -> None:
        self.events.append({"tick": self.tick, "kind": kind, **detail})

    def _setup(self) -> None:
        sc = self.sc
        for c in sc.chains:
            self.chains[c.id] = TargetChain(c.id, c.supply, c.min_deposit, c.lock_period, c.fee, c.freshness)
            self.conservation[c.id] = []

        for fc in sc.feeds:
            refs = []
            for s in fc.sources:
                walk = None
                if s.walk is not None:
                    walk = (to_raw(s.walk.start), to_raw(s.walk.step), fork_seed(sc.seed, f"source:{s.id}"))
                script = {int(t): to_raw(v) for t, v in s.script.items()}
                self.sources[s.id] = MockSource(s.id, script=script, walk=walk)
                refs.append(SourceRef(s.id, s.mandatory))
            self.feeds.add(FeedSpec(fc.id, tuple(refs), fc.merge, fc.decimals, fc.aggregation, fc.output))
        for sf in sc.faults.sources:
            value = to_raw(sf.value) if sf.value is not None else None
            self.sources[sf.source].faults[sf.tick] = SourceFault(sf.kind, value)

        bindings = []
        for nb in sc.nebulae:
            self.aggregation[nb.id] = self.feeds[nb.feed].aggregation
            bindings.append(NebulaBinding(nb.id, nb.chain, nb.feed, Schedule(nb.schedule.every, nb.schedule.offset)))
        self.scheduler = Scheduler(bindings)

        for nid, cfg in sorted(self.node_cfg.items()):
            self._make_node(nid, cfg.chains)
            for feed, source_ids in sorted(cfg.extractors.items()):
                bind_extractor(self.nodes[nid], feed, Extractor(self.feeds[feed], tuple(source_ids)), self.feeds)
            for ch in cfg.chains:
                self.chains[ch].transfer(RESERVE, nid, cfg.balance)

        genesis = [nid for nid, cfg in sorted(self.node_cfg.items()) if cfg.join_tick == 0]
        for nid in genesis:
            self._register(nid)
        trusted = [nid for nid in genesis if self.node_cfg[nid].genesis is not False]
        cap = sc.policy.build_up_cap
        for rater in trusted:
            for ratee in trusted:
                if rater != ratee:
                    self.nodes[rater].policy.seed(rater, ratee, cap)
                    self.trust_view[(rater, ratee)] = cap

        self._recompute_scores(force=True, initial=True)

        for nb in sc.nebulae:
            chain = self.chains[nb.chain]
            creator = nb.creator or next(n for n in genesis if nb.chain in self.node_cfg[n].chains)
            oracles = nb.oracles
            if oracles is None:
                oracles = [
                    n for n in genesis if nb.chain in self.node_cfg[n].chains and nb.feed in self.nodes[n].extractors
                ]
            chain.create_nebula(creator, nb.id, nb.feed, nb.k, nb.n, nb.min_score, nb.price, oracles)

        for sub in sc.subscriptions:
            chain = self.chains[self._nebula_chain(sub.nebula)]
            if sub.user not in chain.users:
                chain.transfer(RESERVE, sub.user, sub.balance)
                chain.deploy_user_contract(sub.user, trigger=(sub.kind == "trigger"))
            chain.subscribe(sub.user, sub.nebula, sub.method, sub.mode)
            if sub.deposit:
                chain.deposit(sub.user, sub.nebula, sub.deposit)
        self._check_conservation()

    def _nebula_chain(self, nebula_id: str) -> str:
        return next(nb.chain for nb in self.sc.nebulae if nb.id == nebula_id)

    def _make_node(self, nid: str, chains: Sequence[str]) -> Node:
        pol = self.sc.policy
        node = Node(
            nid,
            derive_keys(self.sc.seed, nid, "idl"),
            {ch: derive_keys(self.sc.seed, nid, f"chain:{ch}") for ch in chains},
            fork_rng(self.sc.seed, f"node:{nid}"),
            ScoringPolicy(pol.build_up_step, pol.build_up_cap, pol.unresponsive_after),
        )
        self.nodes[nid] = node
        return node

    def _node_chains(self, nid: str) -> list[str]:
        return sorted(self.nodes[nid].chain_keys)

    def _register(self, nid: str) -> None:
        node = self.nodes[nid]
        for ch in self._node_chains(nid):
            chain = self.chains[ch]
            cfg = self.node_cfg.get(nid)
            deposit = cfg.deposit if cfg is not None and cfg.deposit is not None else chain.system.min_deposit
            try:
                chain.register_node(nid, node.chain_keys[ch].public_key, deposit)
            except ChainError as err:
                self._event("registration_failed", node=nid, chain=ch, reason=err.reason)
                continue
        if self._is_active(nid):
            self.ledger.register_author(nid, node.idl_keys.public_key)

    def _is_active(self, nid: str) -> bool:
        return any(c.system.is_active(nid) for c in self.chains.values())

    def active_nodes(self) -> list[str]:
        return sorted(nid for nid in self.nodes if self._is_active(nid))

    # -- reputation ---------------------------------------------------------

    def _recompute_scores(self, force: bool = False, initial: bool = False) -> None:
        if not (force or self._dirty_scores):
            return
        self._dirty_scores = False
        ids = self.active_nodes()
        if not ids:
            return
        matrix = ScoreMatrix.from_entries(ids, self.trust_view)
        self.scores = {g.node_id: g.score for g in compute_scores(matrix, self.params)}
        if initial:
            # Genesis may have fewer nodes than seats; take whoever exists.
            self.ledger.set_consuls(select_consuls(self.scores, self.sc.policy.consuls))
            self._apply_consuls(self.ledger.consuls.members)
        writer = next((c for c in self.ledger.consuls.members if self._online(c)), None)
        if writer is None:
            self._event("score_write_skipped", reason="no consul online")
            return
        write_scores([self.chains[c] for c in sorted(self.chains)], writer, self.scores)
        self.score_samples.append({"tick": self.tick, "scores": {k: round(v, 6) for k, v in sorted(self.scores.items())}})
        for ch in sorted(self.chains):
            chain = self.chains[ch]
            for neb_id in sorted(chain.nebulae):
                chain.refresh_oracle_set(neb_id)

    def _apply_consuls(self, members: Sequence[str]) -> None:
        for ch in sorted(self.chains):
            self.chains[ch].set_consuls(members)
        self.rotations.append({"tick": self.tick, "members": list(members)})

    def _absorb_score_updates(self, messages) -> None:
        for msg in messages:
            if msg.kind is not Kind.SCORE_UPDATE:
                continue
            body = msg.body
            if self.ledger.author_id(msg.author) != body.rater:
                continue
            key = (body.rater, body.ratee)
            if self.trust_view.get(key) != body.value:
                self.trust_view[key] = body.value
                self._dirty_scores = True

    def _admissions(self) -> None:
        for ch in sorted(self.chains):
            chain = self.chains[ch]
            for neb_id in sorted(chain.nebulae):
                neb = chain.nebulae[neb_id]
                for nid in sorted(self.nodes):
                    node = self.nodes[nid]
                    if nid in neb.oracle_set or len(neb.oracle_set) >= neb.n:
                        continue
                    if not chain.system.is_active(nid) or neb.feed_id not in node.extractors:
                        continue
                    if not self._online(nid) or chain.system.score(nid) < neb.min_score:
                        continue
                    chain.admit_oracle(neb_id, nid)

    # -- faults and scripted events ------------------------------------------

    def _online(self, nid: str) -> bool:
        return self._faults.behavior(nid).online

    def _operational(self, nid: str) -> bool:
        """Online, registered and running at least one extractor."""
        return nid not in self.sybils and self._is_active(nid) and self._online(nid) and bool(self.nodes[nid].extractors)

    def _scripted_events(self, ctx: NodeContext) -> None:
        t = self.tick
        for nid, cfg in sorted(self.node_cfg.items()):
            if cfg.join_tick == t and t > 0:
                self._register(nid)
                self._event("join", node=nid)
            if cfg.exit_tick == t and self._is_active(nid):
                for ch in self._node_chains(nid):
                    chain = self.chains[ch]
                    if chain.system.is_active(nid):
                        rec = chain.deactivate_node(nid)
                        # One early attempt right after exit, one just before release, one at release.
                        for h in sorted({t + 1, rec.release_height - 1, rec.release_height}):
                            if h > t:
                                self.deposit_attempts.setdefault(h, []).append((ch, nid))
                self.ledger.unregister_author(self.nodes[nid].idl_keys.public_key)
                self._event("exit", node=nid)
        for wave in self._faults.sybil_waves:
            self._sybil_wave(wave)
        for m in self.sc.policy.manual_scores:
            if m.tick == t and self._is_active(m.rater):
                self.nodes[m.rater].manual_score(ctx, m.ratee, m.value)
                self._event("manual_score", rater=m.rater, ratee=m.ratee, value=m.value)
        for sub in self.sc.subscriptions:
            chain = self.chains[self._nebula_chain(sub.nebula)]
            for top in sub.topups:
                if top.tick != t:
                    continue
                try:
                    if top.amount:
                        chain.transfer(RESERVE, sub.user, top.amount)
                        if sub.mode == "deposit":
                            chain.deposit(sub.user, sub.nebula, top.amount)
                    if top.reactivate:
                        chain.reactivate(sub.user, sub.nebula)
                except ChainError as err:
                    self._event("topup_failed", user=sub.user, reason=err.reason)
        for ch, nid in self.deposit_attempts.pop(t, []):
            try:
                amount = self.chains[ch].withdraw_deposit(nid)
                self._event("deposit_released", node=nid, chain=ch, amount=amount)
            except ChainError as err:
                self._event("deposit_withdraw_failed", node=nid, chain=ch, reason=err.reason)

    def _sybil_wave(self, wave) -> None:
        chains = [wave.chain] if wave.chain else [c.id for c in self.sc.chains[:1]]
        existing = sum(1 for n in self.sybils if n.startswith(wave.prefix))
        for i in range(wave.count):
            nid = f"{wave.prefix}{existing + i:03d}"
            self.sybils.add(nid)
            self._make_node(nid, chains)
            for ch in chains:
                chain = self.chains[ch]
                chain.transfer(RESERVE, nid, chain.system.min_deposit + chain.system.fee)
            self._register(nid)
        self._event("sybil_wave", count=wave.count, chains=chains)

    # -- the loop -----------------------------------------------------------

    def _ctx(self) -> NodeContext:
        pol = self.sc.policy
        return NodeContext(
            tick=self.tick,
            ledger=self.ledger,
            chains=self.chains,
            sources=self.sources,
            aggregation=self.aggregation,
            round_timeout=pol.round_timeout,
            divergence_tolerance=pol.divergence_tolerance,
        )

    def _open_rounds(self) -> None:
        for b in self.scheduler.bindings:
            if b.schedule.matches(self.tick):
                key = (b.nebula_id, b.schedule.round_of(self.tick))
                self.rounds.setdefault(key, RoundRecord(b.nebula_id, key[1], self.tick))

    def step(self) -> None:
        self.tick += 1
        t = self.tick
        for ch in sorted(self.chains):
            self.chains[ch].advance(t)
        self._faults = inject_faults(self.sc, t)
        ctx = self._ctx()
        self._scripted_events(ctx)
        self._open_rounds()

        epoch_boundary = t % self.sc.policy.epoch == 0
        operational = [nid for nid in sorted(self.nodes) if self._operational(nid)]
        for nid in operational:
            node = self.nodes[nid]
            behavior = self._faults.behavior(nid)
            node.step(ctx, behavior)
            for task in node.on_tick(t, self.scheduler):
                node.commit_phase(task, ctx, behavior)
            if epoch_boundary:
                stable = [(other, Observation.STABLE_EPOCH) for other in operational if other != nid]
                node.observe(ctx, stable)

        withholding = set(self._faults.withholding)
        withholding |= {c for c in self.ledger.consuls.members if not self._online(c)}
        signers = {c: self.nodes[c].idl_keys for c in self.ledger.consuls.members if c in self.nodes}
        block = None
        try:
            block = self.ledger.finalize_block(t, signers, withholding)
        except NoQuorum as err:
            self._event("no_quorum", signed=err.signed, quorum=err.quorum, pending=len(self.ledger.pending))

        for nid in operational:
            self.nodes[nid].chain_step(ctx)

        if block is not None:
            self._absorb_score_updates(block.messages)
        self._recompute_scores(force=epoch_boundary)
        if epoch_boundary:
            before = self.ledger.consuls.members
            consuls = self.ledger.rotate_consuls({n: self.scores.get(n, 0.0) for n in self.active_nodes()})
            if consuls.members != before:
                self._apply_consuls(consuls.members)
        self._admissions()

        if t % self.sc.policy.distribution_period == 0:
            self._distribute(t)
        self._update_rounds()
        self._check_conservation()

    def _distribute(self, t: int) -> None:
        period = t // self.sc.policy.distribution_period
        start = t - self.sc.policy.distribution_period
        for ch in sorted(self.chains):
            chain = self.chains[ch]
            for neb_id in sorted(chain.nebulae):
                report = economy.run_distribution(chain, neb_id, period, start)
                self.distributions.append({"chain": ch, "tick": t, **report.record()})
                for nid, amount in sorted(report.payouts.items()):
                    if amount > 0:
                        economy.withdraw(chain, neb_id, nid)

    def _update_rounds(self) -> None:
        for key, rec in sorted(self.rounds.items()):
            if rec.status != "pending":
                continue
            neb_id, rnd = key
            chain = self.chains[self._nebula_chain(neb_id)]
            neb = chain.nebulae[neb_id]
            parts = [n.participations[key] for n in self.nodes.values() if key in n.participations]
            rec.participants = sorted(n.node_id for n in self.nodes.values() if key in n.participations)
            if rnd in neb.pulse_log:
                pulse = neb.pulse_log[rnd]
                rec.status = "delivered"
                rec.leader = pulse.leader
                rec.height = pulse.height
                rec.digest = pulse.agg_digest.hex()
                rec.signers = list(pulse.signers)
                leader_part = self.nodes[pulse.leader].participations.get(key)
                if leader_part is not None:
                    rec.value = leader_part.agg_value
                    if leader_part.delivery is not None:
                        rec.deliveries = {u: r.value for u, r in leader_part.delivery.results.items()}
            elif self.tick > rec.start_tick and all(p.terminal for p in parts):
                rec.status = "failed"
                reasons = Counter(p.reason for p in parts if p.reason)
                rec.reason = min(reasons.items(), key=lambda kv: (-kv[1], kv[0]))[0] if reasons else "NoEligibleNodes"
            if rec.status != "pending":
                flagged: dict[str, str] = {}
                ignored: set[str] = set()
                for p in parts:
                    flagged.update(p.flagged)
                    ignored |= p.ignored
                rec.excluded = sorted(flagged)
                rec.ignored = sorted(ignored)
                for n in sorted(self.nodes.values(), key=lambda n: n.node_id):
                    for neb, r, peer, why in n.fraud_seen:
                        if (neb, r) == key:
                            ev = self.fraud_events.setdefault(
                                (neb, r, peer), {"nebula": neb, "round": r, "node": peer, "reason": why, "flagged_by": []}
                            )
                            if n.node_id not in ev["flagged_by"]:
                                ev["flagged_by"].append(n.node_id)

    def _check_conservation(self) -> None:
        for ch in sorted(self.chains):
            if not self.chains[ch].conserved():
                self.conservation[ch].append(self.tick)

    def run(self) -> RunResult:
        while self.tick < self.sc.ticks:
            self.step()
        return RunResult(
            report=self.report(),
            ledger_log=self.ledger.dump(),
            tx_logs={ch: c.dump_txs() for ch, c in sorted(self.chains.items())},
            traces={nid: "".join(json.dumps(r, sort_keys=True) + "\n" for r in n.trace) for nid, n in sorted(self.nodes.items())},
            sim=self,
        )

    # -- report -------------------------------------------------------------

    def report(self) -> dict:
        rounds = [r.record() for _, r in sorted(self.rounds.items())]
        for r in rounds:
            if r["status"] == "pending":
                r["status"] = "incomplete"
        delivered = sum(r["status"] == "delivered" for r in rounds)
        failed = sum(r["status"] == "failed" for r in rounds)
        settled = delivered + failed
        callbacks: dict[str, int] = {}
        for ch in sorted(self.chains):
            for uid, u in sorted(self.chains[ch].users.items()):
                callbacks[uid] = callbacks.get(uid, 0) + len(u.received_log)
        fraud = [self.fraud_events[k] for k in sorted(self.fraud_events)]
        for ev in fraud:
            ev["flagged_by"] = sorted(ev["flagged_by"])
        return {
            "version": __version__,
            "hash": crypto.HASH_NAME,
            "signature_scheme": crypto.SIGNATURE_SCHEME,
            "seed": self.sc.seed,
            "ticks": self.sc.ticks,
            "rounds": rounds,
            "metrics": {
                "rounds_total": len(rounds),
                "rounds_delivered": delivered,
                "rounds_failed": failed,
                "rounds_incomplete": len(rounds) - settled,
                "delivery_success_rate": round(delivered / settled, 6) if settled else None,
                "fraud_events": len(fraud),
                "excluded_reveals": sum(len(r["excluded"]) for r in rounds),
                "callbacks": callbacks,
            },
            "final_scores": {k: round(v, 6) for k, v in sorted(self.scores.items())},
            "score_trajectory": self.score_samples,
            "ledger": {
                "height": self.ledger.height,
                "head_digest": self.ledger.head_digest.hex(),
                "chain_valid": self.ledger.verify_chain(),
                "pending": len(self.ledger.pending),
            },
            "conservation": {
                ch: {"ok": not fails, "failed_ticks": fails, "supply": self.chains[ch].supply}
                for ch, fails in sorted(self.conservation.items())
            },
            "distributions": self.distributions,
            "fraud_events": fraud,
            "consul_rotations": self.rotations,
            "events": self.events + [{"tick": None, "kind": "warning", "message": w} for w in self.ledger.warnings],
            "chains": {
                ch: {
                    "height": c.height,
                    "treasury": c.balance("treasury"),
                    "oracle_sets": {n: list(nb.oracle_set) for n, nb in sorted(c.nebulae.items())},
                    "registered": sorted(n for n, r in c.system.registered.items() if r.active),
                }
                for ch, c in sorted(self.chains.items())
            },
        }


def run(scenario: Scenario) -> RunResult:
    return Simulation(scenario).run()


def write_outputs(result: RunResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(result.report_json())
    (out / "ledger.log").write_text(result.ledger_log)
    for ch, text in result.tx_logs.items():
        d = out / "chains" / ch
        d.mkdir(parents=True, exist_ok=True)
        (d / "txs.log").write_text(text)
    for nid, text in result.traces.items():
        d = out / "nodes" / nid
        d.mkdir(parents=True, exist_ok=True)
        (d / "trace.log").write_text(text)
    return out


def _run_to_json(scenario: Scenario) -> str:
    return run(scenario).report_json()


def run_many(scenarios: Iterable[Scenario], jobs: Optional[int] = None) -> list[str]:
    """Run independent scenarios in parallel processes; returns report.json texts in input order."""
    scenarios = list(scenarios)
    if jobs == 1 or len(scenarios) <= 1:
        return [_run_to_json(s) for s in scenarios]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_to_json, scenarios))
