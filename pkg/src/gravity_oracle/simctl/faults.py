"""Translate a scenario's fault plan into per-tick node behaviour."""

from __future__ import annotations

from dataclasses import dataclass, field

from ..node import Behavior
from .scenario import Scenario, SybilWave


@dataclass
class EffectiveFaults:
    behaviors: dict[str, Behavior] = field(default_factory=dict)
    withholding: set[str] = field(default_factory=set)
    sybil_waves: list[SybilWave] = field(default_factory=list)

    def behavior(self, node_id: str) -> Behavior:
        return self.behaviors.get(node_id, Behavior())


def inject_faults(scenario: Scenario, tick: int) -> EffectiveFaults:
    f = scenario.faults
    out = EffectiveFaults()

    def get(node_id: str) -> Behavior:
        return out.behaviors.setdefault(node_id, Behavior())

    for w in f.offline:
        if w.covers(tick):
            get(w.node).online = False
    for w in f.divergent:
        if w.covers(tick):
            get(w.node).divergent_offset += w.offset
    for w in f.fraud_reveal:
        if w.covers(tick):
            get(w.node).fraud_delta += w.delta
    for w in f.copy_reveal:
        if w.covers(tick):
            get(w.node).copy_reveal = True
    for w in f.consul_withhold:
        if w.covers(tick):
            out.withholding.add(w.node)
    out.sybil_waves = [w for w in f.sybil if w.tick == tick]
    return out
