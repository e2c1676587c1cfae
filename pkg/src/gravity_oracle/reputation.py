"""Peer trust matrix, EigenTrust and the automatic/manual scoring policy."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np


class NonConvergence(RuntimeError):
    def __init__(self, t: np.ndarray, delta: float, iterations: int):
        super().__init__(f"EigenTrust did not converge in {iterations} iterations (delta={delta:.3e})")
        self.t = t
        self.delta = delta
        self.iterations = iterations


@dataclass
class ScoreMatrix:
    """``s[i][j]`` is node i's local trust in node j; the diagonal is ignored."""

    node_ids: list[str]
    s: np.ndarray

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=float)
        n = len(self.node_ids)
        if self.s.shape != (n, n):
            raise ValueError(f"score matrix must be {n}x{n}, got {self.s.shape}")
        if len(set(self.node_ids)) != n:
            raise ValueError("duplicate node ids in score matrix")

    @property
    def n(self) -> int:
        return len(self.node_ids)

    @classmethod
    def from_entries(cls, node_ids: Sequence[str], entries: Mapping[tuple[str, str], float]) -> "ScoreMatrix":
        index = {nid: i for i, nid in enumerate(node_ids)}
        s = np.zeros((len(node_ids), len(node_ids)))
        for (rater, ratee), value in entries.items():
            if rater in index and ratee in index:
                s[index[rater], index[ratee]] = value
        return cls(list(node_ids), s)


@dataclass(frozen=True)
class EigenTrustParams:
    a: float = 0.15
    epsilon: float = 1e-6
    max_iters: int = 1000

    def __post_init__(self):
        if not 0.0 <= self.a <= 1.0:
            raise ValueError("damping weight a must lie in [0, 1]")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")


@dataclass
class TrustVector:
    t: np.ndarray
    p: np.ndarray
    iterations: int = 0
    delta: float = 0.0


@dataclass(frozen=True)
class GravityScore:
    node_id: str
    score: float


def uniform_pre_trust(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def normalize_matrix(matrix: ScoreMatrix | np.ndarray, pre_trust: np.ndarray) -> np.ndarray:
    """Row-normalise clamped local trust; all-nonpositive rows fall back to ``pre_trust``."""
    s = matrix.s if isinstance(matrix, ScoreMatrix) else np.asarray(matrix, dtype=float)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError("score matrix must be square")
    if not np.all(np.isfinite(s)):
        raise ValueError("score matrix contains non-finite entries")
    p = np.asarray(pre_trust, dtype=float)
    if p.shape != (s.shape[0],) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("pre-trust vector must have n entries summing to 1")

    clamped = np.maximum(s, 0.0)
    np.fill_diagonal(clamped, 0.0)
    row_sums = clamped.sum(axis=1)
    c = np.empty_like(clamped)
    live = row_sums > 0
    c[live] = clamped[live] / row_sums[live, None]
    c[~live] = p
    return c


def eigentrust(c: np.ndarray, params: EigenTrustParams, p: np.ndarray) -> TrustVector:
    """Damped power iteration ``t <- (1-a) C^T t + a p`` from ``t = p``."""
    c = np.asarray(c, dtype=float)
    p = np.asarray(p, dtype=float)
    ct = c.T
    t = p.copy()
    delta = math.inf
    for k in range(1, params.max_iters + 1):
        nxt = (1.0 - params.a) * (ct @ t) + params.a * p
        delta = float(np.linalg.norm(nxt - t))
        t = nxt
        if delta < params.epsilon:
            # Renormalise away accumulated rounding; the exact iterate sums to 1.
            return TrustVector(t=t / t.sum(), p=p, iterations=k, delta=delta)
    raise NonConvergence(t, delta, params.max_iters)


def to_gravity_scores(trust: TrustVector | np.ndarray, node_ids: Sequence[str]) -> list[GravityScore]:
    t = trust.t if isinstance(trust, TrustVector) else np.asarray(trust, dtype=float)
    top = float(t.max()) if len(t) else 0.0
    if top <= 0.0:
        raise ValueError("trust vector is all zero")
    scores = []
    for nid, ti in zip(node_ids, t):
        score = 100.0 if ti == top else min(100.0, max(0.0, 100.0 * float(ti) / top))
        scores.append(GravityScore(nid, score))
    return scores


def compute_scores(matrix: ScoreMatrix, params: EigenTrustParams) -> list[GravityScore]:
    p = uniform_pre_trust(matrix.n)
    c = normalize_matrix(matrix, p)
    return to_gravity_scores(eigentrust(c, params, p), matrix.node_ids)


# -- scoring policy ----------------------------------------------------------


class Observation(enum.Enum):
    DIVERGENCE = "divergence"
    STOPPED_PROCESSING = "stopped_processing"
    UNRESPONSIVE = "unresponsive"
    FRAUD = "fraud"
    MISSED_ROUND = "missed_round"
    RESPONSIVE = "responsive"
    STABLE_EPOCH = "stable_epoch"


ZEROING = frozenset(
    {Observation.DIVERGENCE, Observation.STOPPED_PROCESSING, Observation.UNRESPONSIVE, Observation.FRAUD}
)


class Mode(enum.Enum):
    AUTOMATIC = "automatic"
    MANUAL = "manual"


@dataclass
class PairState:
    value: float = 0.0
    mode: Mode = Mode.AUTOMATIC
    missed: int = 0
    flagged: bool = False
    stable_epochs: int = 0


@dataclass
class ScoringPolicy:
    """Local trust entries keyed by (rater, ratee).

    Zeroing events set the entry to 0 at once.  A stable epoch adds
    ``build_up_step`` up to ``build_up_cap`` unless the rater flagged the ratee
    during that epoch.  ``unresponsive_after`` consecutive missed rounds count as
    unresponsiveness.  Once a pair is manual, automatic events are ignored.
    """

    build_up_step: float = 1.0
    build_up_cap: float = 10.0
    unresponsive_after: int = 3
    pairs: dict[tuple[str, str], PairState] = field(default_factory=dict)

    def state(self, rater: str, ratee: str) -> PairState:
        key = (rater, ratee)
        if key not in self.pairs:
            self.pairs[key] = PairState()
        return self.pairs[key]

    def value(self, rater: str, ratee: str) -> float:
        st = self.pairs.get((rater, ratee))
        return st.value if st else 0.0

    def mode(self, rater: str, ratee: str) -> Mode:
        st = self.pairs.get((rater, ratee))
        return st.mode if st else Mode.AUTOMATIC

    def seed(self, rater: str, ratee: str, value: float) -> None:
        """Set an automatic-mode starting value (genesis trust)."""
        st = self.state(rater, ratee)
        st.value = float(value)

    def apply_automatic_policy(
        self, rater: str, observations: Iterable[tuple[str, Observation]]
    ) -> dict[str, float]:
        """Apply ``rater``'s observations; return the entries whose value changed."""
        changed: dict[str, float] = {}
        for ratee, obs in observations:
            if ratee == rater:
                continue
            st = self.state(rater, ratee)
            if st.mode is Mode.MANUAL:
                continue
            before = st.value
            if obs is Observation.MISSED_ROUND:
                st.missed += 1
                if st.missed >= self.unresponsive_after:
                    obs = Observation.UNRESPONSIVE
            if obs in ZEROING:
                st.value = 0.0
                st.flagged = True
                st.stable_epochs = 0
            elif obs is Observation.RESPONSIVE:
                st.missed = 0
            elif obs is Observation.STABLE_EPOCH:
                if st.flagged:
                    st.flagged = False
                else:
                    st.stable_epochs += 1
                    st.value = min(self.build_up_cap, st.value + self.build_up_step)
            if st.value != before:
                changed[ratee] = st.value
        return changed

    def apply_manual_score(self, rater: str, ratee: str, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("manual score must be finite")
        st = self.state(rater, ratee)
        st.value = float(value)
        st.mode = Mode.MANUAL
        return st.value


# -- plain-text table --------------------------------------------------------


def export_matrix(matrix: ScoreMatrix) -> str:
    lines = []
    for nid, row in zip(matrix.node_ids, matrix.s):
        lines.append(" ".join([nid] + [repr(float(x)) for x in row]))
    return "\n".join(lines) + "\n"


def import_matrix(text: str) -> ScoreMatrix:
    node_ids: list[str] = []
    rows: list[list[float]] = []
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        node_ids.append(parts[0])
        rows.append([float(x) for x in parts[1:]])
    if any(len(r) != len(node_ids) for r in rows):
        raise ValueError("score table is not square")
    return ScoreMatrix(node_ids, np.array(rows, dtype=float).reshape(len(node_ids), len(node_ids)))
