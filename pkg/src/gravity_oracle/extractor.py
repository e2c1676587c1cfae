"""Feed specifications and extractors over scripted mock sources.

Raw points are kept as exact fractions until the final ``floor(x * 10**k)``
so results do not depend on float rounding.
"""

from __future__ import annotations

import math
import random
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Optional, Sequence, Union

RawValue = Union[Fraction, str]

MERGE_RULES = ("median", "average", "mode")


class ExtractorError(RuntimeError):
    pass


class UnknownFeed(KeyError):
    pass


@dataclass(frozen=True)
class SourceRef:
    source_id: str
    mandatory: bool = True


@dataclass(frozen=True)
class FeedSpec:
    feed_id: str
    sources: tuple[SourceRef, ...]
    merge_rule: str = "median"
    decimals: int = 0
    aggregation: str = "median"
    output: str = "int"

    def __post_init__(self):
        if not any(s.mandatory for s in self.sources):
            raise ValueError(f"feed {self.feed_id!r} needs at least one mandatory source")
        if self.decimals < 0:
            raise ValueError("scaling exponent must be non-negative")
        if self.merge_rule not in MERGE_RULES or self.aggregation not in MERGE_RULES:
            raise ValueError(f"unknown merge/aggregation rule for feed {self.feed_id!r}")
        if self.output not in ("int", "str"):
            raise ValueError("output must be 'int' or 'str'")

    def source(self, source_id: str) -> SourceRef:
        for s in self.sources:
            if s.source_id == source_id:
                return s
        raise KeyError(source_id)


@dataclass(frozen=True)
class Params:
    tick: int
    feed_id: str


@dataclass(frozen=True)
class DataPoint:
    feed_id: str
    tick: int
    value: Union[int, str]


@dataclass(frozen=True)
class SourceFault:
    kind: str  # silent | wrong_value | delayed
    value: Optional[RawValue] = None


def to_raw(value) -> RawValue:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, bool):
        raise TypeError("boolean source value")
    if isinstance(value, (int, float)):
        return Fraction(str(value))
    if isinstance(value, str):
        try:
            return Fraction(value)
        except ValueError:
            return value
    raise TypeError(f"unsupported source value {value!r}")


@dataclass
class MockSource:
    """Scripted external data source.

    ``script`` maps ticks to values; between entries the latest earlier value
    holds.  ``walk`` (start, step, seed) generates a seeded ±step random walk
    instead.  ``faults`` maps ticks to per-tick misbehaviour.
    """

    source_id: str
    script: dict[int, RawValue] = field(default_factory=dict)
    walk: Optional[tuple[Fraction, Fraction, int]] = None
    faults: dict[int, SourceFault] = field(default_factory=dict)
    _walk_cache: list[Fraction] = field(default_factory=list, repr=False)

    def _walk_value(self, tick: int) -> Fraction:
        start, step, seed = self.walk
        if not self._walk_cache:
            self._walk_cache.append(start)
            self._rng = random.Random(seed)
        while len(self._walk_cache) <= tick:
            delta = step if self._rng.random() < 0.5 else -step
            self._walk_cache.append(self._walk_cache[-1] + delta)
        return self._walk_cache[tick]

    def clean_value(self, tick: int) -> Optional[RawValue]:
        if self.walk is not None:
            return self._walk_value(max(tick, 0))
        best = None
        for t in sorted(self.script):
            if t > tick:
                break
            best = self.script[t]
        return best

    def read(self, tick: int) -> Optional[RawValue]:
        """Value delivered at ``tick``; ``None`` means the source is silent."""
        fault = self.faults.get(tick)
        if fault is None:
            return self.clean_value(tick)
        if fault.kind == "silent":
            return None
        if fault.kind == "wrong_value":
            return fault.value
        if fault.kind == "delayed":
            return self.clean_value(tick - 1)
        raise ValueError(f"unknown source fault {fault.kind!r}")


def merge(points: Sequence[RawValue], rule: str) -> RawValue:
    if not points:
        raise ExtractorError("no data points to merge")
    if rule == "mode" or any(isinstance(p, str) for p in points):
        if rule != "mode" and len(set(points)) > 1:
            raise ExtractorError("string points can only be merged by mode")
        counts = Counter(points)
        best = max(counts.values())
        return min(v for v, c in counts.items() if c == best)
    ordered = sorted(points)
    if rule == "median":
        mid = len(ordered) // 2
        if len(ordered) % 2:
            return ordered[mid]
        return (ordered[mid - 1] + ordered[mid]) / 2
    if rule == "average":
        return sum(ordered, Fraction(0)) / len(ordered)
    raise ValueError(f"unknown merge rule {rule!r}")


def transform(value: RawValue, spec: FeedSpec) -> Union[int, str]:
    if spec.output == "str":
        return str(value)
    if isinstance(value, str):
        raise ExtractorError(f"feed {spec.feed_id!r} expects numeric data, got {value!r}")
    return math.floor(value * 10**spec.decimals)


@dataclass
class Extractor:
    """One node's implementation of a feed: which of the feed's sources it reads."""

    spec: FeedSpec
    source_ids: tuple[str, ...]

    def __post_init__(self):
        known = {s.source_id for s in self.spec.sources}
        unknown = set(self.source_ids) - known
        if unknown:
            raise ValueError(f"sources {sorted(unknown)} are not part of feed {self.spec.feed_id!r}")
        if not self.source_ids:
            raise ValueError("an extractor needs at least one source")

    def extract(self, params: Params, sources: Mapping[str, MockSource]) -> DataPoint:
        points = []
        for sid in self.source_ids:
            value = sources[sid].read(params.tick)
            if value is None:
                if self.spec.source(sid).mandatory:
                    raise ExtractorError(f"mandatory source {sid!r} silent at tick {params.tick}")
                continue
            points.append(value)
        merged = merge(points, self.spec.merge_rule)
        return DataPoint(self.spec.feed_id, params.tick, transform(merged, self.spec))


def extract(spec: FeedSpec, params: Params, sources: Mapping[str, MockSource]) -> DataPoint:
    """Extract using every source the feed spec lists."""
    return Extractor(spec, tuple(s.source_id for s in spec.sources)).extract(params, sources)


class FeedRegistry:
    def __init__(self, feeds: Sequence[FeedSpec] = ()):
        self.feeds: dict[str, FeedSpec] = {f.feed_id: f for f in feeds}

    def add(self, spec: FeedSpec) -> None:
        self.feeds[spec.feed_id] = spec

    def __getitem__(self, feed_id: str) -> FeedSpec:
        try:
            return self.feeds[feed_id]
        except KeyError:
            raise UnknownFeed(feed_id) from None

    def __contains__(self, feed_id: str) -> bool:
        return feed_id in self.feeds


def bind_extractor(node, feed_id: str, impl: Extractor, registry: FeedRegistry) -> Extractor:
    """Attach ``impl`` to ``node`` for ``feed_id``; a later binding replaces an earlier one."""
    spec = registry[feed_id]
    if impl.spec.feed_id != spec.feed_id:
        raise ValueError("extractor was built for a different feed")
    node.extractors[feed_id] = impl
    return impl
