from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from gravity_oracle.extractor import (
    Extractor,
    ExtractorError,
    FeedRegistry,
    FeedSpec,
    MockSource,
    Params,
    SourceFault,
    SourceRef,
    UnknownFeed,
    bind_extractor,
    extract,
    merge,
    to_raw,
    transform,
)


def spec(*refs, merge_rule="median", decimals=2, output="int"):
    return FeedSpec("btc", tuple(refs), merge_rule, decimals, "median", output)


def test_median_of_three_scaled():
    s = spec(SourceRef("a"), SourceRef("b"), SourceRef("c"))
    sources = {k: MockSource(k, {0: to_raw(v)}) for k, v in (("a", "100.10"), ("b", "100.30"), ("c", "100.20"))}
    assert extract(s, Params(5, "btc"), sources).value == 10020


def test_even_median_is_midpoint():
    assert merge([Fraction(1), Fraction(2)], "median") == Fraction(3, 2)


def test_average_is_exact():
    assert merge([Fraction(1), Fraction(2), Fraction(2)], "average") == Fraction(5, 3)


def test_mode_tie_goes_to_smallest():
    assert merge([Fraction(3), Fraction(1), Fraction(3), Fraction(1)], "mode") == 1


def test_floor_transform():
    s = spec(SourceRef("a"), decimals=1)
    assert transform(Fraction("2.99"), s) == 29
    assert transform(Fraction("-0.01"), s) == -1


def test_string_feed():
    s = spec(SourceRef("a"), merge_rule="mode", output="str")
    assert extract(s, Params(0, "btc"), {"a": MockSource("a", {0: "rain"})}).value == "rain"


def test_silent_mandatory_source_fails():
    s = spec(SourceRef("a"), SourceRef("b", mandatory=False))
    a = MockSource("a", {0: Fraction(5)}, faults={3: SourceFault("silent")})
    b = MockSource("b", {0: Fraction(6)})
    with pytest.raises(ExtractorError):
        extract(s, Params(3, "btc"), {"a": a, "b": b})


def test_silent_recommended_source_is_skipped():
    s = spec(SourceRef("a"), SourceRef("b", mandatory=False), decimals=0)
    a = MockSource("a", {0: Fraction(5)})
    b = MockSource("b", {0: Fraction(100)}, faults={3: SourceFault("silent")})
    assert extract(s, Params(3, "btc"), {"a": a, "b": b}).value == 5


def test_source_faults():
    src = MockSource("a", {0: Fraction(1), 4: Fraction(2)}, faults={4: SourceFault("delayed"), 6: SourceFault("wrong_value", Fraction(9))})
    assert src.read(4) == 1
    assert src.read(5) == 2
    assert src.read(6) == 9


def test_walk_is_seeded():
    a = MockSource("a", walk=(Fraction(100), Fraction(1), 42))
    b = MockSource("a", walk=(Fraction(100), Fraction(1), 42))
    seq = [a.read(t) for t in range(20)]
    assert seq == [b.read(t) for t in range(20)]
    assert all(abs(x - y) == 1 for x, y in zip(seq, seq[1:]))


def test_feed_needs_mandatory_source():
    with pytest.raises(ValueError):
        spec(SourceRef("a", mandatory=False))


def test_extractor_rejects_foreign_sources():
    with pytest.raises(ValueError):
        Extractor(spec(SourceRef("a")), ("zzz",))


def test_registry_and_binding():
    class Dummy:
        extractors = {}

    reg = FeedRegistry([spec(SourceRef("a"))])
    impl = Extractor(reg["btc"], ("a",))
    node = Dummy()
    bind_extractor(node, "btc", impl, reg)
    assert node.extractors["btc"] is impl
    with pytest.raises(UnknownFeed):
        reg["nope"]


@given(st.lists(st.integers(-10**6, 10**6), min_size=1, max_size=9))
def test_median_within_range(xs):
    m = merge([Fraction(x) for x in xs], "median")
    assert min(xs) <= m <= max(xs)
