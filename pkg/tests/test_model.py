"""Core model: latency arithmetic, the default model, trace file round trips."""

import io

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mchammer.model import (
    LATENCY_CLASSES,
    TRACE_HEADER,
    U64_MASK,
    ClassStats,
    ProbeConfig,
    Sample,
    Trace,
    TraceParseError,
    default_latency_model,
    latency,
    parse_model_overrides,
    read_trace,
    write_trace,
)

META = {"probe": "mc_hammer", "target": "victim_0"}


def test_latency_direct_subtraction():
    assert latency(Sample(0, 100, 250)) == 150


def test_latency_identity():
    assert latency(Sample(0, 12345, 12345)) == 0


def test_latency_wraparound():
    # counter wraps past 2^64: (5 - (2^64 - 10)) mod 2^64 = 15
    assert latency(Sample(0, 2**64 - 10, 5)) == 15


u64 = st.integers(min_value=0, max_value=U64_MASK)


@settings(max_examples=200, deadline=None)
@given(start=u64, end=u64, shift=u64)
def test_latency_translation_invariant(start, end, shift):
    base = latency(Sample(0, start, end))
    shifted = latency(Sample(0, (start + shift) & U64_MASK, (end + shift) & U64_MASK))
    assert base == shifted


def test_default_model_reference_statistics():
    m = default_latency_model()
    assert (m.fr_hit.mean, m.fr_hit.std, m.fr_hit.median) == (82.14, 30.48, 78.0)
    assert (m.fr_miss.mean, m.fr_miss.std, m.fr_miss.median) == (250.80, 92.12, 228.0)
    assert (m.mc_active.mean, m.mc_active.std, m.mc_active.median) == (311.35, 120.67, 306.0)
    assert (m.mc_inactive.mean, m.mc_inactive.std, m.mc_inactive.median) == (149.63, 7.48, 149.0)
    for cls in LATENCY_CLASSES:
        assert m.stats(cls).floor == 30.0


def test_default_model_orderings():
    m = default_latency_model()
    for cls in LATENCY_CLASSES:
        s = m.stats(cls)
        assert s.mean >= s.median >= s.floor > 0
    assert m.mc_active.median - m.mc_inactive.median > 100
    assert m.fr_miss.median - m.fr_hit.median > 100


def test_class_stats_rejects_bad_ordering():
    with pytest.raises(ValueError):
        ClassStats(mean=50.0, std=1.0, median=60.0, floor=30.0)
    with pytest.raises(ValueError):
        ClassStats(mean=50.0, std=1.0, median=40.0, floor=0.0)


def test_zero_noise_model_collapses_to_medians():
    z = default_latency_model().zero_noise()
    for cls in LATENCY_CLASSES:
        s = z.stats(cls)
        assert s.std == 0.0
        assert s.mean == s.median == default_latency_model().stats(cls).median


def test_model_overrides():
    m = parse_model_overrides("fr_hit.median=80\n# comment\n\nmc_active.std=100.5\n")
    assert m.fr_hit.median == 80.0
    assert m.mc_active.std == 100.5
    assert m.fr_miss.mean == 250.80  # untouched


def test_model_overrides_rejects_garbage():
    with pytest.raises(ValueError):
        parse_model_overrides("fr_hit.midean=80")
    with pytest.raises(ValueError):
        parse_model_overrides("nonsense")


def test_probe_config_validation():
    with pytest.raises(ValueError):
        ProbeConfig(kind="prime_probe", num_samples=4)
    with pytest.raises(ValueError):
        ProbeConfig(kind="flush_reload", num_samples=4, wait_cycles=0)
    ProbeConfig(kind="mc_hammer", num_samples=0)  # zero samples allowed


def test_trace_requires_probe_and_target():
    with pytest.raises(ValueError):
        Trace(samples=[], meta={"probe": "mc_hammer"})
    with pytest.raises(ValueError):
        Trace(samples=[], meta={"probe": "prime_probe", "target": "x"})


def test_trace_rejects_non_contiguous_indices():
    with pytest.raises(ValueError):
        Trace(samples=[Sample(0, 1, 2), Sample(2, 3, 4)], meta=dict(META))


def test_trace_rejects_decreasing_start():
    with pytest.raises(ValueError):
        Trace(samples=[Sample(0, 100, 110), Sample(1, 90, 95)], meta=dict(META))


def test_empty_trace_round_trip():
    t = Trace(samples=[], meta=dict(META))
    buf = io.StringIO()
    write_trace(t, buf)
    back = read_trace(io.StringIO(buf.getvalue()))
    assert back.samples == t.samples
    assert back.meta == t.meta


def test_three_sample_round_trip_bit_exact():
    t = Trace(
        samples=[Sample(0, 10, 316), Sample(1, 376, 525), Sample(2, 585, 900)],
        meta={"probe": "simulated_mc", "target": "victim_0", "seed": "7"},
    )
    buf = io.StringIO()
    write_trace(t, buf)
    first = buf.getvalue()
    back = read_trace(io.StringIO(first))
    assert back.samples == t.samples
    assert back.meta == t.meta
    buf2 = io.StringIO()
    write_trace(back, buf2)
    assert buf2.getvalue() == first


@settings(max_examples=50, deadline=None)
@given(
    rows=st.lists(
        st.tuples(u64, st.integers(min_value=0, max_value=10**6)), max_size=30
    )
)
def test_round_trip_property(rows):
    start = 0
    samples = []
    for i, (gap, dur) in enumerate(rows):
        start += gap % 1000
        samples.append(Sample(i, start, (start + dur) & U64_MASK))
    t = Trace(samples=samples, meta=dict(META))
    buf = io.StringIO()
    write_trace(t, buf)
    back = read_trace(io.StringIO(buf.getvalue()))
    assert back.samples == t.samples and back.meta == t.meta


def test_missing_version_header():
    with pytest.raises(TraceParseError) as err:
        read_trace(io.StringIO("0,1,2\n"))
    assert "line 1" in str(err.value)


def test_unknown_version_rejected():
    with pytest.raises(TraceParseError):
        read_trace(io.StringIO("# mchammer-trace v9\n0,1,2\n"))


def test_unknown_metadata_keys_accepted():
    text = f"{TRACE_HEADER}\n# probe=mc_hammer\n# target=x\n# exotic_key=whatever\n0,1,2\n"
    t = read_trace(io.StringIO(text))
    assert t.meta["exotic_key"] == "whatever"


def test_non_monotone_index_names_line():
    text = f"{TRACE_HEADER}\n# probe=mc_hammer\n# target=x\n0,1,2\n2,3,4\n"
    with pytest.raises(TraceParseError) as err:
        read_trace(io.StringIO(text))
    assert "line 5" in str(err.value)


def test_truncated_row_names_line():
    text = f"{TRACE_HEADER}\n# probe=mc_hammer\n# target=x\n0,1\n"
    with pytest.raises(TraceParseError) as err:
        read_trace(io.StringIO(text))
    assert "line 4" in str(err.value)


def test_non_integer_row_rejected():
    text = f"{TRACE_HEADER}\n# probe=mc_hammer\n# target=x\n0,1,abc\n"
    with pytest.raises(TraceParseError):
        read_trace(io.StringIO(text))


def test_write_rejects_bad_meta_key():
    t = Trace(samples=[], meta={"probe": "mc_hammer", "target": "x", "BadKey": "1"})
    with pytest.raises(ValueError):
        write_trace(t, io.StringIO())


def test_file_round_trip(tmp_path):
    t = Trace(samples=[Sample(0, 5, 10)], meta=dict(META))
    path = tmp_path / "t.trace"
    write_trace(t, path)
    assert read_trace(path).samples == t.samples
