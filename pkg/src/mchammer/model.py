"""Shared vocabulary for probe traces and timing models.

A trace is an ordered list of (tsc_start, tsc_end) cycle-counter pairs
captured by one probe run, plus free-form key/value metadata.  Raw counter
pairs are stored instead of precomputed latencies so temporal gaps and
preemptions remain visible to downstream analysis.

The on-disk format is line-oriented UTF-8 text:

    # mchammer-trace v1
    # key=value            (one metadata entry per line, keys match [a-z_]+)
    index,tsc_start,tsc_end

Readers reject unknown version strings and accept unknown metadata keys.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, NamedTuple, Union

import numpy as np

U64_MASK = (1 << 64) - 1

TRACE_FORMAT_VERSION = "v1"
TRACE_HEADER = f"# mchammer-trace {TRACE_FORMAT_VERSION}"

PROBE_FLUSH_RELOAD = "flush_reload"
PROBE_MC_HAMMER = "mc_hammer"
PROBE_SIM_FR = "simulated_fr"
PROBE_SIM_MC = "simulated_mc"
PROBE_KINDS = (PROBE_FLUSH_RELOAD, PROBE_MC_HAMMER, PROBE_SIM_FR, PROBE_SIM_MC)

_META_KEY_RE = re.compile(r"^[a-z_]+$")


class TraceParseError(ValueError):
    """Raised for malformed trace files; carries the offending line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class Sample(NamedTuple):
    """One probe measurement: raw start/end cycle counters, 0-based index."""

    index: int
    tsc_start: int
    tsc_end: int


def latency(sample: Sample) -> int:
    """Cycle latency of a sample, safe against 64-bit counter wraparound."""
    return (sample.tsc_end - sample.tsc_start) & U64_MASK


@dataclass
class Trace:
    """An ordered sequence of samples from one probe run.

    Invariants (checked at construction): sample indices are contiguous
    from 0, tsc_start is non-decreasing, and metadata carries at least a
    valid ``probe`` kind and a ``target`` label.
    """

    samples: list[Sample]
    meta: dict[str, str]

    def __post_init__(self):
        probe = self.meta.get("probe")
        if probe not in PROBE_KINDS:
            raise ValueError(f"meta 'probe' must be one of {PROBE_KINDS}, got {probe!r}")
        if "target" not in self.meta:
            raise ValueError("meta must contain a 'target' label")
        prev_start = -1
        for pos, sample in enumerate(self.samples):
            if sample.index != pos:
                raise ValueError(
                    f"sample indices must be contiguous from 0; "
                    f"position {pos} holds index {sample.index}"
                )
            if not (0 <= sample.tsc_start <= U64_MASK and 0 <= sample.tsc_end <= U64_MASK):
                raise ValueError(f"sample {pos}: counters must be unsigned 64-bit")
            if sample.tsc_start < prev_start:
                raise ValueError(f"sample {pos}: tsc_start decreased")
            prev_start = sample.tsc_start

    def __len__(self) -> int:
        return len(self.samples)

    def latencies(self) -> np.ndarray:
        """Per-sample latencies as an int64 array."""
        return np.array([latency(s) for s in self.samples], dtype=np.int64)


@dataclass
class ClassStats:
    """Latency summary statistics for one probe outcome class.

    ``floor`` is the minimum latency the model will ever emit; timing
    distributions are right-skewed, so mean >= median >= floor > 0.
    """

    mean: float
    std: float
    median: float
    floor: float

    def __post_init__(self):
        if not (self.mean >= self.median >= self.floor > 0):
            raise ValueError(
                f"require mean >= median >= floor > 0, got "
                f"({self.mean}, {self.median}, {self.floor})"
            )
        if self.std < 0:
            raise ValueError("std must be non-negative")


LATENCY_CLASSES = ("fr_hit", "fr_miss", "mc_active", "mc_inactive")

# Minimum emitted latency for every class.  Chosen safely below the smallest
# class median (78) so a fitted distribution cannot produce non-physical
# values.
DEFAULT_FLOOR = 30.0


@dataclass
class LatencyModel:
    """Per-class latency distribution parameters for the four probe outcomes."""

    fr_hit: ClassStats
    fr_miss: ClassStats
    mc_active: ClassStats
    mc_inactive: ClassStats

    def stats(self, cls: str) -> ClassStats:
        if cls not in LATENCY_CLASSES:
            raise ValueError(f"unknown latency class {cls!r}")
        return getattr(self, cls)

    def mc_cut(self) -> float:
        """Midpoint between the inactive and active flush-latency medians."""
        return (self.mc_inactive.median + self.mc_active.median) / 2.0

    def fr_cut(self) -> float:
        """Midpoint between the hit and miss reload-latency medians."""
        return (self.fr_hit.median + self.fr_miss.median) / 2.0

    def zero_noise(self) -> "LatencyModel":
        """Degenerate copy emitting each class median exactly (std = 0)."""

        def collapse(c: ClassStats) -> ClassStats:
            return ClassStats(c.median, 0.0, c.median, min(c.floor, c.median))

        return LatencyModel(
            fr_hit=collapse(self.fr_hit),
            fr_miss=collapse(self.fr_miss),
            mc_active=collapse(self.mc_active),
            mc_inactive=collapse(self.mc_inactive),
        )


def default_latency_model() -> LatencyModel:
    """Reference calibration measured on an Intel Core i5-7500T (Kaby Lake).

    fr_hit / fr_miss are reload latencies with the victim resident / absent;
    mc_active / mc_inactive are flush latencies with and without an induced
    machine clear.
    """
    return LatencyModel(
        fr_hit=ClassStats(mean=82.14, std=30.48, median=78.0, floor=DEFAULT_FLOOR),
        fr_miss=ClassStats(mean=250.80, std=92.12, median=228.0, floor=DEFAULT_FLOOR),
        mc_active=ClassStats(mean=311.35, std=120.67, median=306.0, floor=DEFAULT_FLOOR),
        mc_inactive=ClassStats(mean=149.63, std=7.48, median=149.0, floor=DEFAULT_FLOOR),
    )


def parse_model_overrides(text: str, base: LatencyModel | None = None) -> LatencyModel:
    """Build a LatencyModel from ``class.field=value`` lines over a base model.

    Blank lines and lines starting with '#' are ignored.
    """
    base = base if base is not None else default_latency_model()
    values = {cls: vars(base.stats(cls)).copy() for cls in LATENCY_CLASSES}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        m = re.match(r"^([a-z_]+)\.(mean|std|median|floor)\s*=\s*([0-9.eE+-]+)$", line)
        if m is None:
            raise ValueError(f"model override line {lineno}: cannot parse {raw!r}")
        cls, fld, val = m.group(1), m.group(2), m.group(3)
        if cls not in LATENCY_CLASSES:
            raise ValueError(f"model override line {lineno}: unknown class {cls!r}")
        values[cls][fld] = float(val)
    return LatencyModel(**{cls: ClassStats(**values[cls]) for cls in LATENCY_CLASSES})


@dataclass
class ProbeConfig:
    """Attacker probe parameters.

    ``wait_cycles`` only applies to flush_reload (the victim window between
    flush and reload); mc_hammer samples back-to-back.  ``hit_threshold`` is
    the reload-latency cut separating hits from misses and must lie strictly
    between the hit and miss medians of the latency model in use.
    """

    kind: str
    num_samples: int
    wait_cycles: int = 1000
    hit_threshold: float = 150.0

    def __post_init__(self):
        if self.kind not in (PROBE_FLUSH_RELOAD, PROBE_MC_HAMMER):
            raise ValueError(f"probe kind must be flush_reload or mc_hammer, got {self.kind!r}")
        if self.num_samples < 0:
            raise ValueError("num_samples must be >= 0")
        if self.kind == PROBE_FLUSH_RELOAD and self.wait_cycles <= 0:
            raise ValueError("wait_cycles must be > 0 for flush_reload")


def write_trace(trace: Trace, sink: Union[str, Path, IO[str]]) -> None:
    """Serialize a trace to the versioned line-oriented text format."""
    if isinstance(sink, (str, Path)):
        with open(sink, "w", encoding="utf-8", newline="\n") as fh:
            write_trace(trace, fh)
        return
    sink.write(TRACE_HEADER + "\n")
    for key, value in trace.meta.items():
        if not _META_KEY_RE.match(key):
            raise ValueError(f"metadata key {key!r} must match [a-z_]+")
        value = str(value)
        if "\n" in value:
            raise ValueError(f"metadata value for {key!r} must not contain newlines")
        sink.write(f"# {key}={value}\n")
    for sample in trace.samples:
        sink.write(f"{sample.index},{sample.tsc_start},{sample.tsc_end}\n")


def read_trace(source: Union[str, Path, IO[str]]) -> Trace:
    """Parse a trace file, rejecting unknown versions and malformed rows."""
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as fh:
            return read_trace(fh)
    lines = source.read().splitlines()
    if not lines:
        raise TraceParseError(1, "empty file, expected version header")
    if lines[0] != TRACE_HEADER:
        raise TraceParseError(1, f"expected {TRACE_HEADER!r}, got {lines[0]!r}")

    meta: dict[str, str] = {}
    samples: list[Sample] = []
    expect_index = 0
    in_header = True
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            raise TraceParseError(lineno, "blank line not allowed")
        if line.startswith("#"):
            if not in_header:
                raise TraceParseError(lineno, "metadata after sample rows")
            body = line[1:].strip()
            if "=" not in body:
                raise TraceParseError(lineno, f"malformed metadata line {line!r}")
            key, _, value = body.partition("=")
            if not _META_KEY_RE.match(key):
                raise TraceParseError(lineno, f"metadata key {key!r} must match [a-z_]+")
            meta[key] = value
            continue
        in_header = False
        parts = line.split(",")
        if len(parts) != 3:
            raise TraceParseError(lineno, f"expected 3 comma-separated fields, got {len(parts)}")
        try:
            idx, start, end = (int(p) for p in parts)
        except ValueError:
            raise TraceParseError(lineno, f"non-integer field in {line!r}") from None
        if idx != expect_index:
            raise TraceParseError(lineno, f"non-monotone index {idx}, expected {expect_index}")
        if not (0 <= start <= U64_MASK and 0 <= end <= U64_MASK):
            raise TraceParseError(lineno, "counter out of unsigned 64-bit range")
        samples.append(Sample(idx, start, end))
        expect_index += 1

    try:
        return Trace(samples=samples, meta=meta)
    except ValueError as exc:
        raise TraceParseError(len(lines), str(exc)) from None


def trace_from_arrays(
    tsc_start: Iterable[int], tsc_end: Iterable[int], meta: dict[str, str]
) -> Trace:
    """Build a trace from parallel counter sequences."""
    samples = [Sample(i, int(s), int(e)) for i, (s, e) in enumerate(zip(tsc_start, tsc_end))]
    return Trace(samples=samples, meta=meta)
