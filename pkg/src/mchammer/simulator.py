"""Deterministic victim/probe co-simulation on a shared cycle clock.

The victim executes loop iterations inside one of two code regions; the
probe repeatedly flushes a line inside one region.  A flush landing while
the victim executes the probed region triggers a machine clear that stalls
the victim, and it evicts the line so the victim's next pass through the
region pays a miss.  The probe observes either flush latencies (mc_hammer,
back-to-back) or reload latencies (flush_reload, after a waiting period),
drawn from the per-class latency model.

Everything is derived from the config's seed: identical configs produce
bit-identical traces and schedules.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Union

import numpy as np
from scipy import optimize, stats

from .model import (
    LATENCY_CLASSES,
    PROBE_FLUSH_RELOAD,
    PROBE_MC_HAMMER,
    PROBE_SIM_FR,
    PROBE_SIM_MC,
    ClassStats,
    LatencyModel,
    ProbeConfig,
    Sample,
    Trace,
    default_latency_model,
)

REGION_0 = "victim_0"
REGION_1 = "victim_1"
REGIONS = (REGION_0, REGION_1)

EXPERIENCED_NONE = "none"
EXPERIENCED_MISS = "miss"
EXPERIENCED_CLEAR = "machine_clear"

ACTIVE = "active"
INACTIVE = "inactive"

# Default victim cost constants (cycles).  Calibrated together with the
# 60-cycle probe overhead so the 2x2^10-iteration reference scenarios land
# on the expected active spans (~90/180 for flush_reload at a 1000-cycle
# wait, ~1100/2200 for mc_hammer) and on hammering POI counts just above
# the 2^10 iteration count at a 0.2 threshold.
DEFAULT_ITER_BASE_COST = 40
DEFAULT_MISS_PENALTY = 100
DEFAULT_CLEAR_PENALTY = 280
DEFAULT_PROBE_OVERHEAD = 60

REFERENCE_ITERATIONS = 1 << 10


@dataclass
class VictimProgram:
    """Victim workload: ordered (region, iterations) segments plus costs."""

    segments: list[tuple[str, int]]
    iter_base_cost: int = DEFAULT_ITER_BASE_COST
    miss_penalty: int = DEFAULT_MISS_PENALTY
    clear_penalty: int = DEFAULT_CLEAR_PENALTY

    def __post_init__(self):
        if not self.segments:
            raise ValueError("victim program needs at least one segment")
        for region, iterations in self.segments:
            if region not in REGIONS:
                raise ValueError(f"segment region must be one of {REGIONS}, got {region!r}")
            if iterations <= 0:
                raise ValueError("segment iterations must be > 0")
        if min(self.iter_base_cost, self.miss_penalty, self.clear_penalty) <= 0:
            raise ValueError("victim cost constants must be > 0")

    def total_iterations(self) -> int:
        return sum(n for _, n in self.segments)


@dataclass
class SimConfig:
    """One simulation run: latency model, probe, target region and seed."""

    latency_model: LatencyModel
    probe: ProbeConfig
    probe_target: str = REGION_0
    probe_overhead: int = DEFAULT_PROBE_OVERHEAD
    rng_seed: int = 0
    repetitions: int = 1

    def __post_init__(self):
        if self.probe_target not in REGIONS:
            raise ValueError(f"probe_target must be one of {REGIONS}")
        if self.probe_overhead < 0:
            raise ValueError("probe_overhead must be >= 0")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.probe.kind == PROBE_FLUSH_RELOAD:
            lo = self.latency_model.fr_hit.median
            hi = self.latency_model.fr_miss.median
            if not (lo < self.probe.hit_threshold < hi):
                raise ValueError(
                    f"hit_threshold {self.probe.hit_threshold} must lie strictly "
                    f"between the hit ({lo}) and miss ({hi}) medians"
                )


@dataclass
class ScheduleEvent:
    """Ground truth for one victim iteration."""

    cycle: int
    region: str
    iteration: int
    experienced: str


@dataclass
class VictimSchedule:
    """Per-iteration ground truth channel for validating probe output.

    clear_count totals machine clears (one iteration can take several);
    miss_count totals iterations that paid the miss penalty.
    """

    events: list[ScheduleEvent]
    clear_count: int = 0
    miss_count: int = 0

    def __len__(self) -> int:
        return len(self.events)


def write_schedule_csv(schedule: VictimSchedule, sink: Union[str, Path, IO[str]]) -> None:
    if isinstance(sink, (str, Path)):
        with open(sink, "w", encoding="utf-8", newline="\n") as fh:
            write_schedule_csv(schedule, fh)
        return
    sink.write("cycle,region,iteration,experienced\n")
    for ev in schedule.events:
        sink.write(f"{ev.cycle},{ev.region},{ev.iteration},{ev.experienced}\n")


def read_schedule_csv(source: Union[str, Path, IO[str]]) -> VictimSchedule:
    """Rebuild a schedule from its debug CSV.

    The CSV carries one experienced-label per iteration; the recovered
    clear/miss counts are iteration-level (an iteration hit by several
    clears counts once), unlike the live totals from simulate().
    """
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as fh:
            return read_schedule_csv(fh)
    lines = source.read().splitlines()
    if not lines or lines[0] != "cycle,region,iteration,experienced":
        raise ValueError("bad schedule CSV header")
    events = []
    clears = misses = 0
    for line in lines[1:]:
        cycle, region, iteration, experienced = line.split(",")
        events.append(ScheduleEvent(int(cycle), region, int(iteration), experienced))
        clears += experienced == EXPERIENCED_CLEAR
        misses += experienced == EXPERIENCED_MISS
    return VictimSchedule(events=events, clear_count=clears, miss_count=misses)


class LatencySampler:
    """Draw integer latencies reproducing a class's (mean, std, median, floor).

    Timing distributions are right-skewed, so each class is fitted with a
    shifted gamma whose median, mean and variance match the stats; draws
    below the floor are rejected and redrawn.  A zero-std class collapses to
    its median, and a symmetric class (mean == median) falls back to a
    normal distribution.
    """

    _BATCH = 4096

    def __init__(self, model: LatencyModel, rng: np.random.Generator):
        self._rng = rng
        self._spec: dict[str, tuple] = {}
        self._buf: dict[str, np.ndarray] = {}
        self._pos: dict[str, int] = {}
        for cls in LATENCY_CLASSES:
            self._spec[cls] = self._fit(model.stats(cls))
            self._buf[cls] = np.empty(0, dtype=np.int64)
            self._pos[cls] = 0

    @staticmethod
    def _fit(cs: ClassStats) -> tuple:
        if cs.std == 0:
            return ("const", int(round(cs.median)))
        skew = cs.mean - cs.median
        if skew <= 0:
            return ("normal", cs.mean, cs.std, cs.floor)
        ratio = (cs.std / skew) ** 2

        def excess(k: float) -> float:
            return k / (k - stats.gamma.ppf(0.5, k)) ** 2 - ratio

        lo, hi = 0.51, 1e7
        if excess(lo) > 0:
            k = lo  # extremely skewed model: clamp to the most skewed fit
        else:
            k = optimize.brentq(excess, lo, hi, xtol=1e-9)
        gamma_median = stats.gamma.ppf(0.5, k)
        scale = skew / (k - gamma_median)
        shift = cs.median - scale * gamma_median
        return ("gamma", k, scale, shift, cs.floor)

    def _refill(self, cls: str, need: int) -> None:
        spec = self._spec[cls]
        size = max(need, self._BATCH)
        if spec[0] == "const":
            draws = np.full(size, spec[1], dtype=np.int64)
        else:
            if spec[0] == "normal":
                _, mean, std, floor = spec
                raw = self._rng.normal(mean, std, size)
            else:
                _, k, scale, shift, floor = spec
                raw = shift + self._rng.gamma(k, scale, size)
            draws = np.rint(raw).astype(np.int64)
            bad = draws < floor
            while bad.any():
                n_bad = int(bad.sum())
                if spec[0] == "normal":
                    raw = self._rng.normal(mean, std, n_bad)
                else:
                    raw = shift + self._rng.gamma(k, scale, n_bad)
                draws[bad] = np.rint(raw).astype(np.int64)
                bad = draws < floor
        self._buf[cls] = draws
        self._pos[cls] = 0

    def draw(self, cls: str) -> int:
        pos = self._pos[cls]
        buf = self._buf[cls]
        if pos >= len(buf):
            self._refill(cls, 1)
            pos = 0
            buf = self._buf[cls]
        self._pos[cls] = pos + 1
        return int(buf[pos])

    def draw_many(self, cls: str, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.int64)
        filled = 0
        while filled < n:
            pos = self._pos[cls]
            buf = self._buf[cls]
            if pos >= len(buf):
                self._refill(cls, n - filled)
                pos = 0
                buf = self._buf[cls]
            take = min(len(buf) - pos, n - filled)
            out[filled : filled + take] = buf[pos : pos + take]
            self._pos[cls] = pos + take
            filled += take
        return out


class _VictimWalker:
    """Advance the victim's iteration timeline under probe interference."""

    __slots__ = (
        "segments", "base", "miss", "clear", "probed", "record",
        "seg_idx", "it_in_seg", "global_idx", "cur_start", "cur_end",
        "cur_region", "cur_experienced", "flushed", "last_probed_start",
        "done", "end_time", "events", "clear_count", "miss_count",
    )

    def __init__(self, program: VictimProgram, probed_region: str, record: bool):
        self.segments = program.segments
        self.base = program.iter_base_cost
        self.miss = program.miss_penalty
        self.clear = program.clear_penalty
        self.probed = probed_region
        self.record = record
        self.seg_idx = 0
        self.it_in_seg = 0
        self.global_idx = 0
        self.flushed = False
        self.last_probed_start = -1
        self.done = False
        self.end_time = 0
        self.events: list[ScheduleEvent] = []
        self.clear_count = 0
        self.miss_count = 0
        self.cur_start = 0
        self._begin(0)

    def _begin(self, start: int) -> None:
        region, _ = self.segments[self.seg_idx]
        self.cur_region = region
        self.cur_start = start
        cost = self.base
        experienced = EXPERIENCED_NONE
        if region == self.probed:
            self.last_probed_start = start
            if self.flushed:
                cost += self.miss
                self.flushed = False
                experienced = EXPERIENCED_MISS
                self.miss_count += 1
        self.cur_end = start + cost
        self.cur_experienced = experienced

    def _finish(self) -> None:
        if self.record:
            self.events.append(
                ScheduleEvent(self.cur_start, self.cur_region, self.global_idx, self.cur_experienced)
            )
        self.global_idx += 1
        self.it_in_seg += 1
        if self.it_in_seg >= self.segments[self.seg_idx][1]:
            self.seg_idx += 1
            self.it_in_seg = 0
            if self.seg_idx >= len(self.segments):
                self.done = True
                self.end_time = self.cur_end
                return
        self._begin(self.cur_end)

    def advance_to(self, t: int) -> None:
        """Complete every iteration ending at or before cycle t."""
        while not self.done and self.cur_end <= t:
            self._finish()

    def on_flush(self, t: int) -> bool:
        """Apply a flush at cycle t; returns True if it induced a machine clear.

        Call only after advance_to(t).  The flush always evicts the probed
        line; it additionally clears the victim's pipeline when the victim is
        mid-iteration inside the probed region, stretching that iteration.
        """
        self.flushed = True
        if not self.done and self.cur_region == self.probed and self.cur_start <= t < self.cur_end:
            self.cur_end += self.clear
            self.cur_experienced = EXPERIENCED_CLEAR
            self.clear_count += 1
            return True
        return False

    def drain(self) -> None:
        while not self.done:
            self._finish()


def simulate(
    victim: VictimProgram,
    config: SimConfig,
    record_schedule: bool = True,
) -> tuple[Trace, VictimSchedule]:
    """Interleave one probe run with the victim on a shared cycle clock.

    mc_hammer emits back-to-back flush samples, active-class when the flush
    lands during victim execution of the probed region.  flush_reload flushes,
    skips the waiting period, and emits a timed reload, hit-class when the
    victim re-executed the probed line during the window.  Each sample
    advances the probe clock by its own latency plus the probe overhead.
    The trace ends after num_samples samples or when the victim finishes,
    whichever is later.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(config.rng_seed)))
    sampler = LatencySampler(config.latency_model, rng)
    walker = _VictimWalker(victim, config.probe_target, record_schedule)
    kind = config.probe.kind
    overhead = config.probe_overhead
    wait = config.probe.wait_cycles
    num_samples = config.probe.num_samples

    starts: list[int] = []
    ends: list[int] = []
    t = 0
    emitted = 0
    if kind == PROBE_MC_HAMMER:
        while emitted < num_samples or not walker.done:
            walker.advance_to(t)
            active = walker.on_flush(t)
            lat = sampler.draw("mc_active" if active else "mc_inactive")
            starts.append(t)
            ends.append(t + lat)
            t += lat + overhead
            emitted += 1
    else:
        while emitted < num_samples or not walker.done:
            walker.advance_to(t)
            walker.on_flush(t)
            reload_at = t + wait
            walker.advance_to(reload_at)
            hit = t <= walker.last_probed_start < reload_at
            lat = sampler.draw("fr_hit" if hit else "fr_miss")
            starts.append(reload_at)
            ends.append(reload_at + lat)
            t = reload_at + lat + overhead
            emitted += 1
    walker.drain()

    meta = {
        "probe": PROBE_SIM_MC if kind == PROBE_MC_HAMMER else PROBE_SIM_FR,
        "target": config.probe_target,
        "seed": str(config.rng_seed),
    }
    if kind == PROBE_FLUSH_RELOAD:
        meta["wait_cycles"] = str(wait)
    samples = [Sample(i, s, e) for i, (s, e) in enumerate(zip(starts, ends))]
    trace = Trace(samples=samples, meta=meta)
    schedule = VictimSchedule(
        events=walker.events,
        clear_count=walker.clear_count,
        miss_count=walker.miss_count,
    )
    return trace, schedule


def derive_rep_seed(master_seed: int, repetition: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=master_seed, spawn_key=(repetition,))


def run_repetitions(
    victim: VictimProgram,
    config: SimConfig,
    record_schedule: bool = False,
) -> list[tuple[Trace, VictimSchedule]]:
    """Run config.repetitions independent simulations.

    Per-repetition seeds derive deterministically from the master seed, so
    results do not depend on execution order.
    """
    runs = []
    for rep in range(config.repetitions):
        seed = int(derive_rep_seed(config.rng_seed, rep).generate_state(1)[0])
        rep_config = SimConfig(
            latency_model=config.latency_model,
            probe=config.probe,
            probe_target=config.probe_target,
            probe_overhead=config.probe_overhead,
            rng_seed=seed,
            repetitions=1,
        )
        runs.append(simulate(victim, rep_config, record_schedule=record_schedule))
    return runs


def latency_matrix(traces: Iterable[Trace]) -> np.ndarray:
    """Stack per-trace latencies row-wise, truncating to the shortest."""
    rows = [t.latencies() for t in traces]
    if not rows:
        raise ValueError("no traces given")
    width = min(len(r) for r in rows)
    return np.vstack([r[:width] for r in rows]).astype(np.float64)


@dataclass
class AveragedTrace:
    """Position-wise mean latency over repeated runs of one scenario."""

    values: np.ndarray
    num_traces: int
    truncated: bool

    def __len__(self) -> int:
        return len(self.values)


def average_traces(traces: list[Trace]) -> AveragedTrace:
    """Position-wise arithmetic mean of latencies, truncated to the shortest."""
    if not traces:
        raise ValueError("cannot average an empty list of traces")
    rows = [t.latencies() for t in traces]
    width = min(len(r) for r in rows)
    truncated = any(len(r) != width for r in rows)
    matrix = np.vstack([r[:width] for r in rows]).astype(np.float64)
    return AveragedTrace(values=matrix.mean(axis=0), num_traces=len(rows), truncated=truncated)


def write_averaged_csv(avg: AveragedTrace, sink: Union[str, Path, IO[str]]) -> None:
    if isinstance(sink, (str, Path)):
        with open(sink, "w", encoding="utf-8", newline="\n") as fh:
            write_averaged_csv(avg, fh)
        return
    sink.write("index,mean_latency\n")
    for i, v in enumerate(avg.values):
        sink.write(f"{i},{float(v)!r}\n")


def read_averaged_csv(source: Union[str, Path, IO[str]]) -> np.ndarray:
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as fh:
            return read_averaged_csv(fh)
    lines = source.read().splitlines()
    if not lines or lines[0] != "index,mean_latency":
        raise ValueError("bad averaged-trace CSV header")
    return np.array([float(line.split(",")[1]) for line in lines[1:]], dtype=np.float64)


def classify_sample(
    latency_value: float,
    probe_kind: str,
    model: LatencyModel,
    hit_threshold: float | None = None,
) -> str:
    """Label one latency as victim-active or inactive for the probe kind.

    mc_hammer: high flush latency (above the inactive/active midpoint) means
    a machine clear, i.e. the victim executed the probed line.  flush_reload:
    low reload latency (below the hit threshold) means the victim reloaded it.
    """
    if probe_kind in (PROBE_MC_HAMMER, PROBE_SIM_MC):
        return ACTIVE if latency_value > model.mc_cut() else INACTIVE
    if probe_kind in (PROBE_FLUSH_RELOAD, PROBE_SIM_FR):
        cut = model.fr_cut() if hit_threshold is None else hit_threshold
        return ACTIVE if latency_value < cut else INACTIVE
    raise ValueError(f"unknown probe kind {probe_kind!r}")


def active_span(values: np.ndarray, probe_kind: str, model: LatencyModel) -> int:
    """Count of active-class points in an averaged trace."""
    return sum(
        1 for v in values if classify_sample(float(v), probe_kind, model) == ACTIVE
    )


# Reference scenarios: the victim runs two segments of 2^10 iterations each;
# class 0/0 stays in the probed region for both, class 0/1 switches away for
# the second.  Sample budgets cover the full victim activity plus a quiet tail.
REFERENCE_SCENARIOS = ("fr-00", "fr-01", "mc-00", "mc-01")
_REFERENCE_NUM_SAMPLES = {PROBE_FLUSH_RELOAD: 256, PROBE_MC_HAMMER: 4096}


def reference_scenario(
    name: str,
    seed: int = 0,
    model: LatencyModel | None = None,
    repetitions: int = 1,
    num_samples: int | None = None,
) -> tuple[VictimProgram, SimConfig]:
    """Build the victim program and config for a named reference scenario."""
    if name not in REFERENCE_SCENARIOS:
        raise ValueError(f"unknown scenario {name!r}, expected one of {REFERENCE_SCENARIOS}")
    kind = PROBE_FLUSH_RELOAD if name.startswith("fr") else PROBE_MC_HAMMER
    second = REGION_0 if name.endswith("00") else REGION_1
    victim = VictimProgram(
        segments=[(REGION_0, REFERENCE_ITERATIONS), (second, REFERENCE_ITERATIONS)]
    )
    if num_samples is None:
        num_samples = _REFERENCE_NUM_SAMPLES[kind]
    probe = ProbeConfig(kind=kind, num_samples=num_samples)
    config = SimConfig(
        latency_model=model if model is not None else default_latency_model(),
        probe=probe,
        probe_target=REGION_0,
        rng_seed=seed,
        repetitions=repetitions,
    )
    return victim, config
