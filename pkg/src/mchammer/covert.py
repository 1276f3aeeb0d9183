"""Abstract covert channel over the machine-clear flush-latency signal.

The sender encodes each bit as a choice of victim execution region: 0 runs
a loop slot inside the probed region (inducing machine clears, high flush
latency), 1 runs the same slot in the other region (no clears, low flush
latency).  The receiver hammers the probed line and decides each bit from
the median flush latency of its slot.

Synchronization is out of scope: sender and receiver share slot boundaries
(the receiver takes a fixed number of samples per slot and both resync at
each boundary), so decoding partitions the trace into equal slots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import LatencyModel, PROBE_SIM_MC, Sample, Trace, default_latency_model
from .simulator import (
    DEFAULT_PROBE_OVERHEAD,
    REGION_0,
    REGION_1,
    LatencySampler,
    VictimProgram,
    _VictimWalker,
)


@dataclass
class ChannelConfig:
    """Slot geometry and decision threshold for the synchronized channel.

    The default threshold 228 is the midpoint of the 149/306 inactive/active
    flush-latency medians.  The default slot length keeps the sender busy in
    the probed region comfortably past the receiver's last sample of the
    slot, so a 0-bit slot never trails off into low-latency samples.
    """

    slot_iterations: int = 48
    decision_threshold: float = 228.0
    samples_per_slot: int = 31
    rng_seed: int = 0

    def __post_init__(self):
        if self.slot_iterations < 1:
            raise ValueError("slot_iterations must be >= 1")
        if self.samples_per_slot < 1:
            raise ValueError("samples_per_slot must be >= 1")

    def validate_against(self, model: LatencyModel) -> None:
        lo = model.mc_inactive.median
        hi = model.mc_active.median
        if not (lo < self.decision_threshold < hi):
            raise ValueError(
                f"decision_threshold {self.decision_threshold} must lie strictly "
                f"between the inactive ({lo}) and active ({hi}) medians"
            )


@dataclass
class BitFrame:
    """Decoded bits plus the sample-index range each bit was read from."""

    bits: list[int]
    slots: list[tuple[int, int]]

    def as_string(self) -> str:
        return "".join(str(b) for b in self.bits)


def parse_bits(bits: "str | list[int]") -> list[int]:
    if isinstance(bits, str):
        if any(c not in "01" for c in bits):
            raise ValueError("bit string may only contain '0' and '1'")
        out = [int(c) for c in bits]
    else:
        out = list(bits)
        if any(b not in (0, 1) for b in out):
            raise ValueError("bits must be 0 or 1")
    if not out:
        raise ValueError("bit sequence must be non-empty")
    return out


def encode(bits: "str | list[int]", config: ChannelConfig) -> VictimProgram:
    """Map bits to victim segments: 0 -> probed region, 1 -> the other."""
    seq = parse_bits(bits)
    segments = [
        (REGION_0 if b == 0 else REGION_1, config.slot_iterations) for b in seq
    ]
    return VictimProgram(segments=segments)


def run_channel(
    bits: "str | list[int]",
    config: ChannelConfig,
    model: LatencyModel | None = None,
    probe_overhead: int = DEFAULT_PROBE_OVERHEAD,
) -> Trace:
    """Simulate one synchronized transmission and return the receiver trace.

    Per slot the sender executes its segment and the receiver takes exactly
    samples_per_slot flush samples; both resync at the slot boundary (the
    later of the two finish times).  The first flush of the transmission
    clears the cache, so the sender's first pass always misses.
    """
    model = model if model is not None else default_latency_model()
    config.validate_against(model)
    program = encode(bits, config)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(config.rng_seed)))
    sampler = LatencySampler(model, rng)

    starts: list[int] = []
    ends: list[int] = []
    t = 0
    for segment in program.segments:
        slot_program = VictimProgram(
            segments=[segment],
            iter_base_cost=program.iter_base_cost,
            miss_penalty=program.miss_penalty,
            clear_penalty=program.clear_penalty,
        )
        walker = _VictimWalker(slot_program, REGION_0, record=False)
        slot_start = t
        probe_t = 0
        for _ in range(config.samples_per_slot):
            walker.advance_to(probe_t)
            active = walker.on_flush(probe_t)
            lat = sampler.draw("mc_active" if active else "mc_inactive")
            starts.append(slot_start + probe_t)
            ends.append(slot_start + probe_t + lat)
            probe_t += lat + probe_overhead
        walker.drain()
        t = slot_start + max(probe_t, walker.end_time)

    samples = [Sample(i, s, e) for i, (s, e) in enumerate(zip(starts, ends))]
    meta = {
        "probe": PROBE_SIM_MC,
        "target": REGION_0,
        "seed": str(config.rng_seed),
        "channel_bits": str(len(program.segments)),
    }
    return Trace(samples=samples, meta=meta)


def decode(trace: Trace, config: ChannelConfig, expected_bit_count: int) -> BitFrame:
    """Split the trace into equal slots and decide each bit from its median.

    High median flush latency (above the threshold) means the sender executed
    the probed region, i.e. a 0 bit; low median means a 1 bit.
    """
    if expected_bit_count < 1:
        raise ValueError("expected_bit_count must be >= 1")
    lats = trace.latencies()
    if len(lats) < expected_bit_count:
        raise ValueError(
            f"trace has {len(lats)} samples, fewer than {expected_bit_count} bits"
        )
    slot_size = len(lats) // expected_bit_count
    bits = []
    slots = []
    for i in range(expected_bit_count):
        lo = i * slot_size
        hi = lo + slot_size
        med = float(np.median(lats[lo:hi]))
        bits.append(0 if med > config.decision_threshold else 1)
        slots.append((lo, hi))
    return BitFrame(bits=bits, slots=slots)


def measure_ber(sent: "str | list[int]", received: "BitFrame | str | list[int]") -> float:
    """Bit error rate: Hamming distance over length."""
    sent_bits = parse_bits(sent)
    if isinstance(received, BitFrame):
        got_bits = received.bits
    else:
        got_bits = parse_bits(received)
    if len(sent_bits) != len(got_bits):
        raise ValueError(
            f"length mismatch: sent {len(sent_bits)} bits, received {len(got_bits)}"
        )
    errors = sum(1 for a, b in zip(sent_bits, got_bits) if a != b)
    return errors / len(sent_bits)
