"""Single-trace nonce and private-key recovery from signing traces.

During a signing run the victim passes through the doubling routine once
per scalar bit; hammering that routine yields one latency peak per pass.
The sample gap between consecutive peaks is short when the iteration only
doubled (a 0 bit) and long when a point addition followed (a 1 bit), so the
gap sequence spells the nonce and the signature equation then yields the
private key.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .ecdsa import (
    OP_DOUBLE,
    OP_DOUBLE_ADD,
    CurveParams,
    KeyRecoveryError,
    Point,
    Signature,
    recover_nonce,
    recover_private_key,
    scalar_mul_leaky,
)
from .model import LatencyModel, ProbeConfig, PROBE_MC_HAMMER, Trace, default_latency_model
from .simulator import (
    REGION_0,
    REGION_1,
    SimConfig,
    VictimProgram,
    VictimSchedule,
    simulate,
)

PEAK_THRESHOLD_DEFAULT = 250.0

# Above-threshold runs closer than this many samples belong to the same
# doubling pass (noise can dip a burst below threshold mid-peak); genuine
# inter-peak gaps are 70+ samples.
PEAK_MERGE_WITHIN = 16

FIXED_CUT_DEFAULT = 100.0

# Two-means clusters whose means are closer than this are treated as one
# cluster (a tie): real D/DA gap clusters sit ~60 samples apart.
TWO_MEANS_TIE_MARGIN = 20.0


def detect_peaks(
    trace: Trace,
    peak_threshold: float = PEAK_THRESHOLD_DEFAULT,
    merge_within: int = PEAK_MERGE_WITHIN,
) -> list[int]:
    """Indices of latency peaks above the threshold.

    Consecutive above-threshold runs separated by fewer than merge_within
    samples merge into one peak whose index is the midpoint of the merged
    extent.
    """
    lats = trace.latencies()
    above = lats > peak_threshold
    runs: list[list[int]] = []
    start = None
    for i, flag in enumerate(above):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            runs.append([start, i - 1])
            start = None
    if start is not None:
        runs.append([start, len(above) - 1])

    merged: list[list[int]] = []
    for run in runs:
        if merged and run[0] - merged[-1][1] - 1 < merge_within:
            merged[-1][1] = run[1]
        else:
            merged.append(run)
    return [(lo + hi) // 2 for lo, hi in merged]


@dataclass
class GapClassification:
    """D/DA labels for each inter-peak gap plus the decision boundary used."""

    ops: list[str]
    gaps: list[int]
    cut: float
    confidence: list[float]
    fallback_used: bool


def _two_means_cut(gaps: list[int]) -> Optional[float]:
    """Best 1-D two-cluster split of the gaps; None on degenerate clustering."""
    values = sorted(gaps)
    if values[0] == values[-1]:
        return None
    best = None
    arr = np.array(values, dtype=np.float64)
    for split in range(1, len(arr)):
        lo, hi = arr[:split], arr[split:]
        sse = ((lo - lo.mean()) ** 2).sum() + ((hi - hi.mean()) ** 2).sum()
        if best is None or sse < best[0]:
            best = (sse, lo.mean(), hi.mean())
    _, mean_lo, mean_hi = best
    if mean_hi - mean_lo < TWO_MEANS_TIE_MARGIN:
        return None
    return (mean_lo + mean_hi) / 2.0


def classify_gaps(
    peak_indices: list[int],
    method: str = "two_means",
    fixed_cut: float = FIXED_CUT_DEFAULT,
) -> GapClassification:
    """Label each consecutive peak gap as D (short) or DA (long).

    two_means splits the gap lengths into two 1-D clusters; ties and
    degenerate clusterings fall back to the fixed cut (default 100 samples,
    the midpoint of the expected D and DA gap ranges).
    """
    if len(peak_indices) < 2:
        raise ValueError("need at least 2 peaks to classify gaps")
    gaps = [b - a for a, b in zip(peak_indices, peak_indices[1:])]
    fallback = False
    if method == "two_means":
        cut = _two_means_cut(gaps)
        if cut is None:
            cut = fixed_cut
            fallback = True
    elif method == "fixed":
        cut = fixed_cut
    else:
        raise ValueError(f"unknown gap classification method {method!r}")
    ops = [OP_DOUBLE_ADD if g > cut else OP_DOUBLE for g in gaps]
    confidence = [abs(g - cut) for g in gaps]
    return GapClassification(
        ops=ops, gaps=gaps, cut=cut, confidence=confidence, fallback_used=fallback
    )


@dataclass
class NonceBits:
    """Recovered operation sequence, the scalar it spells, and gap margins."""

    ops: list[str]
    k: int
    confidence: list[float]

    def bit_string(self) -> str:
        return format(self.k, "b")


# Victim geometry of a signing run, in loop iterations.  One short burst in
# the probed (doubling) region per scalar bit plus a closing boundary burst;
# gap segments run outside the probed region and last ~70 samples after a
# plain double and ~130 after a double-plus-add, matching the observed
# hardware spacing.
SIGNING_DOUBLE_ITERATIONS = 6
SIGNING_GAP_D_ITERATIONS = 320
SIGNING_GAP_DA_ITERATIONS = 650
SIGNING_LEAD_ITERATIONS = 210
SIGNING_TAIL_ITERATIONS = 420


def signing_victim_program(ops: list[str]) -> VictimProgram:
    """Victim segments reproducing a double-and-add schedule.

    Emits len(ops) + 1 bursts in the probed region: one opening each loop
    iteration and one closing boundary, so the trace shows bit-length peaks
    and len(ops) informative gaps.
    """
    segments: list[tuple[str, int]] = [(REGION_1, SIGNING_LEAD_ITERATIONS)]
    for op in ops:
        segments.append((REGION_0, SIGNING_DOUBLE_ITERATIONS))
        gap = SIGNING_GAP_DA_ITERATIONS if op == OP_DOUBLE_ADD else SIGNING_GAP_D_ITERATIONS
        segments.append((REGION_1, gap))
    segments.append((REGION_0, SIGNING_DOUBLE_ITERATIONS))
    segments.append((REGION_1, SIGNING_TAIL_ITERATIONS))
    return VictimProgram(segments=segments)


def simulate_signing_trace(
    k: int,
    curve: CurveParams,
    seed: int = 0,
    model: LatencyModel | None = None,
) -> tuple[Trace, VictimSchedule]:
    """Hammer the doubling routine while the victim computes [k]G."""
    _, ops = scalar_mul_leaky(k, curve)
    victim = signing_victim_program(ops)
    config = SimConfig(
        latency_model=model if model is not None else default_latency_model(),
        probe=ProbeConfig(kind=PROBE_MC_HAMMER, num_samples=16),
        probe_target=REGION_0,
        rng_seed=seed,
    )
    # num_samples is a lower bound only: the run extends until the victim
    # finishes, which covers the whole signing.
    return simulate(victim, config, record_schedule=False)


@dataclass
class AttackReport:
    """Outcome of one single-trace key-recovery attempt."""

    peaks: list[int]
    gaps: list[int]
    ops: list[str]
    bit_string: str
    nonce: Optional[int]
    alpha: Optional[int]
    verified: bool
    confidence: list[float] = field(default_factory=list)
    failure: Optional[str] = None
    candidate_alpha: Optional[int] = None

    def render(self) -> str:
        lines = [f"peaks found: {len(self.peaks)}"]
        histogram = Counter(self.gaps)
        hist = " ".join(f"{gap}:{count}" for gap, count in sorted(histogram.items()))
        lines.append(f"gap histogram: {hist if hist else '(none)'}")
        lines.append(f"bit string: {self.bit_string if self.bit_string else '(none)'}")
        if self.alpha is not None:
            lines.append(f"recovered key: {self.alpha:x}")
        else:
            lines.append("recovered key: (none)")
        lines.append(f"verification: {'OK' if self.verified else 'FAILED'}")
        if self.failure:
            lines.append(f"failure: {self.failure}")
        if not self.verified and self.confidence:
            worst = sorted(range(len(self.confidence)), key=lambda i: self.confidence[i])[:8]
            detail = " ".join(f"gap[{i}]={self.gaps[i]}@{self.confidence[i]:.1f}" for i in worst)
            lines.append(f"least confident gaps: {detail}")
        return "\n".join(lines)


def attack_single_trace(
    trace: Trace,
    sig: Signature,
    public: Point,
    curve: CurveParams,
    peak_threshold: float = PEAK_THRESHOLD_DEFAULT,
    method: str = "two_means",
) -> AttackReport:
    """Peaks -> gaps -> nonce -> private key, verified against the public key.

    Never reports success with a key that fails verification; on failure the
    per-gap confidence margins localize the suspect bits.
    """
    peaks = detect_peaks(trace, peak_threshold=peak_threshold)
    if len(peaks) == 0:
        return AttackReport(
            peaks=peaks, gaps=[], ops=[], bit_string="", nonce=None, alpha=None,
            verified=False, failure="no peaks detected",
        )
    if len(peaks) == 1:
        # a single doubling pass means the nonce had no bits below its MSB
        classification = GapClassification(
            ops=[], gaps=[], cut=FIXED_CUT_DEFAULT, confidence=[], fallback_used=False
        )
    else:
        classification = classify_gaps(peaks, method=method)
    k = recover_nonce(classification.ops)
    bits = format(k, "b")
    if k >= curve.n:
        return AttackReport(
            peaks=peaks, gaps=classification.gaps, ops=classification.ops,
            bit_string=bits, nonce=None, alpha=None, verified=False,
            confidence=classification.confidence,
            failure="recovered nonce exceeds the group order",
        )
    try:
        alpha = recover_private_key(sig, k, curve, expected_public=public)
    except KeyRecoveryError as exc:
        return AttackReport(
            peaks=peaks, gaps=classification.gaps, ops=classification.ops,
            bit_string=bits, nonce=k, alpha=None, verified=False,
            confidence=classification.confidence,
            failure="private-key verification mismatch",
            candidate_alpha=exc.candidate,
        )
    return AttackReport(
        peaks=peaks, gaps=classification.gaps, ops=classification.ops,
        bit_string=bits, nonce=k, alpha=alpha, verified=True,
        confidence=classification.confidence,
    )
