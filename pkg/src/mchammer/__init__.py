"""Machine-clear side-channel laboratory.

Simulated flush+reload and flush-latency-hammering probes against a two-region
victim, NICV-based leakage quantification, an abstract covert channel, and a
single-trace ECDSA nonce/key recovery pipeline, plus optional real-hardware
gadgets for manual validation.
"""

__version__ = "0.1.0"

from .model import (
    ClassStats,
    LatencyModel,
    ProbeConfig,
    Sample,
    Trace,
    TraceParseError,
    default_latency_model,
    latency,
    read_trace,
    write_trace,
)
from .simulator import (
    AveragedTrace,
    ScheduleEvent,
    SimConfig,
    VictimProgram,
    VictimSchedule,
    average_traces,
    classify_sample,
    reference_scenario,
    run_repetitions,
    simulate,
)
from .leakage import (
    LeakageDataset,
    NicvCurve,
    correlation_ratio_bound_check,
    count_pois,
    nicv_general,
    nicv_two_class,
)
from .covert import BitFrame, ChannelConfig, decode, encode, measure_ber, run_channel
from .ecdsa import (
    CURVES,
    P256,
    TOY17,
    CurveParams,
    KeyPair,
    KeyRecoveryError,
    NonceRejectedError,
    Point,
    Signature,
    point_add,
    point_double,
    recover_nonce,
    recover_private_key,
    scalar_mul,
    scalar_mul_leaky,
    sign,
    verify,
)
from .attack import (
    AttackReport,
    NonceBits,
    attack_single_trace,
    classify_gaps,
    detect_peaks,
    simulate_signing_trace,
)
