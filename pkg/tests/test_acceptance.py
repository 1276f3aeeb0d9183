"""Acceptance gate: one test per criterion, each printing a pass/fail line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines and measured values.  Tolerances are pinned here and nowhere else.
"""

import random
import time

import numpy as np
import pytest
from click.testing import CliRunner

from mchammer.attack import attack_single_trace, simulate_signing_trace
from mchammer.cli import cli
from mchammer.covert import ChannelConfig, decode, measure_ber, run_channel
from mchammer.ecdsa import (
    INFINITY,
    P256,
    TOY17,
    KeyPair,
    NonceRejectedError,
    point_add,
    recover_nonce,
    recover_private_key,
    scalar_mul,
    scalar_mul_leaky,
    sign,
)
from mchammer.leakage import (
    LeakageDataset,
    correlation_ratio_bound_check,
    count_pois,
    nicv_general,
    nicv_two_class,
)
from mchammer.model import default_latency_model, write_trace
from mchammer.simulator import (
    LatencySampler,
    active_span,
    latency_matrix,
    reference_scenario,
    run_repetitions,
)

MODEL = default_latency_model()

POI_THRESHOLDS = (0.2, 0.3, 0.4, 0.5)
SPAN_TARGETS = {"fr-01": 90, "fr-00": 180, "mc-01": 1100, "mc-00": 2200}
SPAN_RELTOL = 0.50
MEDIAN_TARGETS = {"fr_hit": 78, "fr_miss": 228, "mc_active": 306, "mc_inactive": 149}
MEDIAN_RELTOL = 0.10
NICV_EQUIV_RELTOL = 1e-12
BOUND_SLACK = 1e-9
AFFINE_TOL = 1e-9
COVERT_BITS = 10_000
COVERT_MAX_BER = 0.01
ATTACK_RUNS = 100
ATTACK_MIN_NOISY_SUCCESS = 95
REFERENCE_BITS = "10000111100010000110001000011101"


def report(criterion: str, ok: bool, detail: str) -> None:
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {criterion}: {detail}"


def leakage_battery(num_datasets=200, rows=100, cols=500):
    """Seeded random balanced two-class datasets, half with injected leakage."""
    for d in range(num_datasets):
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(entropy=909, spawn_key=(d,)))
        )
        y = rng.normal(150.0, 30.0, size=(rows, cols))
        labels = np.repeat([0, 1], rows // 2)
        if d % 2 == 0:
            shift = rng.normal(0.0, 25.0, size=cols) * (rng.random(cols) < 0.3)
            y[labels == 1] += shift
        yield LeakageDataset(class_labels=labels, traces=y)


@pytest.fixture(scope="module")
def reference_runs():
    """1000-repetition reference scenarios (criterion 4's dataset)."""
    start = time.monotonic()
    matrices = {}
    for name in ("fr-00", "fr-01", "mc-00", "mc-01"):
        victim, config = reference_scenario(name, seed=20, repetitions=1000)
        runs = run_repetitions(victim, config)
        matrices[name] = latency_matrix([t for t, _ in runs])
    return matrices, time.monotonic() - start


def test_criterion_1_nicv_formula_equivalence():
    start = time.monotonic()
    worst = 0.0
    for ds in leakage_battery():
        general = nicv_general(ds).values
        two = nicv_two_class(ds).values
        rel = np.max(np.abs(general - two) / np.maximum(np.abs(general), 1e-300))
        worst = max(worst, float(rel))
    elapsed = time.monotonic() - start
    ok = worst <= NICV_EQUIV_RELTOL and elapsed < 10.0
    report("1 nicv-equivalence", ok, f"worst rel err {worst:.3e}, {elapsed:.1f}s")


def test_criterion_2_correlation_bound():
    violations = 0
    worst = -1.0
    for ds in leakage_battery():
        result = correlation_ratio_bound_check(ds)
        violations += result.violation_count
        worst = max(worst, result.max_violation)
    report(
        "2 correlation-bound",
        violations == 0,
        f"violations {violations}, max excess {worst:.3e} (slack {BOUND_SLACK})",
    )


def test_criterion_3_affine_invariance():
    ds = next(leakage_battery(num_datasets=1))
    base = nicv_general(ds).values
    rng = np.random.Generator(np.random.PCG64(777))
    worst = 0.0
    for _ in range(20):
        a = float(rng.uniform(0.2, 8.0) * rng.choice([-1.0, 1.0]))
        b = float(rng.uniform(-200.0, 200.0))
        scaled = LeakageDataset(class_labels=ds.class_labels, traces=a * ds.traces + b)
        worst = max(worst, float(np.abs(nicv_general(scaled).values - base).max()))
    report("3 affine-invariance", worst < AFFINE_TOL, f"max deviation {worst:.3e}")


def test_criterion_4_granularity_and_pois(reference_runs):
    matrices, build_seconds = reference_runs
    start = time.monotonic()

    spans = {}
    for name, matrix in matrices.items():
        kind = "flush_reload" if name.startswith("fr") else "mc_hammer"
        spans[name] = active_span(matrix.mean(axis=0), kind, MODEL)
    span_ok = all(
        abs(spans[name] - target) / target <= SPAN_RELTOL
        for name, target in SPAN_TARGETS.items()
    )

    def dataset(a, b):
        return LeakageDataset(
            class_labels=np.repeat([0, 1], a.shape[0]), traces=np.vstack([a, b])
        )

    mc_curve = nicv_general(dataset(matrices["mc-00"], matrices["mc-01"]))
    fr_curve = nicv_general(dataset(matrices["fr-00"], matrices["fr-01"]))
    mc_pois = {t: count_pois(mc_curve, t) for t in POI_THRESHOLDS}
    fr_pois = {t: count_pois(fr_curve, t) for t in POI_THRESHOLDS}
    ratio_ok = all(mc_pois[t] / fr_pois[t] >= 10.0 for t in POI_THRESHOLDS)
    fr_ok = all(fr_pois[t] < 1024 for t in POI_THRESHOLDS)
    mc_ok = max(mc_pois.values()) > 1024  # granularity bound met at a suitable threshold

    elapsed = build_seconds + (time.monotonic() - start)
    ok = span_ok and ratio_ok and fr_ok and mc_ok and elapsed < 300.0
    report(
        "4 granularity-and-pois",
        ok,
        f"spans {spans}, mc pois {mc_pois}, fr pois {fr_pois}, {elapsed:.0f}s",
    )


def test_criterion_5_latency_model_fidelity():
    rng = np.random.Generator(np.random.PCG64(12345))
    sampler = LatencySampler(MODEL, rng)
    deviations = {}
    for cls, target in MEDIAN_TARGETS.items():
        med = float(np.median(sampler.draw_many(cls, 1 << 20)))
        deviations[cls] = abs(med - target) / target
    ok = all(dev <= MEDIAN_RELTOL for dev in deviations.values())
    detail = ", ".join(f"{cls} {dev:.3%}" for cls, dev in deviations.items())
    report("5 latency-model-fidelity", ok, detail)


def test_criterion_6_covert_channel():
    start = time.monotonic()
    rng = np.random.Generator(np.random.PCG64(606))
    bits = "".join(rng.choice(["0", "1"]) for _ in range(COVERT_BITS))
    config = ChannelConfig(rng_seed=33)

    noisy = run_channel(bits, config, model=MODEL)
    ber_noisy = measure_ber(bits, decode(noisy, config, COVERT_BITS))
    clean = run_channel(bits, config, model=MODEL.zero_noise())
    ber_clean = measure_ber(bits, decode(clean, config, COVERT_BITS))
    elapsed = time.monotonic() - start
    ok = ber_noisy < COVERT_MAX_BER and ber_clean == 0.0 and elapsed < 60.0
    report(
        "6 covert-channel",
        ok,
        f"default-noise BER {ber_noisy:.4%}, zero-noise BER {ber_clean}, {elapsed:.1f}s",
    )


def test_criterion_7_scalar_mult_oracles():
    table = [INFINITY]
    for _ in range(TOY17.n):
        table.append(point_add(table[-1], TOY17.generator, TOY17))
    mult_ok = all(
        scalar_mul(k, TOY17.generator, TOY17) == table[k % TOY17.n]
        for k in range(1, 1 << 10)
    )
    toy_roundtrip_ok = all(
        recover_nonce(scalar_mul_leaky(k, TOY17)[1]) == k for k in range(1, TOY17.n)
    )
    rng = random.Random(4242)
    p256_ok = True
    for _ in range(1000):
        k = rng.randrange(1, P256.n)
        if recover_nonce(scalar_mul_leaky(k, P256)[1]) != k:
            p256_ok = False
            break
    ok = mult_ok and toy_roundtrip_ok and p256_ok
    report(
        "7 scalar-mult-oracle",
        ok,
        f"toy repeated-addition {mult_ok}, toy roundtrip {toy_roundtrip_ok}, "
        f"p256 1000-scalar roundtrip {p256_ok}",
    )


def test_criterion_8_key_recovery_algebra():
    rng = random.Random(888)
    checked = {"toy17": 0, "p256": 0}
    exact = True
    for curve in (TOY17, P256):
        while checked[curve.name] < 1000:
            alpha = rng.randrange(1, curve.n)
            k = rng.randrange(1, curve.n)
            h = rng.randrange(0, curve.n)
            keypair = KeyPair.from_private(alpha, curve)
            try:
                sig = sign(b"acceptance", keypair, k, curve, hash_value=h)
            except NonceRejectedError:
                continue
            checked[curve.name] += 1
            if recover_private_key(sig, k, curve) != alpha:
                exact = False
                break
    report("8 key-recovery-algebra", exact, f"triples checked {checked}")


def _attack_run(seed: int, model) -> tuple[bool, bool]:
    rng = random.Random(seed)
    keypair = KeyPair.generate(P256, rng)
    k = rng.randrange(1, P256.n)
    sig = sign(b"single trace", keypair, k, P256)
    trace, _ = simulate_signing_trace(k, P256, seed=seed, model=model)
    rep = attack_single_trace(trace, sig, keypair.public, P256)
    correct = rep.verified and rep.alpha == keypair.alpha
    wrong_but_verified = rep.verified and rep.alpha != keypair.alpha
    return correct, wrong_but_verified


def test_criterion_9_end_to_end_attack():
    start = time.monotonic()
    zero = MODEL.zero_noise()
    clean = [_attack_run(seed, zero) for seed in range(ATTACK_RUNS)]
    noisy = [_attack_run(1000 + seed, MODEL) for seed in range(ATTACK_RUNS)]
    clean_successes = sum(c for c, _ in clean)
    noisy_successes = sum(c for c, _ in noisy)
    wrong_keys = sum(w for _, w in clean) + sum(w for _, w in noisy)

    k_fixture = (1 << 32) | int(REFERENCE_BITS, 2)
    trace, _ = simulate_signing_trace(k_fixture, P256, seed=42, model=MODEL)
    import tempfile
    from pathlib import Path

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "fixture.trace"
        write_trace(trace, path)
        result = CliRunner().invoke(cli, ["attack", "--trace-file", str(path)], obj={})
    fixture_ok = result.exit_code == 0 and REFERENCE_BITS in result.output

    elapsed = time.monotonic() - start
    ok = (
        clean_successes == ATTACK_RUNS
        and noisy_successes >= ATTACK_MIN_NOISY_SUCCESS
        and wrong_keys == 0
        and fixture_ok
        and elapsed < 300.0
    )
    report(
        "9 end-to-end-attack",
        ok,
        f"noise-free {clean_successes}/{ATTACK_RUNS}, default-noise "
        f"{noisy_successes}/{ATTACK_RUNS}, wrong-verified {wrong_keys}, "
        f"fixture bits {'found' if fixture_ok else 'MISSING'}, {elapsed:.0f}s",
    )


def test_criterion_10_command_determinism(tmp_path):
    runner = CliRunner()
    sim_args = [
        "simulate", "custom", "--probe-kind", "mc_hammer",
        "--segments", "victim_0:64,victim_1:64",
        "--repetitions", "3", "--num-samples", "64", "--save-traces",
    ]
    out1, out2 = tmp_path / "a", tmp_path / "b"
    r1 = runner.invoke(cli, ["--out", str(out1), "--seed", "6", *sim_args], obj={})
    r2 = runner.invoke(cli, ["--out", str(out2), "--seed", "6", *sim_args], obj={})
    assert r1.exit_code == 0 and r2.exit_code == 0
    files1 = sorted(p.relative_to(out1) for p in out1.rglob("*") if p.is_file())
    files2 = sorted(p.relative_to(out2) for p in out2.rglob("*") if p.is_file())
    files_identical = files1 == files2 and all(
        (out1 / rel).read_bytes() == (out2 / rel).read_bytes() for rel in files1
    )

    covert1 = runner.invoke(cli, ["--seed", "3", "covert", "01101"], obj={})
    covert2 = runner.invoke(cli, ["--seed", "3", "covert", "01101"], obj={})
    attack1 = runner.invoke(cli, ["--seed", "5", "attack", "--curve", "toy17"], obj={})
    attack2 = runner.invoke(cli, ["--seed", "5", "attack", "--curve", "toy17"], obj={})
    stdout_identical = covert1.output == covert2.output and attack1.output == attack2.output

    ok = files_identical and stdout_identical
    report(
        "10 determinism",
        ok,
        f"files identical {files_identical}, stdout identical {stdout_identical}",
    )
