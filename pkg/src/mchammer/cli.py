"""Command-line front end: simulate, nicv, covert, attack (+ hw probe/victim).

Every file-writing command drops a manifest.json next to its outputs with
the full parameter snapshot (seeds included); rerunning with the same
parameters reproduces the outputs byte for byte.

Exit codes: 0 success, 2 usage error, 3 recovery failed, 4 I/O or parse
error.
"""

from __future__ import annotations

import json
import random
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .attack import attack_single_trace, classify_gaps, detect_peaks, simulate_signing_trace
from .covert import ChannelConfig, decode, measure_ber, parse_bits, run_channel
from .ecdsa import CURVES, KeyPair, format_signature, recover_nonce, sign
from .leakage import LeakageDataset, count_pois, nicv_general, write_nicv_csv
from .model import (
    PROBE_FLUSH_RELOAD,
    PROBE_MC_HAMMER,
    LatencyModel,
    ProbeConfig,
    TraceParseError,
    default_latency_model,
    parse_model_overrides,
    read_trace,
    write_trace,
)
from .simulator import (
    REFERENCE_SCENARIOS,
    REGIONS,
    SimConfig,
    VictimProgram,
    active_span,
    average_traces,
    reference_scenario,
    run_repetitions,
    write_averaged_csv,
    write_schedule_csv,
)

EXIT_USAGE = 2
EXIT_RECOVERY_FAILED = 3
EXIT_IO = 4

ATTACK_MESSAGE = b"mchammer attack demo message"


def _load_model(ctx: click.Context) -> LatencyModel:
    model_file = ctx.obj.get("model_file")
    if model_file is None:
        return default_latency_model()
    try:
        return parse_model_overrides(Path(model_file).read_text(encoding="utf-8"))
    except OSError as exc:
        _io_fail(f"cannot read model file: {exc}")
    except ValueError as exc:
        raise click.UsageError(str(exc))


def _io_fail(message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(EXIT_IO)


def _write_manifest(out_dir: Path, command: str, parameters: dict, outputs: list[str]) -> None:
    manifest = {
        "artifact_version": __version__,
        "command": command,
        "parameters": parameters,
        "outputs": outputs,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")


@click.group()
@click.option("--seed", type=int, default=0, show_default=True, help="Master RNG seed.")
@click.option(
    "--out",
    type=click.Path(path_type=Path),
    default=Path("mchammer-out"),
    show_default=True,
    help="Output directory.",
)
@click.option(
    "--model",
    "model_file",
    type=click.Path(path_type=Path),
    default=None,
    help="Latency model override file (class.field=value lines).",
)
@click.pass_context
def cli(ctx: click.Context, seed: int, out: Path, model_file: Path | None):
    """Machine-clear probing lab: simulator, leakage metrics, covert channel, attack."""
    ctx.ensure_object(dict)
    ctx.obj["seed"] = seed
    ctx.obj["out"] = out
    ctx.obj["model_file"] = model_file


def _parse_segments(spec: str) -> list[tuple[str, int]]:
    segments = []
    for part in spec.split(","):
        region, _, count = part.partition(":")
        region = region.strip()
        if region not in REGIONS or not count.strip().isdigit():
            raise click.UsageError(
                f"bad segment {part!r}; expected e.g. victim_0:1024,victim_1:1024"
            )
        segments.append((region, int(count)))
    return segments


@cli.command()
@click.argument("scenario")
@click.option("--repetitions", type=int, default=100, show_default=True)
@click.option("--num-samples", type=int, default=None, help="Override the probe sample budget.")
@click.option("--save-traces", is_flag=True, help="Write one trace file per repetition.")
@click.option("--save-schedule", is_flag=True, help="Write the first repetition's victim schedule.")
@click.option("--probe-kind", type=click.Choice([PROBE_FLUSH_RELOAD, PROBE_MC_HAMMER]))
@click.option("--segments", help="Custom victim segments, e.g. victim_0:1024,victim_1:1024.")
@click.option("--probe-target", type=click.Choice(list(REGIONS)), default="victim_0")
@click.pass_context
def simulate(ctx, scenario, repetitions, num_samples, save_traces, save_schedule,
             probe_kind, segments, probe_target):
    """Run a reference scenario (fr-00, fr-01, mc-00, mc-01) or a custom one."""
    model = _load_model(ctx)
    seed = ctx.obj["seed"]
    if scenario == "custom":
        if probe_kind is None or segments is None:
            raise click.UsageError("custom scenario requires --probe-kind and --segments")
        victim = VictimProgram(segments=_parse_segments(segments))
        probe = ProbeConfig(kind=probe_kind, num_samples=num_samples or 256)
        config = SimConfig(
            latency_model=model, probe=probe, probe_target=probe_target,
            rng_seed=seed, repetitions=repetitions,
        )
    elif scenario in REFERENCE_SCENARIOS:
        victim, config = reference_scenario(
            scenario, seed=seed, model=model, repetitions=repetitions, num_samples=num_samples,
        )
    else:
        raise click.UsageError(
            f"unknown scenario {scenario!r}; pick one of {REFERENCE_SCENARIOS} or 'custom'"
        )

    out_dir: Path = ctx.obj["out"]
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        runs = run_repetitions(victim, config, record_schedule=save_schedule)
        traces = [t for t, _ in runs]
        avg = average_traces(traces)
        outputs = ["averaged.csv"]
        write_averaged_csv(avg, out_dir / "averaged.csv")
        if save_traces:
            trace_dir = out_dir / "traces"
            trace_dir.mkdir(exist_ok=True)
            for i, trace in enumerate(traces):
                name = f"rep-{i:04d}.trace"
                write_trace(trace, trace_dir / name)
                outputs.append(f"traces/{name}")
        if save_schedule:
            write_schedule_csv(runs[0][1], out_dir / "schedule.csv")
            outputs.append("schedule.csv")
        _write_manifest(
            out_dir, "simulate",
            {
                "scenario": scenario, "seed": seed, "repetitions": repetitions,
                "num_samples": config.probe.num_samples, "probe_kind": config.probe.kind,
                "probe_target": config.probe_target,
                "segments": list(victim.segments),
                "model_file": str(ctx.obj["model_file"]) if ctx.obj["model_file"] else None,
            },
            outputs,
        )
    except OSError as exc:
        _io_fail(str(exc))
    span = active_span(avg.values, config.probe.kind, model)
    click.echo(f"scenario={scenario} repetitions={repetitions} active_span={span}")
    click.echo(f"averaged trace: {out_dir / 'averaged.csv'}")


def _read_trace_dir(path: Path) -> list:
    files = sorted(path.glob("*.trace"))
    if not files:
        _io_fail(f"no .trace files in {path}")
    return [read_trace(f) for f in files]


@cli.command()
@click.argument("class0_dir", type=click.Path(path_type=Path, exists=True, file_okay=False))
@click.argument("class1_dir", type=click.Path(path_type=Path, exists=True, file_okay=False))
@click.option("--thresholds", default="0.2,0.3,0.4,0.5", show_default=True)
@click.option(
    "--baseline-class0", type=click.Path(path_type=Path, exists=True, file_okay=False),
    help="Second technique's class-0 traces, for the POI ratio report.",
)
@click.option(
    "--baseline-class1", type=click.Path(path_type=Path, exists=True, file_okay=False),
    help="Second technique's class-1 traces.",
)
@click.pass_context
def nicv(ctx, class0_dir, class1_dir, thresholds, baseline_class0, baseline_class1):
    """Leakage curve and POI counts from two labeled trace directories."""
    try:
        threshold_values = [float(t) for t in thresholds.split(",")]
    except ValueError:
        raise click.UsageError(f"bad threshold list {thresholds!r}")
    if (baseline_class0 is None) != (baseline_class1 is None):
        raise click.UsageError("--baseline-class0 and --baseline-class1 go together")

    def load_dataset(dir0: Path, dir1: Path) -> LeakageDataset:
        group0 = _read_trace_dir(dir0)
        group1 = _read_trace_dir(dir1)
        if len(group0) != len(group1):
            _io_fail(
                f"class trace counts differ: {len(group0)} vs {len(group1)}"
            )
        lengths = {len(t) for t in group0 + group1}
        if len(lengths) != 1:
            _io_fail(f"trace lengths differ across classes: {sorted(lengths)}")
        return LeakageDataset.from_trace_groups(group0, group1)

    out_dir: Path = ctx.obj["out"]
    try:
        dataset = load_dataset(class0_dir, class1_dir)
        curve = nicv_general(dataset)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_nicv_csv(curve, out_dir / "nicv.csv")
        outputs = ["nicv.csv"]
        baseline_curve = None
        if baseline_class0 is not None:
            baseline = load_dataset(baseline_class0, baseline_class1)
            baseline_curve = nicv_general(baseline)
            write_nicv_csv(baseline_curve, out_dir / "baseline_nicv.csv")
            outputs.append("baseline_nicv.csv")
        _write_manifest(
            out_dir, "nicv",
            {
                "class0_dir": str(class0_dir), "class1_dir": str(class1_dir),
                "thresholds": threshold_values,
                "baseline_class0": str(baseline_class0) if baseline_class0 else None,
                "baseline_class1": str(baseline_class1) if baseline_class1 else None,
            },
            outputs,
        )
    except TraceParseError as exc:
        _io_fail(str(exc))
    except OSError as exc:
        _io_fail(str(exc))

    for threshold in threshold_values:
        pois = count_pois(curve, threshold)
        line = f"threshold={threshold} pois={pois}"
        if baseline_curve is not None:
            base = count_pois(baseline_curve, threshold)
            ratio = pois / base if base else float("inf")
            line += f" baseline_pois={base} ratio={ratio:.1f}"
        click.echo(line)
    click.echo(f"nicv curve: {out_dir / 'nicv.csv'}")


@cli.command()
@click.argument("bits")
@click.option("--zero-noise", is_flag=True, help="Collapse the latency model to its medians.")
@click.pass_context
def covert(ctx, bits, zero_noise):
    """Send an ASCII 0/1 string through the simulated channel and report BER."""
    model = _load_model(ctx)
    if zero_noise:
        model = model.zero_noise()
    try:
        sent = parse_bits(bits)
    except ValueError as exc:
        raise click.UsageError(str(exc))
    config = ChannelConfig(rng_seed=ctx.obj["seed"])
    trace = run_channel(sent, config, model=model)
    frame = decode(trace, config, len(sent))
    ber = measure_ber(sent, frame)
    click.echo(f"received: {frame.as_string()}")
    click.echo(f"ber: {ber!r}")


@cli.command()
@click.option("--curve", "curve_name", type=click.Choice(sorted(CURVES)), default="p256",
              show_default=True)
@click.option("--trace-file", type=click.Path(path_type=Path, exists=True, dir_okay=False),
              help="Classify an existing trace instead of simulating a signing run.")
@click.option("--zero-noise", is_flag=True, help="Collapse the latency model to its medians.")
@click.pass_context
def attack(ctx, curve_name, trace_file, zero_noise):
    """Recover an ECDSA private key from a single simulated signing trace."""
    model = _load_model(ctx)
    if zero_noise:
        model = model.zero_noise()
    curve = CURVES[curve_name]

    if trace_file is not None:
        try:
            trace = read_trace(trace_file)
        except (TraceParseError, OSError) as exc:
            _io_fail(str(exc))
        peaks = detect_peaks(trace)
        click.echo(f"peaks found: {len(peaks)}")
        if len(peaks) < 2:
            click.echo("bit string: (none)")
            click.echo("verification: FAILED")
            click.echo("failure: too few peaks to classify")
            sys.exit(EXIT_RECOVERY_FAILED)
        classification = classify_gaps(peaks)
        k = recover_nonce(classification.ops)
        click.echo(f"bit string: {k:b}")
        click.echo("verification: SKIPPED (no signature context for an ingested trace)")
        return

    seed = ctx.obj["seed"]
    rng = random.Random(seed)
    keypair = KeyPair.generate(curve, rng)
    k = rng.randrange(1, curve.n)
    sig = sign(ATTACK_MESSAGE, keypair, k, curve)
    trace, _ = simulate_signing_trace(k, curve, seed=seed, model=model)
    report = attack_single_trace(trace, sig, keypair.public, curve)
    click.echo(f"curve: {curve.name}")
    click.echo(f"signature: {format_signature(sig, curve)}")
    click.echo(report.render())
    if not report.verified:
        sys.exit(EXIT_RECOVERY_FAILED)


def _register_hw_commands() -> None:
    from . import hw

    @cli.command()
    @click.option("--target", "target_path", required=False,
                  type=click.Path(path_type=Path, exists=True, dir_okay=False))
    @click.option("--offset", default=hex(hw.DEFAULT_PROBE_OFFSET), show_default=True,
                  help="Byte offset of the probed line (hex or decimal).")
    @click.option("--samples", type=int, default=1 << 20, show_default=True)
    @click.option("--wait", type=int, default=None,
                  help="Waiting period in cycles; presence selects flush+reload.")
    @click.option("--self-test", is_flag=True, help="Run the two-process separation check.")
    @click.pass_context
    def probe(ctx, target_path, offset, samples, wait, self_test):
        """Capture a hardware trace against a mapped read-only file (manual)."""
        if self_test:
            report = hw.self_test()
            click.echo(report.render())
            return
        if target_path is None:
            raise click.UsageError("--target is required unless --self-test is given")
        try:
            offset_value = int(offset, 0)
        except ValueError:
            raise click.UsageError(f"bad offset {offset!r}")
        target = hw.HwTarget(path=target_path, offset=offset_value)
        try:
            if wait is None:
                trace = hw.mc_hammer_capture(target, samples)
            else:
                config = ProbeConfig(
                    kind=PROBE_FLUSH_RELOAD, num_samples=samples, wait_cycles=wait
                )
                trace = hw.flush_reload_capture(target, config)
        except (RuntimeError, ValueError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_USAGE)
        out_dir: Path = ctx.obj["out"]
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            out_file = out_dir / "probe.trace"
            write_trace(trace, out_file)
        except OSError as exc:
            _io_fail(str(exc))
        click.echo(f"captured {len(trace)} samples to {out_file}")

    @cli.command()
    @click.option("--region", type=click.Choice(sorted(hw.REGION_OFFSETS)), default="victim_0",
                  show_default=True)
    @click.option("--iterations", type=int, default=1 << 30, show_default=True)
    @click.option("--image", type=click.Path(path_type=Path), default=None,
                  help="Victim image file (created if missing).")
    @click.pass_context
    def victim(ctx, region, iterations, image):
        """Run the strawman victim loop in this process (manual)."""
        if image is None:
            image = ctx.obj["out"] / "victim-image.bin"
            image.parent.mkdir(parents=True, exist_ok=True)
        try:
            hw.run_victim(region, iterations, image)
        except (RuntimeError, ValueError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_USAGE)


try:
    from . import hw as _hw

    if _hw.supported():
        _register_hw_commands()
except ImportError:  # pragma: no cover
    pass


def main(argv=None) -> None:
    try:
        cli.main(args=argv, standalone_mode=False, obj={})
    except click.exceptions.Exit as exc:
        sys.exit(exc.exit_code)
    except click.UsageError as exc:
        exc.show()
        sys.exit(EXIT_USAGE)
    except click.ClickException as exc:
        exc.show()
        sys.exit(EXIT_USAGE)
    except click.exceptions.Abort:
        sys.exit(130)
    except TraceParseError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_IO)
    except OSError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_IO)


if __name__ == "__main__":
    main()
