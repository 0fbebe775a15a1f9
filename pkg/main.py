"""
hybridtrain - hybrid inter-layer x data-parallel training engine and simulator
Command-line entry point with validate, train, simulate, sweep and memory subcommands.
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml
from dotenv import load_dotenv

from analytics import (
    comm_comp_counters,
    estimated_training_time,
    flops_and_peak_fraction,
    ledger_for_run,
)
from config import (
    Config,
    ConfigFileError,
    ConfigValidationError,
    load_run_config,
    load_validated,
    resolved_config_dict,
)
from datasets import synthetic_batches
from engine import HybridEngine
from models import RunManifest, ValidatedRun
from serial_reference import SerialTrainer, max_relative_difference
from simulator import simulate_batch

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_TOLERANCE = 2
EXIT_IO = 3

SWEEP_AXES = {
    "g_inter": "parallel.g_inter",
    "k": "parallel.coarsening_k",
    "bsize": "parallel.bucket_size",
    "ac": "parallel.checkpoint_interval",
}

SWEEP_COLUMNS = [
    "axis", "value", "seed", "status", "error",
    "g_inter", "g_data", "checkpoint_interval", "coarsening_k", "bucket_size",
    "makespan", "inter_layer_time", "allreduce_optimizer_time", "sequential_allreduce_optimizer_time",
    "allreduce_calls", "collective_overhead_time", "warmup_idle_max",
    "p2p_bytes_per_worker", "flops_per_worker", "comm_comp_ratio", "allreduce_bytes_per_worker",
    "activation_units", "device_bytes_unoptimized", "device_bytes_optimized",
]


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------

def _resolve_seed(args, settings: Config, run: ValidatedRun) -> ValidatedRun:
    seed = args.seed if getattr(args, "seed", None) is not None else settings.seed
    updates: Dict[str, Any] = {}
    if seed is not None:
        updates["seed"] = seed
    if getattr(args, "steps", None) is not None:
        updates["steps"] = args.steps
    if updates:
        run = run.model_copy(update={"training": run.training.model_copy(update=updates)})
    return run


def _manifest(command: str, args, run: ValidatedRun, out_dir: Path) -> Dict[str, Any]:
    manifest = RunManifest(
        command=command,
        config_path=args.config,
        seed=run.training.seed,
        output_dir=str(out_dir),
        overrides=list(args.set or []),
    )
    return {"manifest": manifest.model_dump(mode="json"), "config": resolved_config_dict(run)}


def _dumps(record: Dict[str, Any]) -> str:
    return json.dumps(record, sort_keys=True)


def _write_text(path: Path, text: str):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as e:
        logger.error(f"Failed to write {path}: {e}")
        raise
    logger.info(f"Wrote {path}")


def _format_bytes(value: float) -> str:
    return f"{int(value):,} B ({value / 1e9:.3f} GB)"


def _report_violations(error: ConfigValidationError):
    for v in error.violations:
        where = v.path or "config"
        if v.line is not None:
            where += f" (line {v.line})"
        print(f"{v.code}: {where}: {v.message}", file=sys.stderr)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_validate(args, settings: Config) -> int:
    run = load_validated(args.config, args.set or [])
    p = run.parallel
    print(f"valid: {p.g_inter} x {p.g_data} grid ({run.workers} workers), "
          f"{run.layers_per_worker} layers per worker, checkpoint interval {p.checkpoint_interval}, "
          f"{run.batch.microbatches_per_shard} microbatches per shard")
    for warning in run.warnings:
        print(f"warning: {warning}")
    print(yaml.safe_dump(resolved_config_dict(run), sort_keys=False), end="")
    return EXIT_OK


def cmd_train(args, settings: Config) -> int:
    run = _resolve_seed(args, settings, load_validated(args.config, args.set or []))
    out_dir = Path(args.out or settings.output_dir)
    steps = run.training.steps
    seed = run.training.seed

    engine = HybridEngine(run, seed=seed, record_trace=args.trace)
    simulated = simulate_batch(run).makespan
    log = engine.train(synthetic_batches(run, seed), steps)

    header = {"record": "manifest", **_manifest("train", args, run, out_dir)}
    lines = [_dumps(header)]
    for entry in log:
        entry = entry.model_copy(update={"simulated_time": simulated})
        lines.append(_dumps({"record": "step", **entry.model_dump(mode="json")}))

    status = EXIT_OK
    if args.oracle:
        # mixed precision only matches a serial run that keeps the same accumulation order
        serial = SerialTrainer(run, seed=seed, full_batch=not run.training.mixed_precision)
        reference = serial.train(synthetic_batches(run, seed), len(log))
        diff = max_relative_difference([e.loss for e in log], reference)
        passed = diff <= args.tolerance
        lines.append(_dumps({"record": "oracle", "max_relative_diff": diff,
                             "tolerance": args.tolerance, "passed": passed}))
        print(f"oracle: max per-step relative loss difference {diff:.3e} (tolerance {args.tolerance:g})")
        if not passed:
            logger.error(f"Serial oracle difference {diff} exceeds tolerance {args.tolerance}")
            status = EXIT_TOLERANCE

    _write_text(out_dir / "train_log.jsonl", "".join(line + "\n" for line in lines))
    if args.trace:
        engine.fabric.export_trace(str(out_dir / "trace.jsonl"), header=header)
    if log:
        print(f"trained {len(log)} steps: first loss {log[0].loss:.6g}, last loss {log[-1].loss:.6g}")
    else:
        print("trained 0 steps")
    return status


def _simulation_summary(run: ValidatedRun) -> Dict[str, Any]:
    report = simulate_batch(run)
    counters = comm_comp_counters(run)
    summary: Dict[str, Any] = {
        "report": report.model_dump(mode="json"),
        "counters": {
            "samples_per_worker": counters.samples_per_worker,
            "p2p_bytes_per_worker": counters.p2p_bytes_per_worker,
            "flops_per_worker": counters.flops_per_worker,
            "comm_comp_ratio": None if counters.ratio is None else float(counters.ratio),
        },
    }
    shape = run.memory.transformer
    if shape is not None:
        metrics = {
            "estimated_training_time": estimated_training_time(report.makespan, run.batch.batch_size, shape.sequence),
        }
        if shape.vocab > 0:
            rate, fraction = flops_and_peak_fraction(
                run.batch.batch_size, shape.sequence, shape.layers, shape.hidden, shape.vocab,
                report.makespan, run.cost_model.device_flops, run.workers,
            )
            metrics.update(flop_rate=rate, peak_fraction=fraction)
        summary["metrics"] = metrics
    return summary


def cmd_simulate(args, settings: Config) -> int:
    run = _resolve_seed(args, settings, load_validated(args.config, args.set or []))
    out_dir = Path(args.out or settings.output_dir)
    summary = _simulation_summary(run)
    report = summary["report"]

    document = {**_manifest("simulate", args, run, out_dir), **summary}
    _write_text(out_dir / "simulate_report.json", json.dumps(document, sort_keys=True, indent=2) + "\n")

    print(f"batch time:            {report['makespan']:.6g} s")
    print(f"inter-layer phase:     {report['inter_layer_time']:.6g} s")
    print(f"all-reduce+optimizer:  {report['allreduce_optimizer_time']:.6g} s "
          f"(sequential {report['sequential_allreduce_optimizer_time']:.6g} s, {report['allreduce_calls']} calls)")
    print(f"warmup idle (max):     {report['warmup_idle_max']:.6g} s")
    print(f"p2p bytes per worker:  {report['p2p_bytes_per_worker']}")
    print(f"flops per worker:      {report['flops_per_worker']:.6g}")
    if "metrics" in summary:
        metrics = summary["metrics"]
        print(f"estimated training:    {metrics['estimated_training_time'] / 86400:.3f} days")
        if "flop_rate" in metrics:
            print(f"flop/s:                {metrics['flop_rate']:.6g} ({100 * metrics['peak_fraction']:.2f}% of peak)")
    return EXIT_OK


def _sweep_overrides(base, axis: str, value: int) -> List[str]:
    overrides = [f"{SWEEP_AXES[axis]}={value}"]
    workers = base.parallel.workers
    if axis == "g_inter" and workers is not None and workers % value == 0:
        overrides.append(f"parallel.g_data={workers // value}")
    return overrides


def _sweep_row(args, base, axis: str, value: int, seed: int) -> Dict[str, Any]:
    row: Dict[str, Any] = {column: "" for column in SWEEP_COLUMNS}
    row.update(axis=axis, value=value, seed=seed, status="ok")
    try:
        run = load_validated(args.config, list(args.set or []) + _sweep_overrides(base, axis, value))
        summary = _simulation_summary(run)
    except ConfigValidationError as e:
        logger.warning(f"Sweep point {axis}={value} is invalid: {e}")
        row.update(status="invalid", error="; ".join(v.code for v in e.violations))
        return row
    except (ValueError, RuntimeError) as e:
        logger.error(f"Sweep point {axis}={value} failed: {e}")
        row.update(status="error", error=str(e))
        return row

    report, counters = summary["report"], summary["counters"]
    p = run.parallel
    row.update(
        g_inter=p.g_inter, g_data=p.g_data, checkpoint_interval=p.checkpoint_interval,
        coarsening_k=p.coarsening_k, bucket_size=p.bucket_size,
        comm_comp_ratio=counters["comm_comp_ratio"],
        activation_units=ledger_for_run(run, optimized=True).activation_units,
        device_bytes_unoptimized=ledger_for_run(run, optimized=False).device_total_bytes,
        device_bytes_optimized=ledger_for_run(run, optimized=True).device_total_bytes,
    )
    for key in ("makespan", "inter_layer_time", "allreduce_optimizer_time", "sequential_allreduce_optimizer_time",
                "allreduce_calls", "collective_overhead_time", "warmup_idle_max", "p2p_bytes_per_worker",
                "flops_per_worker", "allreduce_bytes_per_worker"):
        row[key] = report[key]
    return row


def cmd_sweep(args, settings: Config) -> int:
    base = load_run_config(args.config, args.set or [])
    run = _resolve_seed(args, settings, load_validated(args.config, args.set or []))
    out_dir = Path(args.out or settings.output_dir)
    try:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        print(f"--values must be a comma-separated list of integers, got {args.values!r}", file=sys.stderr)
        return EXIT_VALIDATION
    if not values:
        print("--values is empty", file=sys.stderr)
        return EXIT_VALIDATION

    rows = []
    for value in values:
        logger.info(f"Sweep point {args.axis}={value}")
        rows.append(_sweep_row(args, base, args.axis, value, run.training.seed))

    path = out_dir / f"sweep_{args.axis}.csv"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            fh.write(f"# manifest: {_dumps(_manifest('sweep', args, run, out_dir))}\n")
            writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
    except OSError as e:
        logger.error(f"Failed to write sweep CSV {path}: {e}")
        raise
    logger.info(f"Wrote {len(rows)} sweep rows to {path}")
    print(f"{len(rows)} rows written to {path}")
    return EXIT_OK


def memory_report_text(run: ValidatedRun) -> str:
    unoptimized = ledger_for_run(run, optimized=False)
    optimized = ledger_for_run(run, optimized=True)
    lines = [
        f"phi (parameters per worker): {optimized.phi:,}",
        f"bucket size: {optimized.bucket_size:,}",
        f"activation units: {optimized.activation_units} x {optimized.bytes_per_unit:,} B",
        "",
        f"{'component':<18}{'unoptimized':>34}  {'':<8}{'optimized':>34}  residency",
    ]
    for before, after in zip(unoptimized.rows, optimized.rows):
        lines.append(f"{before.component:<18}{_format_bytes(before.bytes):>34}  {before.residency:<8}"
                     f"{_format_bytes(after.bytes):>34}  {after.residency}")
    ratio = unoptimized.device_total_bytes / optimized.device_total_bytes
    state_ratio = unoptimized.device_model_state_bytes / optimized.device_model_state_bytes
    lines += [
        "",
        f"model state (device) unoptimized: {_format_bytes(unoptimized.device_model_state_bytes)}",
        f"model state (device) optimized:   {_format_bytes(optimized.device_model_state_bytes)}",
        f"host bytes optimized:             {_format_bytes(optimized.host_bytes)}",
        f"total (device) unoptimized:       {_format_bytes(unoptimized.device_total_bytes)}",
        f"total (device) optimized:         {_format_bytes(optimized.device_total_bytes)}",
        f"model-state saving: {state_ratio:.3f}x, total saving: {ratio:.3f}x",
    ]
    return "\n".join(lines) + "\n"


def cmd_memory(args, settings: Config) -> int:
    run = _resolve_seed(args, settings, load_validated(args.config, args.set or []))
    out_dir = Path(args.out or settings.output_dir)
    text = memory_report_text(run)
    header = f"# manifest: {_dumps(_manifest('memory', args, run, out_dir))}\n"
    _write_text(out_dir / "memory_report.txt", header + text)
    print(text, end="")
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "train": cmd_train,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "memory": cmd_memory,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridtrain", description="Hybrid inter-layer x data-parallel training engine and simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser):
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        p.add_argument("--seed", type=int, default=None, help="run seed (defaults to HYBRIDTRAIN_SEED or training.seed)")
        p.add_argument("--out", default=None, help="output directory (defaults to HYBRIDTRAIN_OUTPUT_DIR)")

    common(sub.add_parser("validate", help="check a configuration and print the resolved run"))

    train = sub.add_parser("train", help="run numeric training on synthetic data")
    common(train)
    train.add_argument("--steps", type=int, default=None, help="number of training steps")
    train.add_argument("--oracle", action="store_true", help="compare losses against the serial reference")
    train.add_argument("--tolerance", type=float, default=1e-8, help="max per-step relative loss difference")
    train.add_argument("--trace", action="store_true", help="also export the fabric trace as JSON lines")

    common(sub.add_parser("simulate", help="simulate one batch and report timings"))

    sweep = sub.add_parser("sweep", help="simulate a range of values along one axis")
    common(sweep)
    sweep.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    sweep.add_argument("--values", required=True, help="comma-separated integers")

    common(sub.add_parser("memory", help="print the per-worker memory ledger"))
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    settings = Config()
    logging.basicConfig(level=settings.log_level, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args, settings)
    except ConfigFileError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except ConfigValidationError as e:
        _report_violations(e)
        return EXIT_VALIDATION
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
