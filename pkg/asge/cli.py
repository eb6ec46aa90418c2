#!/usr/bin/env python3
"""asge: train, evaluate and inspect layer-local CNNs."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import statistics
import sys
from pathlib import Path
from typing import Sequence

import yaml

from . import __version__
from .checkpoint import load_checkpoint, restore_network
from .config import RunConfig, load_config, write_resolved
from .data import load_splits
from .diagnostics import goodness_dump, summarize, write_csv
from .errors import AsgeError, ConfigurationError, UsageError
from .gradcheck import GradcheckReport, default_spec, run_gradcheck
from .network import STRATEGIES, ArchSpec, LayerSpec, build_network
from .trainer import EvalReport, RunResult, Splits, evaluate, train

logger = logging.getLogger("asge")

LOG_FORMAT = "asge: %(levelname)s %(name)s: %(message)s"
SWEEP_PARAMETERS = {"alpha": "arch.alpha", "pooling": "arch.pooling", "strategy": "arch.strategy"}
SWEEP_COLUMNS = ("value", "test_acc", "test_acc_std", "wall_seconds", "classifier_params", "runs")


# ── Output formatting ────────────────────────────────────────


def _pct(x: float | None) -> str:
    return "n/a" if x is None else f"{100.0 * x:.2f}%"


def print_eval_report(report: EvalReport) -> None:
    print(f"{report.split} split, {report.count} samples, strategy {report.strategy}\n")
    print("  Per-layer projection accuracy:")
    for i, acc in enumerate(report.per_layer_acc, start=1):
        mark = "  <- best" if i == report.best_layer else ""
        print(f"    layer {i:<2} {_pct(acc):>8}{mark}")
    print()
    print(f"  Top-1: {_pct(report.top1)}")
    if report.top5 is not None:
        print(f"  Top-5: {_pct(report.top5)}")
    print(f"  Classifier parameters: {report.classifier_params}\n")


def print_run_summary(result: RunResult) -> None:
    print(f"Trained {result.epochs} epoch(s) in {result.wall_seconds:.1f}s")
    if result.best_epoch is not None:
        print(f"  Best validation accuracy {_pct(result.best_val_acc)} at epoch {result.best_epoch}")
    if result.best_checkpoint is not None:
        print(f"  Checkpoint: {result.best_checkpoint}")
    if result.metrics_path is not None:
        print(f"  Metrics:    {result.metrics_path}")
    print()


def print_gradcheck_report(report: GradcheckReport) -> None:
    print(f"Gradient check (float64, threshold {report.threshold:g})\n")
    for r in report.layers:
        status = "ok" if r.passed else "FAIL"
        where = f" at {r.worst_param}{r.worst_index}" if r.worst_param else ""
        print(
            f"  layer {r.layer}: {status:<4} max rel error {r.max_rel_error:.3e}{where}"
            f" ({r.checked} checked, {r.skipped} skipped)"
        )
    print()


def print_goodness_summary(summary: dict) -> None:
    print(f"Goodness distributions at layer {summary['layer']}\n")
    for variant, s in summary["variants"].items():
        q = s["quantiles"]
        print(f"  {variant:<7} mean {s['mean']:.4g}  std {s['std']:.4g}  median {q['q50']:.4g}  (n={s['count']})")
    print()


def _report_json(report: dict) -> str:
    """Serialize a report dict to a stable JSON string."""
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def _emit_report(report: dict, *, save_path: Path | None, as_json: bool) -> None:
    if save_path:
        save_path.write_text(_report_json(report), encoding="utf-8")
    if as_json:
        sys.stdout.write(_report_json(report))


# ── Shared plumbing ──────────────────────────────────────────


def _run_config(ns: argparse.Namespace, fallback_dir: Path | None = None) -> RunConfig:
    path = ns.config
    if path is None and fallback_dir is not None and (fallback_dir / "resolved.json").exists():
        path = fallback_dir / "resolved.json"
    if path is None:
        raise UsageError("--config is required")
    return load_config(
        path,
        ns.override,
        seed=ns.seed,
        deterministic=ns.deterministic,
        pipeline=ns.pipeline,
        threads=ns.threads,
        data_dir=ns.data_dir,
        out_dir=ns.out_dir,
    )


def _stats_path(config: RunConfig) -> Path:
    first = next(iter(config.dataset.paths.values()))
    first = first[0] if isinstance(first, list) else first
    ds = config.dataset
    return Path(first).parent / f"asge-stats-{ds.name}-seed{config.training.seed}-val{ds.val_count}.json"


def _load_splits(config: RunConfig) -> Splits:
    ds = config.dataset
    train, val, test = load_splits(
        ds.name, ds.paths, val_count=ds.val_count, seed=config.training.seed, stats_path=_stats_path(config)
    )
    return Splits(train, val, test)


def _eval_threads(config: RunConfig) -> int:
    return 1 if config.training.deterministic else config.training.threads


def _train_run(config: RunConfig, resume: Path | None = None) -> tuple[RunResult, EvalReport]:
    out_dir = Path(config.output.dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved(config, out_dir)
    splits = _load_splits(config)
    network = None
    if resume is None:
        t = config.training
        network = build_network(
            config.arch_spec(), t.seed, optimizer=t.optimizer, weight_decay=t.weight_decay, precision=t.precision
        )
    result = train(network, splits, config, resume=resume)
    best = restore_network(load_checkpoint(result.best_checkpoint))
    report = evaluate(best, splits.test, config.training.batch_size, threads=_eval_threads(config))
    (out_dir / "test-report.json").write_text(_report_json(report.to_dict()), encoding="utf-8")
    return result, report


# ── Commands ─────────────────────────────────────────────────


def cmd_train(ns: argparse.Namespace) -> None:
    config = _run_config(ns)
    logger.info("training %s on %s into %s", config.arch.preset, config.dataset.name, config.output.dir)
    result, report = _train_run(config, resume=ns.resume)
    if ns.as_json:
        _emit_report(
            {
                "best_epoch": result.best_epoch,
                "best_val_acc": result.best_val_acc,
                "checkpoint": str(result.best_checkpoint),
                "metrics": str(result.metrics_path),
                "test": report.to_dict(),
            },
            save_path=None,
            as_json=True,
        )
    else:
        print_run_summary(result)
        print_eval_report(report)


def cmd_eval(ns: argparse.Namespace) -> None:
    data = load_checkpoint(ns.checkpoint)
    network = restore_network(data)
    strategy = ns.strategy or network.spec.strategy
    best_layer = ns.best_layer or network.best_layer
    if strategy == "best" and best_layer is None:
        raise UsageError("strategy best needs a recorded best layer; this checkpoint has none")
    config = _run_config(ns, fallback_dir=ns.checkpoint.parent)
    expected = config.arch_spec().with_strategy(data.arch.strategy)
    if expected.geometry_hash() != data.geometry_hash:
        raise ConfigurationError(
            f"checkpoint arch hash {data.geometry_hash.hex()} does not match config arch hash "
            f"{expected.geometry_hash().hex()}",
            field="arch",
        )
    splits = _load_splits(config)
    dataset = {"train": splits.train, "val": splits.val, "test": splits.test}[ns.split]
    report = evaluate(
        network,
        dataset,
        config.training.batch_size,
        threads=_eval_threads(config),
        strategy=strategy,
        best_layer=best_layer,
    )
    save = ns.save or ns.checkpoint.parent / f"eval-{ns.split}-{strategy}.json"
    _emit_report(report.to_dict(), save_path=save, as_json=ns.as_json)
    if not ns.as_json:
        print_eval_report(report)


def _parse_channels(text: str) -> list[int]:
    try:
        channels = [int(c) for c in text.split(",") if c.strip()]
    except ValueError:
        raise UsageError(f"--channels must be comma-separated integers (got {text!r})") from None
    if len(channels) < 2:
        raise UsageError("--channels needs at least 2 layers")
    return channels


def cmd_gradcheck(ns: argparse.Namespace) -> None:
    spec = default_spec(ns.classes)
    if ns.channels is not None or ns.size is not None:
        channels = _parse_channels(ns.channels) if ns.channels else [ls.out_channels for ls in spec.layers]
        size = ns.size or spec.input_shape[1]
        spec = ArchSpec(tuple(LayerSpec(c) for c in channels), ns.classes, (3, size, size), alpha=1.0, strategy="last")
    report = run_gradcheck(spec, ns.seed, batch=ns.batch, zero_input=ns.zero_input, threshold=ns.threshold)
    if ns.as_json:
        _emit_report(report.to_dict(), save_path=None, as_json=True)
    else:
        print_gradcheck_report(report)
    report.raise_for_failure()


def cmd_goodness_dump(ns: argparse.Namespace) -> None:
    data = load_checkpoint(ns.checkpoint)
    network = restore_network(data)
    config = _run_config(ns, fallback_dir=ns.checkpoint.parent)
    splits = _load_splits(config)
    dataset = {"train": splits.train, "val": splits.val, "test": splits.test}[ns.split]
    dump = goodness_dump(network, dataset.images[: ns.batch_size], ns.layer)

    if ns.out is not None:
        with open(ns.out, "w", encoding="utf-8", newline="") as fh:
            rows = write_csv(dump, fh)
        logger.info("wrote %d rows to %s", rows, ns.out)
    elif not ns.as_json:
        write_csv(dump, sys.stdout)
    summary = summarize(dump)
    if ns.as_json:
        _emit_report(summary, save_path=None, as_json=True)
    elif ns.out is not None:
        print_goodness_summary(summary)


def _sweep_row(value: object, runs: list[tuple[RunResult, EvalReport]]) -> dict:
    accs = [r.top1 for _, r in runs]
    return {
        "value": value,
        "test_acc": statistics.fmean(accs),
        "test_acc_std": statistics.stdev(accs) if len(accs) > 1 else 0.0,
        "wall_seconds": statistics.fmean(res.wall_seconds for res, _ in runs),
        "classifier_params": runs[0][1].classifier_params,
        "runs": len(runs),
    }


def cmd_sweep(ns: argparse.Namespace) -> None:
    if ns.parameter not in SWEEP_PARAMETERS:
        raise UsageError(f"unknown sweep parameter {ns.parameter!r} (expected one of {', '.join(SWEEP_PARAMETERS)})")
    key = SWEEP_PARAMETERS[ns.parameter]
    base = _run_config(ns)
    seeds = ns.seeds or [base.training.seed]
    root = Path(base.output.dir)
    rows = []
    for raw in ns.values:
        value = yaml.safe_load(raw)
        runs = []
        for seed in seeds:
            run_ns = argparse.Namespace(**{**vars(ns), "seed": seed, "out_dir": root / f"{ns.parameter}-{raw}" / f"seed-{seed}"})
            run_ns.override = [*ns.override, f"{key}={raw}"]
            config = _run_config(run_ns)
            logger.info("sweep %s=%s seed %d", ns.parameter, raw, seed)
            runs.append(_train_run(config))
        rows.append(_sweep_row(value, runs))

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    (root / f"sweep-{ns.parameter}.csv").write_text(buf.getvalue(), encoding="utf-8")
    if ns.as_json:
        _emit_report({"parameter": ns.parameter, "seeds": seeds, "rows": rows}, save_path=None, as_json=True)
    else:
        sys.stdout.write(buf.getvalue())


# ── Main ─────────────────────────────────────────────────────


def _config_flags() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", type=Path, help="Run config (YAML or a resolved.json)")
    parent.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override a config value (repeatable; value parsed as YAML)",
    )
    parent.add_argument("--data-dir", type=Path, help="Root for relative dataset paths (default: $ASGE_DATA_DIR)")
    parent.add_argument("--out-dir", type=Path, help="Output directory (overrides output.dir)")
    parent.add_argument("--seed", type=int, help="Run seed (overrides training.seed)")
    parent.add_argument("--deterministic", action="store_true", default=None, help="Bit-reproducible mode")
    parent.add_argument("--pipeline", action="store_true", default=None, help="Layer-parallel pipelined training")
    parent.add_argument("--threads", type=int, help="Workers for validation/evaluation sharding")
    parent.add_argument("--json", action="store_true", dest="as_json", help="Print machine-readable JSON")
    return parent


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="asge",
        description="Backprop-free CNN training with spatial goodness and frozen random projections.",
    )
    parser.add_argument("--version", action="version", version=f"asge {__version__}")
    vgroup = parser.add_mutually_exclusive_group()
    vgroup.add_argument("--quiet", action="store_true", help="Only log warnings and errors")
    vgroup.add_argument("--verbose", action="store_true", help="Log debug detail (stages, checkpoints)")
    sub = parser.add_subparsers(dest="command", required=True)
    flags = _config_flags()

    p = sub.add_parser("train", parents=[flags], help="Train a network from a config")
    p.add_argument("--resume", type=Path, help="Continue from a checkpoint")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", parents=[flags], help="Evaluate a checkpoint")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--split", choices=("test", "val", "train"), default="test")
    p.add_argument("--strategy", choices=STRATEGIES, help="Prediction strategy (default: the checkpoint's)")
    p.add_argument("--best-layer", type=int, help="Override the recorded best layer (1-based)")
    p.add_argument("--save", type=Path, help="Where to write the JSON report")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("gradcheck", help="Finite-difference check of the local gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--channels", help="Comma-separated channels per layer (default: 4,8; at most 8 each)")
    p.add_argument("--size", type=int, help="Input height and width (default: 8)")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--zero-input", action="store_true", help="Use an all-zero input batch")
    p.add_argument("--json", action="store_true", dest="as_json", help="Print machine-readable JSON")
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("goodness-dump", parents=[flags], help="Goodness before and after each pooling kind")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--layer", type=int, required=True, help="1-based layer followed by a pool")
    p.add_argument("--batch-size", type=int, default=64, help="Samples taken from the start of the split")
    p.add_argument("--split", choices=("test", "val", "train"), default="test")
    p.add_argument("--out", type=Path, help="CSV destination (default: stdout)")
    p.set_defaults(handler=cmd_goodness_dump)

    p = sub.add_parser("sweep", parents=[flags], help="One training per value of a parameter")
    p.add_argument("parameter", help=f"One of: {', '.join(SWEEP_PARAMETERS)}")
    p.add_argument("values", nargs="+")
    p.add_argument("--seeds", type=int, nargs="+", help="Repeat every value over these seeds")
    p.set_defaults(handler=cmd_sweep)
    return parser


def _configure_logging(ns: argparse.Namespace) -> None:
    level = logging.DEBUG if ns.verbose else logging.WARNING if ns.quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr)


def main(argv: Sequence[str] | None = None) -> None:
    parser = build_parser()
    ns = parser.parse_args(argv)
    _configure_logging(ns)
    try:
        ns.handler(ns)
    except AsgeError as exc:
        sys.stderr.write(f"asge: {exc.kind}-error: {exc}\n")
        raise SystemExit(exc.exit_code) from None
    except OSError as exc:
        where = exc.filename if exc.filename is not None else ""
        sys.stderr.write(f"asge: io-error: {where}: {exc.strerror or exc}\n")
        raise SystemExit(1) from None


if __name__ == "__main__":
    main()
