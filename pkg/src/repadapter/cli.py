"""Command-line entry point: train, merge, verify, bench, count-params, ablate.

Exit codes: 0 success, 1 verification outside tolerance, 2 bad input
(missing/malformed config, unreadable or mismatched checkpoints), 3 adapters
that cannot be merged.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench as benchmod
from .ablation import format_rows, run_ablation
from .adapters import ConfigError, count_params, format_millions
from .checkpoint import CheckpointError, load_model, save_model
from .config import load_config
from .nn import cast
from .reparam import (NonMergeableError, check_mergeable, compare_outputs, merge_model, probe_batch,
                      strip_adapters)
from .train import train_adapters

log = logging.getLogger("repadapter")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_UNMERGEABLE = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _config(path):
    try:
        return load_config(path)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    except ConfigError as exc:
        raise UsageError(f"invalid config: {exc}") from None


def _model(path):
    try:
        return load_model(path)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {path}") from None
    except CheckpointError as exc:
        raise UsageError(str(exc)) from None


def report_paths(path: Path) -> tuple[Path, Path]:
    if path.suffix == ".json":
        return path.with_suffix(".txt"), path
    return path, path.with_suffix(path.suffix + ".json") if path.suffix else path.with_suffix(".json")


def cmd_train(args) -> int:
    cfg = _config(args.config)
    model = cfg.build_model()
    metrics = args.metrics or str(args.out) + ".metrics.jsonl"
    model, records = train_adapters(model, cfg.task, cfg.train, metrics)
    save_model(args.out, model)
    last = records[-1] if records else None
    if last:
        print(f"trained {last.step} steps: loss {last.loss:.4f} train_acc {last.train_acc:.3f} "
              f"val_acc {last.val_acc:.3f}")
    print(f"checkpoint: {args.out}\nmetrics: {metrics}")
    return EXIT_OK


def cmd_merge(args) -> int:
    model = _model(args.inp)
    try:
        check_mergeable(model)
    except NonMergeableError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for site in exc.sites:
            print(f"  {site}", file=sys.stderr)
        return EXIT_UNMERGEABLE
    probe = probe_batch(model, args.probes, args.seed)
    try:
        merged, report = merge_model(model, probe, allow_approximate=args.allow_approximate)
    except NonMergeableError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNMERGEABLE
    save_model(args.out, merged)
    text_path, json_path = report_paths(Path(args.report))
    text_path.write_text(report.to_text())
    json_path.write_text(report.to_json())
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_verify(args) -> int:
    a, b = _model(args.a), _model(args.b)
    if a.input_shape() != b.input_shape():
        raise UsageError(f"input shapes differ: {a.input_shape()} vs {b.input_shape()}")
    rng = np.random.default_rng(args.seed)
    x = rng.standard_normal((args.probes,) + a.input_shape())
    ya, yb = a.forward(x.astype(a.dtype)), b.forward(x.astype(b.dtype))
    if ya.shape != yb.shape:
        raise UsageError(f"output shapes differ: {ya.shape} vs {yb.shape}")
    abs_err, rel_err = compare_outputs(ya, yb)
    if args.tol is not None:
        ok, rule = abs_err <= args.tol, f"max_abs_err <= {args.tol:g}"
    elif a.dtype == np.float64 and b.dtype == np.float64:
        ok, rule = abs_err <= 1e-12, "max_abs_err <= 1e-12 (float64 default)"
    else:
        ok, rule = rel_err <= 1e-5, "max_rel_err <= 1e-05 (float32 default)"
    print(f"probes: {args.probes} seed: {args.seed}")
    print(f"max_abs_err: {abs_err:.3e}\nmax_rel_err: {rel_err:.3e}")
    print(f"{'PASS' if ok else 'FAIL'}: {rule}")
    return EXIT_OK if ok else EXIT_FAIL


def bench_variants(model) -> dict:
    variants = {"plain": strip_adapters(model)}
    if model.adapter_sites():
        variants["adapter"] = model
        try:
            variants["merged"] = merge_model(model)[0]
        except NonMergeableError as exc:
            log.warning("skipping merged variant: %s", exc)
    return variants


def cmd_bench(args) -> int:
    if args.reps < benchmod.MIN_REPS:
        raise UsageError(f"--reps must be at least {benchmod.MIN_REPS}")
    model = _model(args.inp)
    if args.dtype != "native":
        model = cast(model, np.dtype(args.dtype))
    batches = [int(b) for b in args.batch.split(",")]
    results = benchmod.bench(bench_variants(model), batches, args.reps, args.warmup, args.seed, args.threads)
    sys.stdout.write(benchmod.format_table(results))
    print(f"threads: {args.threads} (timings are CPU wall-clock; compare variants relatively)")
    if args.json:
        Path(args.json).write_text(json.dumps([r.to_dict() for r in results], indent=2))
    return EXIT_OK


def cmd_count_params(args) -> int:
    cfg = _config(args.config)
    n = count_params(cfg.adapter, cfg.model["depth"], cfg.width, cfg.model["n_classes"], args.include_head)
    print(f"{n} ({format_millions(n)})")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args.config)
    try:
        rows = run_ablation(cfg, train=False if args.params_only else None)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    text = format_rows(rows)
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="repadapter", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train adapters on the synthetic task")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", help="metrics log path (default: <out>.metrics.jsonl)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("merge", help="fold adapters into the backbone")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--allow-approximate", action="store_true")
    p.add_argument("--probes", type=int, default=16)
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("verify", help="compare two checkpoints on seeded random probes")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--probes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=None)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="time plain / adapter / merged forward passes")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--batch", default="1,4,16")
    p.add_argument("--reps", type=int, default=50)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", default="float32", choices=["float32", "float64", "native"])
    p.add_argument("--json")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("count-params", help="count adapter parameters for a config")
    p.add_argument("--config", required=True)
    p.add_argument("--include-head", action="store_true")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("ablate", help="run the ablation sweeps")
    p.add_argument("--config", required=True)
    p.add_argument("--params-only", action="store_true", help="skip training; report counts only")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
