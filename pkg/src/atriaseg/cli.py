"""Command-line entry point: synth, train, infer, evaluate.

Every subcommand takes --config PATH (a RunConfig JSON document) plus flag
overrides; flags win. Runs write their fully resolved configuration next to
their outputs. The ATRIASEG_OUT environment variable supplies a default
output root when --out is omitted.

Exit codes: 0 success, 2 configuration error, 3 data-integrity error,
4 runtime/training error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

from . import inference, metrics, synthgen, train as train_mod
from .config import RunConfig, load_run_config, write_resolved_config
from .errors import (
    CheckpointError,
    ConfigurationError,
    FormatError,
    IntegrityError,
    PipelineError,
    TrainingError,
)
from .network import load_models
from .volume_io import load_manifest, load_volume, save_volume

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


def _bool_flag(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {value!r}")


def _default_out(command: str, given: Optional[str]) -> Path:
    if given:
        return Path(given)
    root = os.environ.get("ATRIASEG_OUT")
    if root:
        return Path(root) / command
    raise ConfigurationError(f"--out is required (or set ATRIASEG_OUT) for '{command}'")


def _load_config(path: Optional[str]) -> RunConfig:
    return load_run_config(path) if path else RunConfig()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="atriaseg",
        description="Multi-task left-atrium segmentation pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    p.add_argument("--config", help="RunConfig JSON file")
    p.add_argument("--out", help="output dataset directory")
    p.add_argument("--cases", type=int, help="number of cases")
    p.add_argument("--seed", type=int, help="generator seed")
    p.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the network (optionally a bagging ensemble)")
    p.add_argument("--config", help="RunConfig JSON file")
    p.add_argument("--data", required=True, help="case manifest JSON")
    p.add_argument("--out", help="output run directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument(
        "--multitask", type=_bool_flag, default=None,
        help="false forces the classification weight to 0 (single-task ablation)",
    )
    p.add_argument("--bagging", type=int, default=0, metavar="N",
                   help="train N models on bootstrap resamples")
    p.add_argument("--resume", action="store_true", help="continue from last.ckpt in --out")
    p.add_argument("--strict-repro", action="store_true",
                   help="single-threaded math for byte-identical reruns")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict masks and ablation status for a manifest")
    p.add_argument("--config", help="RunConfig JSON file")
    p.add_argument("--data", required=True, help="case manifest JSON")
    p.add_argument("--out", help="output directory for predicted masks")
    p.add_argument("--checkpoint", action="append", required=True,
                   help="checkpoint path; repeat for an ensemble")
    p.add_argument("--no-postproc", action="store_true",
                   help="skip morphological closing and largest-component selection")
    p.add_argument("--workers", type=int, default=1, help="parallel cases")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="score predictions against manifest masks")
    p.add_argument("--config", help="RunConfig JSON file")
    p.add_argument("--data", required=True, help="case manifest JSON")
    p.add_argument("--pred", required=True, help="directory of predicted masks")
    p.add_argument("--out", help="report output directory")
    p.add_argument("--compare", action="append", default=[],
                   help="additional prediction directory for a side-by-side table")
    p.set_defaults(func=cmd_evaluate)

    return parser


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    if args.cases is not None:
        cfg.phantom = dataclasses.replace(cfg.phantom, n_cases=args.cases)
    if args.seed is not None:
        cfg.phantom = dataclasses.replace(cfg.phantom, seed=args.seed)
    cfg.phantom.validate()

    out_dir = _default_out("synth", args.out)
    if out_dir.exists() and any(out_dir.iterdir()) and not args.force:
        raise ConfigurationError(
            f"output directory {out_dir} is not empty; pass --force to overwrite"
        )
    manifest = synthgen.generate(cfg.phantom, out_dir)
    write_resolved_config(cfg, out_dir)
    print(manifest)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    t = cfg.train
    if args.epochs is not None:
        t = dataclasses.replace(t, epochs=args.epochs)
    if args.batch_size is not None:
        t = dataclasses.replace(t, batch_size=args.batch_size)
    if args.seed is not None:
        t = dataclasses.replace(t, seed=args.seed)
    if args.multitask is not None and not args.multitask:
        t = dataclasses.replace(t, cls_loss_weight=0.0)
    if args.strict_repro:
        t = dataclasses.replace(t, strict_repro=True)
    cfg.train = t

    records = load_manifest(args.data)
    out_dir = _default_out("train", args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, out_dir)

    if args.bagging:
        results = train_mod.train_bagging(
            records, cfg.train, cfg.network, out_dir, n_models=args.bagging
        )
        for r in results:
            print(f"{r.best_path} (val dice {r.best_val_dice:.4f} at epoch {r.best_epoch})")
    else:
        r = train_mod.train_loop(
            records, cfg.train, cfg.network, out_dir, resume=args.resume
        )
        print(f"{r.best_path} (val dice {r.best_val_dice:.4f} at epoch {r.best_epoch})")
        print(r.final_path)
    return EXIT_OK


def _infer_one(models, record, out_dir: Path, no_postproc: bool) -> dict:
    vol = load_volume(record.volume_path)
    start = time.perf_counter()
    probs, cls_prob, label = inference.run_case(models, vol)
    if no_postproc:
        mask = inference.threshold_argmax(probs)
    else:
        mask = inference.postprocess(probs)
    runtime_ms = (time.perf_counter() - start) * 1000.0
    save_volume(mask, out_dir / f"{record.case_id}.avl1")
    return {
        "case_id": record.case_id,
        "ablation_probability": cls_prob,
        "predicted_label": label,
        "runtime_ms": runtime_ms,
    }


def cmd_infer(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    models = load_models(args.checkpoint)
    records = load_manifest(args.data)
    out_dir = _default_out("infer", args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, out_dir)

    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            rows = list(
                pool.map(lambda r: _infer_one(models, r, out_dir, args.no_postproc), records)
            )
    else:
        rows = [_infer_one(models, r, out_dir, args.no_postproc) for r in records]

    for row in rows:
        print(
            f"{row['case_id']}: {row['predicted_label']} "
            f"(p={row['ablation_probability']:.3f}, {row['runtime_ms']:.0f} ms)"
        )
    (out_dir / "classification.json").write_text(json.dumps(rows, indent=2) + "\n")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    records = load_manifest(args.data)
    out_dir = _default_out("evaluate", args.out)
    report = metrics.evaluate_manifest(args.pred, records)
    metrics.save_report(report, out_dir)
    print(report.to_text(), end="")

    if args.compare:
        dirs = [Path(args.pred)] + [Path(p) for p in args.compare]
        reports = [report] + [metrics.evaluate_manifest(p, records) for p in dirs[1:]]
        table = metrics.comparison_text(reports, [str(d) for d in dirs])
        (Path(out_dir) / "comparison.txt").write_text(table)
        print(table, end="")
    return EXIT_OK


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, IntegrityError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, CheckpointError, PipelineError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
