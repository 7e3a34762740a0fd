"""Batch pipeline driver: prepare, train, fuse, eval, fraction-sweep, gradcheck.

Every command writes run_config.json (its full effective configuration) into
its output directory and emits nothing time-dependent, so identical flags
and seeds reproduce byte-identical outputs. Exit codes: 0 success, 2 usage
errors (argparse), 1 runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, net_from_checkpoint
from .data import (
    AugmentationConfig,
    DatasetManifest,
    dataset_from_manifest,
    fraction,
    partition_batches,
    scan_dataset,
    split,
    synth_dataset,
)
from .fusion import FusionSpec, enumerate_combinations, extract_backbone, fusion_forward, load_fusion
from .gradcheck import run_scope
from .metrics import TABLE_COLUMNS, evaluate
from .networks import RESOLUTION_BY_VARIANT, VARIANTS
from .training import TrainConfig, TrainingDivergedError, train_stage1, train_stage2, trace_to_csv

_DEFAULTS = TrainConfig()


# -- plumbing -------------------------------------------------------------------

def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_config(out: Path, args) -> None:
    payload = {k: (str(v) if isinstance(v, Path) else v)
               for k, v in sorted(vars(args).items()) if k != "func"}
    (out / "run_config.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _load_dataset(manifest_path):
    path = Path(manifest_path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    manifest = DatasetManifest.from_json(json.loads(path.read_text()))
    return dataset_from_manifest(manifest)


def _augmentation(args) -> AugmentationConfig | None:
    return None if args.no_augment else AugmentationConfig()


def _train_config(args) -> TrainConfig:
    return TrainConfig(learning_rate=args.learning_rate, l2=args.l2,
                       batch_size=args.batch_size, epochs=args.epochs,
                       seed=args.seed, patience=args.patience)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=_DEFAULTS.epochs)
    p.add_argument("--learning-rate", type=float, default=_DEFAULTS.learning_rate)
    p.add_argument("--l2", type=float, default=_DEFAULTS.l2)
    p.add_argument("--batch-size", type=int, default=_DEFAULTS.batch_size)
    p.add_argument("--seed", type=int, default=_DEFAULTS.seed)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--no-augment", action="store_true",
                   help="disable training-stream augmentation")


def _load_backbones(ckpt_dir: Path, members: tuple[str, ...]):
    missing = [str(ckpt_dir / f"{m}.ckpt") for m in members
               if not (ckpt_dir / f"{m}.ckpt").is_file()]
    if missing:
        raise FileNotFoundError(
            "missing member checkpoints: " + ", ".join(missing))
    return [extract_backbone(Checkpoint.load(ckpt_dir / f"{m}.ckpt"),
                             expect_variant=m) for m in members]


def _metric_cells(report) -> list[str]:
    return list(report.table_row())


def _print_report(label: str, report) -> None:
    print(report.to_json())
    header = ("combination",) + tuple(c.capitalize() for c in TABLE_COLUMNS)
    print("  ".join(header))
    print("  ".join([label] + _metric_cells(report)))


# -- commands -------------------------------------------------------------------

def cmd_prepare(args) -> int:
    out = _out_dir(args)
    if args.synthetic is not None:
        if args.synthetic < 2:
            raise ValueError("--synthetic needs at least 2 samples")
        dataset = synth_dataset(args.synthetic, seed=args.seed)
        manifest, skipped = dataset.manifest, []
    else:
        root = Path(args.data)
        if not root.is_dir():
            raise FileNotFoundError(f"dataset root not found: {root}")
        manifest, skipped = scan_dataset(root)
        if not manifest.records:
            raise ValueError(f"no usable images under {root}")
    manifest = split(manifest, seed=args.seed)
    (out / "manifest.json").write_text(
        json.dumps(manifest.to_json(), sort_keys=True, indent=2) + "\n")
    _write_run_config(out, args)

    labels = [r.label for r in manifest.records]
    train_n = len(manifest.partition_ids("train"))
    test_n = len(manifest.partition_ids("test"))
    print(f"samples: {len(labels)} (positive {sum(labels)}, "
          f"negative {len(labels) - sum(labels)})")
    print(f"split: {train_n} train / {test_n} test")
    if skipped:
        print(f"skipped {len(skipped)} unreadable files")
    print(f"manifest: {out / 'manifest.json'}")
    return 0


def cmd_train(args) -> int:
    out = _out_dir(args)
    dataset = _load_dataset(args.manifest)
    cfg = _train_config(args)
    trace_path = out / f"{args.variant}-trace.csv"
    try:
        ckpt, trace = train_stage1(args.variant, dataset, cfg,
                                   augment_cfg=_augmentation(args))
    except TrainingDivergedError as exc:
        trace_path.write_text(trace_to_csv(exc.trace))
        _write_run_config(out, args)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    ckpt_path = out / f"{args.variant}.ckpt"
    ckpt.save(ckpt_path)
    trace_path.write_text(trace_to_csv(trace))
    _write_run_config(out, args)
    print(f"best epoch {ckpt.provenance['best_epoch']} "
          f"val_acc {ckpt.provenance['val_acc']:.4f}")
    print(f"checkpoint: {ckpt_path}")
    print(f"trace: {trace_path}")
    return 0


def _fuse_one(spec: FusionSpec, ckpt_dir: Path, dataset, cfg, augment_cfg,
              out: Path):
    backbones = _load_backbones(ckpt_dir, spec.members)
    ckpt, trace = train_stage2(spec, backbones, dataset, cfg,
                               augment_cfg=augment_cfg)
    ckpt_path = out / f"fusion-{spec.label}.ckpt"
    ckpt.save(ckpt_path)
    (out / f"fusion-{spec.label}-trace.csv").write_text(trace_to_csv(trace))
    return ckpt, backbones, ckpt_path


def _eval_fusion(ckpt: Checkpoint, dataset, partition: str, batch_size: int):
    spec, backbones, head = load_fusion(ckpt)
    stream = partition_batches(dataset, partition, spec.resolutions, batch_size)
    return evaluate(
        lambda group: fusion_forward(backbones, head, group).data, stream)


def cmd_fuse(args) -> int:
    out = _out_dir(args)
    dataset = _load_dataset(args.manifest)
    cfg = _train_config(args)
    ckpt_dir = Path(args.ckpt_dir)
    augment_cfg = _augmentation(args)

    if args.all_combinations:
        rows = []
        for spec in enumerate_combinations():
            ckpt, _, _ = _fuse_one(spec, ckpt_dir, dataset, cfg, augment_cfg, out)
            report = _eval_fusion(ckpt, dataset, "test", cfg.batch_size)
            rows.append([spec.label] + _metric_cells(report))
            print("  ".join(rows[-1]))
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(("combination",) + TABLE_COLUMNS)
        writer.writerows(rows)
        (out / "combinations.csv").write_text(buf.getvalue())
        _write_run_config(out, args)
        print(f"table: {out / 'combinations.csv'}")
        return 0

    spec = FusionSpec(members=tuple(args.members.split(",")))
    ckpt, _, ckpt_path = _fuse_one(spec, ckpt_dir, dataset, cfg, augment_cfg, out)
    _write_run_config(out, args)
    print(f"best epoch {ckpt.provenance['best_epoch']} "
          f"val_acc {ckpt.provenance['val_acc']:.4f}")
    print(f"checkpoint: {ckpt_path}")
    return 0


def cmd_eval(args) -> int:
    ckpt_path = Path(args.ckpt)
    if not ckpt_path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt_path}")
    ckpt = Checkpoint.load(ckpt_path)
    dataset = _load_dataset(args.manifest)

    if ckpt.kind == "fusion":
        if args.resolution is not None:
            raise ValueError("fusion checkpoints read their member "
                             "resolutions from the file; drop --resolution")
        report = _eval_fusion(ckpt, dataset, args.split, args.batch_size)
        label = ckpt.variant
    else:
        net = net_from_checkpoint(ckpt)
        native = net.input_shape[0]
        if args.resolution is not None and args.resolution != native:
            raise ValueError(f"checkpoint expects {native}x{native} input "
                             f"but --resolution asked for {args.resolution}")
        stream = partition_batches(dataset, args.split, native, args.batch_size)
        report = evaluate(
            lambda batch: net.forward(batch.images, training=False).data,
            stream)
        label = ckpt.variant

    _print_report(label, report)
    if args.out is not None:
        out = _out_dir(args)
        (out / "report.json").write_text(report.to_json() + "\n")
        _write_run_config(out, args)
    return 0


def cmd_fraction_sweep(args) -> int:
    out = _out_dir(args)
    dataset = _load_dataset(args.manifest)
    cfg = _train_config(args)
    members = tuple(args.members.split(","))
    spec = FusionSpec(members=members)
    augment_cfg = _augmentation(args)
    fractions = sorted(float(f) for f in args.fractions.split(","))

    rows = []
    for p in fractions:
        sub = dataset.with_manifest(fraction(dataset.manifest, p, seed=cfg.seed))
        backbones = []
        for member in spec.members:
            ckpt, _ = train_stage1(member, sub, cfg, augment_cfg=augment_cfg)
            backbones.append(extract_backbone(ckpt))
        fused_ckpt, _ = train_stage2(spec, backbones, sub, cfg,
                                     augment_cfg=augment_cfg)
        report = _eval_fusion(fused_ckpt, dataset, "test", cfg.batch_size)
        rows.append([f"{p:g}"] + _metric_cells(report))
        print("  ".join(rows[-1]))

    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(("fraction",) + TABLE_COLUMNS)
    writer.writerows(rows)
    (out / "fraction_sweep.csv").write_text(buf.getvalue())
    _write_run_config(out, args)
    print(f"table: {out / 'fraction_sweep.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_scope(args.scope)
    failures = []
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.target:<18} worst {r.worst:.3e}  tol {r.tolerance:.0e}  "
              f"({r.seeds} seeds)  {status}")
        if not r.passed:
            failures.append(r.target)
    if failures:
        print("failed: " + ", ".join(failures), file=sys.stderr)
        return 1
    return 0


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dilationnet",
        description="multi-resolution dilated-convolution pipeline")
    default_out = os.environ.get("DILATIONNET_OUT", "runs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="scan or synthesize a dataset and split it")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="root with Parasitized/ and Uninfected/")
    src.add_argument("--synthetic", type=int, default=None,
                     help="generate this many synthetic samples instead")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=default_out)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="stage-1: one variant at its native resolution")
    p.add_argument("--variant", choices=VARIANTS, required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=default_out)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fuse", help="stage-2: train a fusion head on frozen backbones")
    p.add_argument("--members", default="A,B,C,D",
                   help="comma-separated variants, e.g. A,B")
    p.add_argument("--all-combinations", action="store_true",
                   help="run every 2..4-member combination and emit one table")
    p.add_argument("--ckpt-dir", required=True,
                   help="directory holding stage-1 checkpoints named A.ckpt etc")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=default_out)
    _add_train_flags(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset partition")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--batch-size", type=int, default=_DEFAULTS.batch_size)
    p.add_argument("--resolution", type=int, default=None,
                   help="assert the evaluation stream resolution")
    p.add_argument("--out", default=None,
                   help="also write report.json here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fraction-sweep",
                       help="train-and-fuse at growing training fractions")
    p.add_argument("--manifest", required=True)
    p.add_argument("--fractions",
                   default="0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")
    p.add_argument("--members", default="A,B")
    p.add_argument("--out", default=default_out)
    _add_train_flags(p)
    p.set_defaults(func=cmd_fraction_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference backward verification")
    p.add_argument("--scope", choices=("ops", "block", "net"), required=True)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "members", None) is not None and args.command == "fuse" \
            and not args.all_combinations and len(args.members.split(",")) < 2:
        parser.error("--members needs at least two variants, e.g. A,B")
    try:
        return args.func(args)
    except (CheckpointError, TrainingDivergedError, FileNotFoundError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
