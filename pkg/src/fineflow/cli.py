"""Command-line entry point.

Subcommands: ingest, split, synth, train, finetune, evaluate, predict,
report. Exit codes: 0 success, 1 usage/config error, 2 data error,
3 numeric failure. Diagnostics go to stderr; data goes to files under the
declared output path (or stdout where noted). All file outputs are
byte-deterministic for fixed inputs and seed; wall-clock timings are
therefore reported on stderr only, and the prediction_seconds field in
metrics files is fixed at 0.0.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from .config import load_run_config, resolve_seed
from .data import (
    ingest_directory,
    read_split,
    stratified_split,
    synth_dataset,
    write_manifest,
    write_split,
)
from .errors import ConfigError, DataError, FineFlowError, NumericError
from .image import ImageU8, decode_file, encode_ppm
from .metrics import build_report, write_confusion_csv, write_report
from .model import PipelineConfig, predict
from .train import (
    TrainLog,
    build_for_dataset,
    checkpoint_load,
    checkpoint_save,
    evaluate,
    pretrain_then_finetune,
    train,
)

USAGE_EXIT, DATA_EXIT, NUMERIC_EXIT = 1, 2, 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); the contract is 1
        raise _UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="fineflow", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("ingest", help="directory tree -> manifest CSV")
    sp.add_argument("--data", required=True, help="root with one subdirectory per class")
    sp.add_argument("--out", required=True, help="manifest CSV path")

    sp = sub.add_parser("split", help="stratified train/val/test split CSV")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ratios", default="0.8,0.1,0.1")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("synth", help="write a synthetic texture dataset")
    sp.add_argument("--classes", type=int, default=4)
    sp.add_argument("--per-class", type=int, default=50)
    sp.add_argument("--side", type=int, default=64)
    sp.add_argument("--noise", type=float, default=0.1)
    sp.add_argument("--style", type=int, default=0, choices=(0, 1))
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", required=True, help="dataset directory to create")

    sp = sub.add_parser("train", help="from-scratch training run from a config")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("finetune", help="pretrain on source, fine-tune on target")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("evaluate", help="metrics for a checkpoint on a split part")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", required=True)
    sp.add_argument("--part", default="test", choices=("train", "val", "test"))
    sp.add_argument("--channel-order", default="rgb", choices=("rgb", "bgr"))
    sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("predict", help="labels TSV for image files")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--channel-order", default="rgb", choices=("rgb", "bgr"))
    sp.add_argument("--out", default=None, help="TSV path (stdout when omitted)")
    sp.add_argument("images", nargs="+")

    sp = sub.add_parser("report", help="metrics JSON from a predictions CSV")
    sp.add_argument("--predictions", required=True, help="CSV with header predicted,actual")
    sp.add_argument("--class-names", default=None, help="comma-separated names")
    sp.add_argument("--out", required=True, help="output directory")
    return p


def _ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _cmd_ingest(args) -> int:
    ds = ingest_directory(args.data)
    write_manifest(ds, args.out)
    print(f"wrote manifest for {len(ds)} samples, {ds.num_classes} classes: {args.out}",
          file=sys.stderr)
    return 0


def _cmd_split(args) -> int:
    parts = args.ratios.split(",")
    if len(parts) != 3:
        raise ConfigError(f"--ratios needs three comma-separated values, got {args.ratios!r}")
    ratios = tuple(float(x) for x in parts)
    ds = ingest_directory(args.data)
    splits = stratified_split(ds, ratios, resolve_seed(args.seed))
    write_split(splits, args.out)
    print(f"split {len(ds)} samples into {len(splits.train)}/{len(splits.validation)}"
          f"/{len(splits.test)}: {args.out}", file=sys.stderr)
    return 0


def _cmd_synth(args) -> int:
    seed = resolve_seed(args.seed)
    ds = synth_dataset(args.classes, args.per_class, args.side, args.noise,
                       seed, style=args.style)
    root = _ensure_dir(args.out)
    for cls in ds.class_names:
        _ensure_dir(os.path.join(root, cls))
    counters = [0] * ds.num_classes
    for img, label in ds.samples:
        assert isinstance(img, ImageU8)
        fname = os.path.join(root, ds.class_names[label], f"{counters[label]:04d}.ppm")
        with open(fname, "wb") as fh:
            fh.write(encode_ppm(img))
        counters[label] += 1
    print(f"wrote {len(ds)} images under {root}", file=sys.stderr)
    return 0


def _train_artifacts(m, ds, splits, pipe, out_dir, log: TrainLog) -> None:
    log.to_csv(os.path.join(out_dir, "train_log.csv"))
    ckpt = os.path.join(out_dir, "model.ckpt")
    checkpoint_save(m, ckpt)
    # Metrics come from the saved checkpoint so a later `evaluate` on the
    # same file reproduces them byte-for-byte.
    loaded = checkpoint_load(ckpt)
    started = time.perf_counter()
    pred, act, _ = evaluate(loaded, ds, splits.test, pipe)
    elapsed = time.perf_counter() - started
    report = build_report(pred, act, ds.num_classes, ds.class_names)
    write_report(report, os.path.join(out_dir, "metrics.json"))
    write_confusion_csv(report.confusion, os.path.join(out_dir, "confusion.csv"))
    print(f"test accuracy {report.accuracy_pct:.2f}% over {report.n} samples "
          f"(prediction took {elapsed:.3f}s)", file=sys.stderr)


def _cmd_train(args) -> int:
    cfg = load_run_config(args.config, seed_override=args.seed)
    if cfg.data.root is None:
        raise ConfigError("train needs data.root in the config")
    out_dir = _ensure_dir(cfg.output)
    ds = ingest_directory(cfg.data.root)
    m = build_for_dataset(cfg.backbone, cfg.head_for(ds.num_classes), ds, cfg.train.seed)
    pipe = cfg.pipeline(m.input_side)
    splits = stratified_split(ds, (0.8, 0.1, 0.1), cfg.train.seed)
    write_split(splits, os.path.join(out_dir, "splits.csv"))
    m, log = train(m, ds, splits, cfg.train, pipe)
    _train_artifacts(m, ds, splits, pipe, out_dir, log)
    return 0


def _cmd_finetune(args) -> int:
    cfg = load_run_config(args.config, seed_override=args.seed)
    if cfg.data.source_root is None or cfg.data.target_root is None:
        raise ConfigError("finetune needs data.source_root and data.target_root")
    out_dir = _ensure_dir(cfg.output)
    source = ingest_directory(cfg.data.source_root)
    target = ingest_directory(cfg.data.target_root)
    head = cfg.head_for(target.num_classes)
    m, (pre_log, ft_log) = pretrain_then_finetune(
        source, target, cfg.backbone, head, cfg.pretrain, cfg.train,
        cfg.pipeline(cfg.backbone.scaled()[2]),
        on_source_model=lambda sm: checkpoint_save(
            sm, os.path.join(out_dir, "source_model.ckpt")
        ),
    )
    pre_log.to_csv(os.path.join(out_dir, "pretrain_log.csv"))
    splits = stratified_split(target, (0.8, 0.1, 0.1), cfg.train.seed)
    _train_artifacts(m, target, splits, cfg.pipeline(m.input_side), out_dir, ft_log)
    return 0


def _cmd_evaluate(args) -> int:
    m = checkpoint_load(args.checkpoint)
    ds = ingest_directory(args.data)
    splits = read_split(args.split)
    indices = splits.part(args.part)
    pipe = PipelineConfig(image_size=m.input_side, source_channel_order=args.channel_order)
    out_dir = _ensure_dir(args.out)
    started = time.perf_counter()
    pred, act, _ = evaluate(m, ds, indices, pipe)
    elapsed = time.perf_counter() - started
    report = build_report(pred, act, ds.num_classes, ds.class_names)
    write_report(report, os.path.join(out_dir, "metrics.json"))
    write_confusion_csv(report.confusion, os.path.join(out_dir, "confusion.csv"))
    print(f"{args.part} accuracy {report.accuracy_pct:.2f}% over {report.n} samples "
          f"(prediction took {elapsed:.3f}s)", file=sys.stderr)
    return 0


def _cmd_predict(args) -> int:
    m = checkpoint_load(args.checkpoint)
    images = [decode_file(p, assume_bgr=args.channel_order == "bgr") for p in args.images]
    pipe = PipelineConfig(image_size=m.input_side, source_channel_order=args.channel_order)
    labels, probs, elapsed = predict(m, images, pipe)
    names = m.class_names or [f"class_{i}" for i in range(probs.shape[1])]
    lines = ["path\tlabel\tclass_name"]
    for path, lab in zip(args.images, labels):
        lines.append(f"{path}\t{int(lab)}\t{names[int(lab)]}")
    body = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(body)
    else:
        sys.stdout.write(body)
    print(f"predicted {len(images)} images in {elapsed:.3f}s", file=sys.stderr)
    return 0


def _cmd_report(args) -> int:
    path = args.predictions
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            lines = [ln for ln in fh.read().split("\n") if ln]
    except OSError as exc:
        raise DataError(f"cannot read predictions {path}: {exc}") from None
    if not lines or lines[0] != "predicted,actual":
        raise DataError(f"predictions CSV must start with header 'predicted,actual': {path}")
    pred, act = [], []
    for ln in lines[1:]:
        p, a = ln.split(",")
        pred.append(int(p))
        act.append(int(a))
    names = args.class_names.split(",") if args.class_names else None
    k = len(names) if names else int(max(max(pred), max(act))) + 1
    out_dir = _ensure_dir(args.out)
    report = build_report(np.array(pred), np.array(act), k, names)
    write_report(report, os.path.join(out_dir, "metrics.json"))
    write_confusion_csv(report.confusion, os.path.join(out_dir, "confusion.csv"))
    print(f"report over {report.n} predictions: accuracy {report.accuracy_pct:.2f}%",
          file=sys.stderr)
    return 0


_HANDLERS = {
    "ingest": _cmd_ingest,
    "split": _cmd_split,
    "synth": _cmd_synth,
    "train": _cmd_train,
    "finetune": _cmd_finetune,
    "evaluate": _cmd_evaluate,
    "predict": _cmd_predict,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _HANDLERS[args.command](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return NUMERIC_EXIT
    except (DataError, FineFlowError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_EXIT
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return DATA_EXIT


run = main  # historical alias: run(argv) -> exit code


def entry() -> None:
    sys.exit(main())
