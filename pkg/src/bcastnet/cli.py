"""Command-line entry point: preprocess, inspect, train, xval, eval, compare, make-micro."""
from __future__ import annotations

import argparse
import dataclasses
import glob
import json
import logging
import os
import sys
from pathlib import Path

from .arch import VariantId, build_arch, conv_census, param_count, shape_trace
from .audio import DspConfig
from .data import (
    DATASET_IDS,
    REFERENCE_COUNTS,
    DatasetError,
    IndexSet,
    batch_iter,
    build_features,
    class_distribution,
    make_micro_dataset,
    scan_dataset,
    modal_frames,
)
from .evaluation import EvalReport, FoldResult, compare_runs, emit_report, evaluate, load_report
from .training import (
    TrainConfig,
    fit,
    kfold_plan,
    load_checkpoint,
    save_checkpoint,
    write_history_csv,
)

log = logging.getLogger("bcastnet")

CACHE_ENV = "BCASTNET_CACHE"

_TRAIN_FLAGS = {  # CLI flag dest -> TrainConfig field
    "lr": "lr0", "batch": "batch", "max_epochs": "max_epochs", "seed": "seed",
    "early_stop_patience": "early_stop_patience", "plateau_patience": "plateau_patience",
    "label_smoothing": "label_smoothing", "deterministic": "deterministic",
    "target_train_acc": "target_train_acc",
}


class CliError(Exception):
    pass


def _cache_dir(args, dataset_id: str) -> Path:
    if getattr(args, "cache", None):
        return Path(args.cache)
    base = os.environ.get(CACHE_ENV)
    return Path(base) / dataset_id if base else Path(".bcastnet_cache") / dataset_id


def _resolve_train_config(args) -> TrainConfig:
    values = {}
    if getattr(args, "config", None):
        doc = json.loads(Path(args.config).read_text())
        values.update(doc.get("train", doc))
    for flag, fld in _TRAIN_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[fld] = v
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in values.items() if k in known})


def _echo_config(out: Path, args, config: TrainConfig | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    if config is not None:
        doc["train"] = dataclasses.asdict(config)
    (out / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _prepare(args):
    manifest = scan_dataset(args.root, args.dataset, getattr(args, "relabel", None))
    cache, summary = build_features(manifest, DspConfig(), _cache_dir(args, args.dataset),
                                    workers=getattr(args, "workers", 1) or 1)
    if summary.failed:
        log.warning("%d files failed feature extraction", len(summary.failed))
    return manifest, cache, summary


# ------------------------------------------------------------ subcommands


def cmd_preprocess(args) -> int:
    manifest, cache, summary = _prepare(args)
    dist = class_distribution(manifest)
    ref = REFERENCE_COUNTS.get(args.dataset, {})
    width = max(len(g) for g in dist)
    print(f"{'genre':<{width}}  tracks" + ("  reference" if ref else ""))
    for g, n in dist.items():
        print(f"{g:<{width}}  {n:>6}" + (f"  {ref[g]:>9}" if g in ref else ""))
    print(f"{'total':<{width}}  {sum(dist.values()):>6}")
    frames = modal_frames(cache, manifest)
    print(f"{manifest.num_classes} classes, {len(manifest.entries)} files, "
          f"{frames}x{DspConfig().n_mels}")
    print(summary)
    return 0


def cmd_inspect(args) -> int:
    arch = build_arch(args.variant, args.num_classes, **_arch_overrides(args))
    shape = (1, 1, args.mels, args.frames)
    trace = shape_trace(arch, shape)
    table = param_count(arch)
    census = conv_census(arch)
    width = max(len(n) for n, _ in trace)
    print(f"# shape trace for {arch.variant.value} on input {shape}")
    for name, s in trace:
        print(f"{name:<{width}}  {s}")
    print()
    print(table.render())
    print()
    print("conv census: " + ", ".join(f"{k}={v}" for k, v in census.items()))
    print(f"total trainable ≈ {round(table.total / 1000)}k ({table.total})")
    if arch.variant is not VariantId.BaselineBBNN:
        base = param_count(build_arch(VariantId.BaselineBBNN, args.num_classes,
                                      **_arch_overrides(args))).total
        print(f"delta vs BaselineBBNN: {table.total - base:+,} ({base - table.total:,} fewer)"
              if table.total <= base else f"delta vs BaselineBBNN: {table.total - base:+,}")
    if args.csv_out:
        out = Path(args.csv_out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "params.csv").write_text(table.to_csv())
        lines = ["layer,shape"] + [f"{n},{'x'.join(map(str, s))}" for n, s in trace]
        (out / "shape_trace.csv").write_text("\n".join(lines) + "\n")
    return 0


def _arch_overrides(args) -> dict:
    return {k: getattr(args, k) for k in ("num_blocks", "f") if getattr(args, k, None)}


def _run_fold(args, manifest, cache, fold, out: Path, config: TrainConfig) -> EvalReport:
    arch = build_arch(args.variant, manifest.num_classes, **_arch_overrides(args))
    result = fit(arch, cache, manifest, fold, config)
    out.mkdir(parents=True, exist_ok=True)
    write_history_csv(result.history, out / "history.csv")
    save_checkpoint(result.checkpoint, out / "checkpoint")
    labels = manifest.label_names
    acc, cm = evaluate(result.model, batch_iter(cache, manifest, fold.test, config.batch,
                                                purpose="eval"), labels)
    val_acc = result.checkpoint.metrics.get("val_acc", float("nan"))
    report = EvalReport(arch.variant.value, manifest.dataset_id,
                        [FoldResult(fold.index, val_acc, acc)], cm, fold.index)
    emit_report(report, out, [out / "history.csv"])
    return report


def cmd_train(args) -> int:
    config = _resolve_train_config(args)
    out = Path(args.out)
    _echo_config(out, args, config)
    manifest, cache, _ = _prepare(args)
    folds = kfold_plan(len(manifest.entries), args.k, args.split_seed, manifest.labels)
    if not 0 <= args.fold < len(folds):
        raise CliError(f"fold must be in [0, {len(folds)})")
    report = _run_fold(args, manifest, cache, folds[args.fold], out, config)
    best = report.folds[0]
    print(f"{report.variant} {report.dataset} fold {best.fold}: "
          f"val {best.val_accuracy:.4f} test {best.test_accuracy:.4f}")
    return 0


def cmd_xval(args) -> int:
    config = _resolve_train_config(args)
    out = Path(args.out)
    _echo_config(out, args, config)
    manifest, cache, _ = _prepare(args)
    folds = kfold_plan(len(manifest.entries), args.k, args.split_seed, manifest.labels)
    reports = []
    for fold in folds:
        fold_dir = out / f"fold_{fold.index:02d}"
        if (fold_dir / "report.json").exists():
            log.info("fold %d already complete, skipping", fold.index)
            reports.append(load_report(fold_dir / "report.json"))
            continue
        reports.append(_run_fold(args, manifest, cache, fold, fold_dir, config))
    results = [r.folds[0] for r in reports]
    best = max(reports, key=lambda r: (r.folds[0].test_accuracy, -r.folds[0].fold))
    agg = EvalReport(reports[0].variant, reports[0].dataset, results, best.confusion,
                     best.folds[0].fold)
    emit_report(agg, out)
    table = compare_runs([agg])
    (out / "comparison.csv").write_text(table.to_csv())
    print(table.render())
    print(f"mean test accuracy {agg.mean_test:.4f}; max test accuracy {agg.max_test:.4f} "
          f"(fold {agg.best.fold})")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.to_model()
    manifest, cache, _ = _prepare(args)
    if args.split == "all":
        index_set = IndexSet(tuple(range(len(manifest.entries))), "all")
    else:
        folds = kfold_plan(len(manifest.entries), args.k, args.split_seed, manifest.labels)
        index_set = getattr(folds[args.fold], args.split)
    acc, cm = evaluate(model, batch_iter(cache, manifest, index_set, 8, purpose="eval"),
                       manifest.label_names)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "confusion.csv").write_text(cm.to_csv())
    (out / "confusion_normalized.csv").write_text(cm.to_csv(normalized=True))
    print(f"accuracy {acc:.4f} on {cm.total} samples ({args.split})")
    return 0


def cmd_compare(args) -> int:
    paths = sorted(set(glob.glob(args.reports, recursive=True)))
    if not paths:
        raise CliError(f"no reports match {args.reports!r}")
    table = compare_runs([load_report(p) for p in paths])
    print(table.render())
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(table.to_csv())
    return 0


def cmd_make_micro(args) -> int:
    root = make_micro_dataset(args.out, args.classes, args.clips, args.seconds, seed=args.seed)
    print(f"wrote {args.classes * args.clips} clips under {root}")
    return 0


# ---------------------------------------------------------------- parser


def _add_data_args(p, dataset_required=True):
    p.add_argument("--root", required=True, help="dataset root with genre subdirectories")
    p.add_argument("--dataset", required=dataset_required, default="micro",
                   help=f"dataset id ({', '.join(DATASET_IDS)}, or any name)")
    p.add_argument("--cache", help=f"feature cache dir (default: ${CACHE_ENV}/<dataset>)")
    p.add_argument("--relabel", help="optional path,label CSV instead of genre folders")
    p.add_argument("--workers", type=int, default=1)


def _add_train_args(p):
    p.add_argument("--variant", required=True, type=VariantId.parse)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file of TrainConfig values (flags take precedence)")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--early-stop-patience", type=int)
    p.add_argument("--plateau-patience", type=int)
    p.add_argument("--label-smoothing", type=float)
    p.add_argument("--target-train-acc", type=float, help="stop once train accuracy reaches this")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--num-blocks", type=int)
    p.add_argument("--f", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bcastnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="scan a corpus and build the mel feature cache")
    _add_data_args(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("inspect", help="shape trace, parameter table and conv census")
    p.add_argument("--variant", required=True, type=VariantId.parse)
    p.add_argument("--num-classes", type=int, default=10)
    p.add_argument("--mels", type=int, default=128)
    p.add_argument("--frames", type=int, default=646)
    p.add_argument("--num-blocks", type=int)
    p.add_argument("--f", type=int)
    p.add_argument("--csv-out", help="directory for params.csv and shape_trace.csv")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("train", help="train one fold")
    _add_data_args(p)
    _add_train_args(p)
    p.add_argument("--fold", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("xval", help="k-fold cross-validation (resumes finished folds)")
    _add_data_args(p)
    _add_train_args(p)
    p.set_defaults(func=cmd_xval)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _add_data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("test", "val", "train", "all"), default="test")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="variant comparison table from report.json files")
    p.add_argument("--reports", required=True, help="glob, e.g. 'runs/**/report.json'")
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("make-micro", help="write the synthetic micro corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--clips", type=int, default=8)
    p.add_argument("--seconds", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_micro)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, DatasetError, FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
