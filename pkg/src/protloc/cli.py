"""Command-line interface: ``protloc <command> [options]``.

Commands: gen-data, split, train, eval, tune-thresholds, predict, bench.
Every command accepts ``--config FILE`` (flat ``key = value`` document) and
``--set key=value`` overrides; dedicated flags win over both.  Each command
writes the fully resolved config into its output directory.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics
from .config import ConfigKeyError, RunConfig, derive_seed, load_config
from .data import (Dataset, FoldAssignment, generate_synthetic_dataset, load_dataset, save_dataset,
                   stratified_kfold)
from .model import build_network, load_checkpoint, save_checkpoint
from .runtime import tune_allocator
from .train import evaluate_with_tta, fit, measure_throughput, read_score_matrix, write_score_matrix

log = logging.getLogger("protloc")


class UsageError(Exception):
    """Bad command-line input; reported with exit status 2."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _resolve(args: argparse.Namespace, flag_keys: dict[str, str]) -> RunConfig:
    overrides: dict[str, object] = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value
    for attr, key in flag_keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    return load_config(args.config, overrides)


def _out_dir(args: argparse.Namespace, cfg: RunConfig, default: str) -> Path:
    out = Path(args.out) if args.out else Path(cfg.output_root) / default
    out.mkdir(parents=True, exist_ok=True)
    return out


def _folds_for(ds: Dataset, cfg: RunConfig, folds_path: str | None) -> FoldAssignment:
    if folds_path:
        fa = FoldAssignment.read_csv(folds_path)
        if fa.ids != ds.ids:
            raise UsageError(f"fold file {folds_path} does not list the dataset's samples in order")
        return fa
    return stratified_kfold(ds.labels, cfg.k, seed=derive_seed(cfg.seed, "split"), ids=ds.ids)


def _select(ds: Dataset, args: argparse.Namespace, cfg: RunConfig) -> Dataset:
    """Apply --folds/--fold/--part to pick evaluation samples."""
    if args.fold is None:
        return ds
    fa = _folds_for(ds, cfg, args.folds)
    if not 0 <= args.fold < fa.k:
        raise UsageError(f"--fold must lie in [0, {fa.k}), got {args.fold}")
    idx = fa.train_indices(args.fold) if args.part == "train" else fa.indices(args.fold)
    return ds.subset(idx)


def _load_dataset(path: str | None) -> Dataset:
    if not path:
        raise UsageError("--dataset is required")
    if not (Path(path) / "manifest.json").exists():
        raise UsageError(f"no dataset manifest under {path}")
    return load_dataset(path)


def _load_model(path: str | None):
    if not path:
        raise UsageError("--checkpoint is required")
    if not (Path(path) / "manifest.json").exists():
        raise UsageError(f"no checkpoint manifest under {path}")
    return load_checkpoint(path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _resolve(args, {"n": "n", "size": "image_size", "seed": "data_seed"})
    if cfg.n < 1:
        raise UsageError(f"--n must be >= 1, got {cfg.n}")
    if cfg.image_size < 16:
        raise UsageError(f"--size must be >= 16, got {cfg.image_size}")
    out = _out_dir(args, cfg, "data")
    ds = generate_synthetic_dataset(cfg.n, cfg.image_size, seed=cfg.data_seed)
    save_dataset(ds, out)
    cfg.write(out)
    print(f"wrote {len(ds)} samples to {out}")
    print("class counts: " + " ".join(str(c) for c in ds.manifest.class_counts))
    return 0


def cmd_split(args) -> int:
    cfg = _resolve(args, {"k": "k", "seed": "seed"})
    ds = _load_dataset(args.dataset)
    if cfg.k < 2 or cfg.k > len(ds):
        raise UsageError(f"--k must lie in [2, {len(ds)}], got {cfg.k}")
    out = _out_dir(args, cfg, "split")
    fa = stratified_kfold(ds.labels, cfg.k, seed=derive_seed(cfg.seed, "split"), ids=ds.ids)
    fa.write_csv(out / "folds.csv")
    dist = fa.distribution(ds.labels)
    with open(out / "fold_distribution.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["fold", "size"] + [f"c{c}" for c in range(dist.shape[1])])
        for i, (size, row) in enumerate(zip(fa.fold_sizes(), dist)):
            w.writerow([i, int(size)] + [int(v) for v in row])
    cfg.write(out)
    header = "fold  size " + " ".join(f"{c:>4d}" for c in range(dist.shape[1]))
    print(header)
    for i, (size, row) in enumerate(zip(fa.fold_sizes(), dist)):
        print(f"{i:>4d} {int(size):>5d} " + " ".join(f"{int(v):>4d}" for v in row))
    total = dist.sum(axis=0)
    print(f" all {len(ds):>5d} " + " ".join(f"{int(v):>4d}" for v in total))
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args, {"fold": "fold", "epochs": "max_epochs", "seed": "seed"})
    out = _out_dir(args, cfg, "train")
    if args.dataset:
        ds = _load_dataset(args.dataset)
    else:
        ds = generate_synthetic_dataset(cfg.n, cfg.image_size, seed=cfg.data_seed)
    fa = _folds_for(ds, cfg, args.folds)
    if not 0 <= cfg.fold < fa.k:
        raise UsageError(f"fold must lie in [0, {fa.k}), got {cfg.fold}")
    train_ds, val_ds = ds.subset(fa.train_indices(cfg.fold)), ds.subset(fa.indices(cfg.fold))
    cfg.write(out)
    model = build_network(cfg.network_config())
    tcfg = cfg.train_config()
    ckpt_dir = out / "checkpoints"
    thr_dir = out / "thresholds"
    thr_dir.mkdir(exist_ok=True)
    grid = metrics.threshold_grid(cfg.grid_size)

    def on_epoch_end(epoch, model, info):
        save_checkpoint(model, ckpt_dir / f"epoch_{epoch:03d}", extra={"epoch": epoch})
        all_raw = metrics.best_global_threshold(info["scores"], val_ds.labels, grid)
        metrics.write_threshold_table(thr_dir / f"epoch_{epoch:03d}.csv", info["raw"], info["raw"],
                                      all_raw, all_raw)
        print(f"epoch {epoch:>3d}  stage {info['stage']}  lr {info['row']['lr']:.4g}  "
              f"val macro-F1 {info['row']['macro_f1']:.4f}", flush=True)

    result = fit(model, train_ds, val_ds, tcfg, on_epoch_end=on_epoch_end)
    result.log.write(out)
    save_checkpoint(model, out / "model", extra={"epochs": result.epochs_run})
    write_score_matrix(out / "val_scores.csv", val_ds.ids, result.final_scores)
    all_hist = [metrics.best_global_threshold(s, val_ds.labels, grid) for s in result.score_history]
    metrics.write_threshold_table(out / "thresholds.csv", result.raw_thresholds[-1], result.smoothed,
                                  all_hist[-1], float(np.mean(all_hist[-cfg.smoothing_k:])))
    final = result.log.epochs[-1]
    print(f"trained {result.epochs_run} epochs ({'early stop' if result.stopped_early else 'max epochs'}); "
          f"val macro-F1 {final['macro_f1']:.4f}; outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve(args, {})
    if args.thresholds is None and args.global_threshold is None:
        raise UsageError("one of --thresholds or --global-threshold is required")
    model = _load_model(args.checkpoint)
    ds = _select(_load_dataset(args.dataset), args, cfg)
    out = _out_dir(args, cfg, "eval")
    scores = evaluate_with_tta(model, ds.images, cfg.eval_batch_size)
    header: dict[str, object] = {"checkpoint": str(args.checkpoint), "samples": len(ds)}
    if args.global_threshold is not None:
        if not 0.0 <= args.global_threshold <= 1.0:
            raise UsageError("--global-threshold must lie in [0, 1]")
        thresholds = args.global_threshold
        header["global_threshold"] = args.global_threshold
    else:
        thresholds = metrics.read_threshold_table(args.thresholds, args.column)
        header["thresholds"] = f"{args.thresholds}:{args.column}"
    pred = metrics.apply_thresholds(scores, thresholds)
    report = metrics.metrics_report(pred, ds.labels, beta=args.beta, header=header)
    report.write_csv(out / "metrics.csv")
    metrics.pr_curve(scores, ds.labels, metrics.threshold_grid(cfg.grid_size)).write_csv(out / "pr_curve.csv")
    write_score_matrix(out / "scores.csv", ds.ids, scores)
    cfg.write(out)
    print(f"macro-F1 {report.macro_f1:.4f}  precision {report.precision:.4f}  recall {report.recall:.4f}  "
          f"IOU {report.iou:.4f}  binary accuracy {report.binary_accuracy:.4f}")
    return 0


def cmd_tune_thresholds(args) -> int:
    cfg = _resolve(args, {"history": "smoothing_k"})
    ds = _load_dataset(args.labels)
    index = {sid: i for i, sid in enumerate(ds.ids)}
    grid = metrics.threshold_grid(cfg.grid_size)
    raws, alls = [], []
    for path in args.scores:
        ids, scores = read_score_matrix(path)
        missing = [sid for sid in ids if sid not in index]
        if missing:
            raise UsageError(f"{path}: {len(missing)} sample ids not in the label set (first {missing[0]})")
        labels = ds.labels[[index[sid] for sid in ids]]
        if scores.shape != labels.shape:
            raise UsageError(f"{path}: score matrix {scores.shape} does not match labels {labels.shape}")
        raws.append(metrics.per_class_best_threshold(scores, labels, grid))
        alls.append(metrics.best_global_threshold(scores, labels, grid))
    smoothed = metrics.smooth_thresholds(raws, cfg.smoothing_k)
    out = _out_dir(args, cfg, "thresholds")
    metrics.write_threshold_table(out / "thresholds.csv", raws[-1], smoothed, alls[-1],
                                  float(np.mean(alls[-cfg.smoothing_k:])))
    cfg.write(out)
    print(f"wrote {out / 'thresholds.csv'} from {len(raws)} score file(s), K={cfg.smoothing_k}")
    return 0


def cmd_predict(args) -> int:
    cfg = _resolve(args, {})
    model = _load_model(args.checkpoint)
    ds = _select(_load_dataset(args.dataset), args, cfg)
    out = _out_dir(args, cfg, "predict")
    scores = evaluate_with_tta(model, ds.images, cfg.eval_batch_size)
    write_score_matrix(out / "scores.csv", ds.ids, scores)
    if args.thresholds:
        pred = metrics.apply_thresholds(scores, metrics.read_threshold_table(args.thresholds, args.column))
        write_score_matrix(out / "predictions.csv", ds.ids, pred, fmt=int)
    cfg.write(out)
    print(f"scored {len(ds)} samples; wrote {out / 'scores.csv'}")
    return 0


def cmd_bench(args) -> int:
    cfg = _resolve(args, {})
    model = _load_model(args.checkpoint)
    ds = _load_dataset(args.dataset)
    if args.images < 1:
        raise UsageError("--images must be >= 1")
    out = _out_dir(args, cfg, "bench")
    rows = measure_throughput(model, ds.images, args.batch, args.images, args.warmup)
    with open(out / "bench.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["batch_size", "images", "seconds", "seconds_per_image", "images_per_minute"])
        for r in rows:
            w.writerow([r["batch_size"], r["images"], repr(r["seconds"]), repr(r["seconds_per_image"]),
                        repr(r["images_per_minute"])])
    cfg.write(out)
    print(f"{'batch':>6} {'images':>7} {'s/img':>10} {'img/min':>10}")
    for r in rows:
        print(f"{r['batch_size']:>6d} {r['images']:>7d} {r['seconds_per_image']:>10.5f} "
              f"{r['images_per_minute']:>10.1f}")
    print(f"total images: {sum(r['images'] for r in rows)}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protloc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--out", help="output directory (default: <output_root>/<command>)")

    def selection(p):
        p.add_argument("--folds", help="folds CSV; without it folds are recomputed from the config")
        p.add_argument("--fold", type=int, help="restrict to one fold of the dataset")
        p.add_argument("--part", choices=("val", "train"), default="val",
                       help="with --fold: the held-out fold (val) or the other folds (train)")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("split", help="multi-label stratified k-fold assignment")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train on all folds but one")
    common(p)
    p.add_argument("--dataset", help="dataset directory (default: generate from the config)")
    p.add_argument("--folds")
    p.add_argument("--fold", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="TTA scoring, metric report and PR curve")
    common(p)
    selection(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--thresholds", help="threshold table CSV")
    g.add_argument("--global-threshold", type=float)
    p.add_argument("--column", choices=("raw", "smoothed"), default="smoothed")
    p.add_argument("--beta", type=float, default=1.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tune-thresholds", help="per-class thresholds from score files")
    common(p)
    p.add_argument("--scores", nargs="+", required=True, help="score CSVs, oldest first")
    p.add_argument("--labels", required=True, help="dataset directory holding the labels")
    p.add_argument("--history", type=int, help="number of recent score files averaged (K)")
    p.set_defaults(func=cmd_tune_thresholds)

    p = sub.add_parser("predict", help="write TTA score matrix")
    common(p)
    selection(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--thresholds")
    p.add_argument("--column", choices=("raw", "smoothed"), default="smoothed")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("bench", help="inference throughput at several batch sizes")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--batch", type=int, nargs="+", default=[1, 32])
    p.add_argument("--images", type=int, default=512, help="timed images per batch size")
    p.add_argument("--warmup", type=int, default=2, help="untimed batches before timing")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    tune_allocator()
    try:
        return args.func(args)
    except (UsageError, ConfigKeyError) as e:
        print(f"protloc {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        print(f"protloc {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
