"""Command-line entry point: `monofuse <subcommand>`.

Subcommands cover the full pipeline — decompose, monogenic, fuse, train,
eval, pipeline, bench, synth-data.  Every artifact-producing run echoes
its fully resolved configuration (config.resolved.json) into the output
directory so results can be reproduced exactly.  All randomness is
governed by the seed; exit codes are 0 on success, 1 on runtime failure,
2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__, bemd, fusion, monogenic
from .checkpoint import load_checkpoint, save_checkpoint
from .cnn import build_recognition_model
from .imageio import (
    ConstantImageError, load_dataset, load_grayscale, load_matrix, normalize,
    render_heatmap, save_matrix, save_pgm,
)
from .parallel import train_parallel
from .synth import make_benchmark
from .trainer import (
    TrainConfig, build_feature_dataset, build_feature_datasets, evaluate,
    train,
)

logger = logging.getLogger(__name__)

# RunConfig schema: unknown keys are rejected, absent keys take these
# defaults.  "workers": null means "use all available cores".
CONFIG_DEFAULTS = {
    "data_train": None,
    "data_test": None,
    "out_dir": None,
    "feature": "fusion",
    "epochs": 40,
    "batch": 12,
    "lr": 1e-4,
    "momentum": 0.9,
    "l2": 5e-4,
    "seed": 0,
    "imfs": 3,
    "sd": 0.2,
    "max_sift": 10,
    "min_extrema": 4,
    "imf_index": 0,
    "fusion_fraction": 0.4,
    "weighted_fusion": False,
    "workers": None,
    "sync_interval": 1,
}


class ConfigError(ValueError):
    pass


def _resolve_workers(value) -> int:
    if value is None:
        return os.cpu_count() or 1
    value = int(value)
    if value < 1:
        raise ConfigError("workers must be >= 1")
    return value


def load_run_config(path: str) -> dict:
    """Read a RunConfig JSON file, apply defaults, reject unknown keys."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = sorted(set(raw) - set(CONFIG_DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    resolved = dict(CONFIG_DEFAULTS)
    resolved.update(raw)
    return resolved


def _echo_config(out_dir: str, resolved: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.resolved.json"), "w") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sift_config(resolved: dict) -> bemd.SiftConfig:
    return bemd.SiftConfig(
        num_imfs=int(resolved["imfs"]),
        max_sift_iterations=int(resolved["max_sift"]),
        sd_threshold=float(resolved["sd"]),
        min_extrema=int(resolved["min_extrema"]),
    )


def _train_config(resolved: dict) -> TrainConfig:
    return TrainConfig(
        epochs=int(resolved["epochs"]),
        minibatch_size=int(resolved["batch"]),
        learning_rate=float(resolved["lr"]),
        momentum=float(resolved["momentum"]),
        l2=float(resolved["l2"]),
        seed=int(resolved["seed"]),
        feature_kind=str(resolved["feature"]),
        imf_index=int(resolved["imf_index"]),
        fusion_fraction=float(resolved["fusion_fraction"]),
        weighted_fusion=bool(resolved["weighted_fusion"]),
        sift=_sift_config(resolved),
    )


def _args_to_resolved(args: argparse.Namespace) -> dict:
    """Collect RunConfig-schema values from parsed flags (for the echo)."""
    resolved = dict(CONFIG_DEFAULTS)
    for key in resolved:
        if hasattr(args, key):
            resolved[key] = getattr(args, key)
    if resolved["workers"] is None or isinstance(resolved["workers"], int):
        resolved["workers"] = _resolve_workers(resolved["workers"])
    return resolved


def _write_metrics(path: str, final, per_epoch=None) -> None:
    doc = {
        "per_epoch": [
            {"epoch": i, **m.to_dict()} for i, m in enumerate(per_epoch or [])
        ],
        "final": final.to_dict(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Subcommands


def cmd_decompose(args) -> int:
    img = load_grayscale(args.input)
    try:
        img = normalize(img)
    except ConstantImageError:
        logger.warning("constant input image; skipping normalization")
    cfg = bemd.SiftConfig(
        num_imfs=args.imfs,
        max_sift_iterations=args.max_sift,
        sd_threshold=args.sd,
    )
    stack = bemd.decompose(img, cfg)
    if not stack.imfs:
        logger.warning("no IMFs extracted (degenerate input); residue only")
    os.makedirs(args.out_dir, exist_ok=True)
    for i, imf in enumerate(stack.imfs):
        save_matrix(imf, os.path.join(args.out_dir, f"imf_{i}.mfm"))
        render_heatmap(imf, os.path.join(args.out_dir, f"imf_{i}.png"))
    save_matrix(stack.residue, os.path.join(args.out_dir, "residue.mfm"))
    render_heatmap(stack.residue, os.path.join(args.out_dir, "residue.png"))
    resolved = _args_to_resolved(args)
    _echo_config(args.out_dir, resolved)
    logger.info("wrote %d IMFs + residue to %s", len(stack.imfs), args.out_dir)
    return 0


def cmd_monogenic(args) -> int:
    m = load_matrix(args.input)
    comp = monogenic.monogenic_components(m)
    os.makedirs(args.out_dir, exist_ok=True)
    rasters = {
        "amplitude": comp.amplitude,
        "phase": comp.phase,
        "orientation": comp.orientation,
        "valid": comp.valid_mask.astype(np.float64),
    }
    for name, raster in rasters.items():
        save_matrix(raster, os.path.join(args.out_dir, f"{name}.mfm"))
        render_heatmap(raster, os.path.join(args.out_dir, f"{name}.png"))
    _echo_config(args.out_dir, _args_to_resolved(args))
    return 0


def cmd_fuse(args) -> int:
    # Inputs are IMF matrices (as written by `decompose`): fusion needs the
    # quadrature components of each surface for validity masks and optional
    # amplitude weighting, which bare orientation rasters do not carry.
    mats = [load_matrix(p) for p in args.inputs]
    shapes = {m.shape for m in mats}
    if len(shapes) != 1:
        raise ValueError(f"input shapes differ: {sorted(shapes)}")
    comps = [monogenic.monogenic_components(m) for m in mats]
    fused = fusion.fuse_orientations(comps, args.weighted_by_amplitude)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    save_matrix(fused.angles, args.out)
    stem, _ = os.path.splitext(os.path.abspath(args.out))
    render_heatmap(fused.angles, stem + ".png")
    _echo_config(out_dir, _args_to_resolved(args))
    if fused.degenerate_mask.any():
        logger.warning(
            "%d pixels had degenerate (cancelling) orientations",
            int(fused.degenerate_mask.sum()),
        )
    return 0


def cmd_synth_data(args) -> int:
    train_ds, test_ds = make_benchmark(
        seed=args.seed,
        train_per_class=args.train,
        test_per_class=args.test,
        size=args.size,
    )
    for ds in (train_ds, test_ds):
        split_dir = os.path.join(args.out, ds.split)
        counters: dict[int, int] = {}
        for sample in ds.samples:
            cls = ds.class_names[sample.label]
            frame = counters.get(sample.label, 0)
            counters[sample.label] = frame + 1
            cls_dir = os.path.join(split_dir, cls)
            os.makedirs(cls_dir, exist_ok=True)
            save_pgm(sample.image, os.path.join(cls_dir, f"frame_{frame:04d}.pgm"))
    _echo_config(args.out, _args_to_resolved(args))
    logger.info(
        "wrote %d train / %d test samples under %s",
        len(train_ds),
        len(test_ds),
        args.out,
    )
    return 0


_PATH_KEYS = ("data_train", "data_test", "out_dir")


def _train_and_save(resolved: dict, train_feats, out_model, log_path, eval_feats=None):
    """Shared by `train` and `pipeline`: fit, write checkpoint + log."""
    cfg = _train_config(resolved)
    workers = _resolve_workers(resolved["workers"])
    rows, cols = train_feats.image_shape
    model = build_recognition_model((rows, cols), train_feats.num_classes, seed=cfg.seed)
    log = None
    if workers == 1:
        model, log = train(model, train_feats, cfg, eval_ds=eval_feats)
        if log_path:
            log.to_csv(log_path)
    else:
        model, reports = train_parallel(
            train_feats,
            cfg,
            workers,
            sync_interval=int(resolved["sync_interval"]),
            model=model,
        )
        if log_path:
            # Per-iteration series do not exist under concurrent workers;
            # log one row per averaging round instead.
            import csv as _csv

            with open(log_path, "w", newline="") as fh:
                writer = _csv.writer(fh)
                writer.writerow(
                    ["round", "checksum"]
                    + [f"loss_worker_{w}" for w in range(workers)]
                )
                for rep in reports:
                    writer.writerow(
                        [rep.round_index, f"{rep.checksum:.17g}"]
                        + [f"{l:.17g}" for l in rep.worker_losses]
                    )
    # checkpoints must be byte-identical across runs that differ only in
    # where they write, so filesystem paths stay out of the manifest
    stored = {k: v for k, v in resolved.items() if k not in _PATH_KEYS}
    save_checkpoint(model, out_model, hyperparameters=stored)
    return model, log


def cmd_train(args) -> int:
    resolved = _args_to_resolved(args)
    raw = load_dataset(args.data)
    cfg = _train_config(resolved)
    feats = build_feature_dataset(raw, cfg, workers=resolved["workers"])
    _train_and_save(resolved, feats, args.out, args.log)
    _echo_config(os.path.dirname(os.path.abspath(args.out)) or ".", resolved)
    logger.info("checkpoint written to %s", args.out)
    return 0


def cmd_eval(args) -> int:
    model, manifest = load_checkpoint(args.model)
    stored = manifest.get("hyperparameters") or {}
    resolved = dict(CONFIG_DEFAULTS)
    resolved.update({k: v for k, v in stored.items() if k in CONFIG_DEFAULTS})
    if args.workers is not None:
        resolved["workers"] = args.workers
    resolved["workers"] = _resolve_workers(resolved["workers"])
    cfg = _train_config(resolved)
    raw = load_dataset(args.data, split="test")
    feats = build_feature_dataset(raw, cfg, workers=resolved["workers"])
    metrics = evaluate(model, feats)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    _write_metrics(args.out, metrics)
    _echo_config(out_dir, resolved)
    logger.info("accuracy %.4f -> %s", metrics.accuracy, args.out)
    return 0


def cmd_pipeline(args) -> int:
    resolved = load_run_config(args.config)
    for key in ("data_train", "data_test", "out_dir"):
        if not resolved[key]:
            raise ConfigError(f"config key {key!r} is required for pipeline")
    resolved["workers"] = _resolve_workers(resolved["workers"])
    out_dir = resolved["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    cfg = _train_config(resolved)

    raw_train = load_dataset(resolved["data_train"], split="train")
    raw_test = load_dataset(resolved["data_test"], split="test")
    logger.info(
        "building %s features for %d train / %d test samples",
        cfg.feature_kind,
        len(raw_train),
        len(raw_test),
    )
    train_feats = build_feature_dataset(raw_train, cfg, workers=resolved["workers"])
    test_feats = build_feature_dataset(raw_test, cfg, workers=resolved["workers"])

    model, log = _train_and_save(
        resolved,
        train_feats,
        os.path.join(out_dir, "model.ckpt"),
        os.path.join(out_dir, "train.csv"),
        eval_feats=test_feats,
    )
    final = evaluate(model, test_feats)
    _write_metrics(
        os.path.join(out_dir, "metrics.json"),
        final,
        per_epoch=log.epoch_metrics if log is not None else None,
    )
    heat_dir = os.path.join(out_dir, "heatmaps")
    os.makedirs(heat_dir, exist_ok=True)
    kind = cfg.feature_kind
    render_heatmap(
        train_feats.samples[0].image,
        os.path.join(heat_dir, f"train0_{kind}.png"),
    )
    render_heatmap(
        test_feats.samples[0].image,
        os.path.join(heat_dir, f"test0_{kind}.png"),
    )
    _echo_config(out_dir, resolved)
    logger.info("pipeline complete: test accuracy %.4f", final.accuracy)
    return 0


def cmd_bench(args) -> int:
    worker_counts = [int(tok) for tok in args.workers.split(",") if tok]
    if not worker_counts or any(k < 1 for k in worker_counts):
        raise ConfigError(f"bad worker list {args.workers!r}")
    resolved = _args_to_resolved(args)
    resolved["workers"] = args.workers  # keep the sweep list in the echo
    cfg = _train_config(resolved)
    rows = []
    for k in worker_counts:
        t0 = time.perf_counter()
        raw = load_dataset(args.data)
        t1 = time.perf_counter()
        feats = build_feature_dataset(raw, cfg, workers=k)
        t2 = time.perf_counter()
        train_parallel(feats, cfg, min(k, len(feats)), sync_interval=args.sync_interval)
        t3 = time.perf_counter()
        rows.append((k, "bundle", t1 - t0))
        rows.append((k, "decompose", t2 - t1))
        rows.append((k, "train", t3 - t2))
        logger.info(
            "workers=%d bundle=%.2fs decompose=%.2fs train=%.2fs",
            k,
            t1 - t0,
            t2 - t1,
            t3 - t2,
        )
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        import csv as _csv

        writer = _csv.writer(fh)
        writer.writerow(["workers", "stage", "seconds"])
        for k, stage, seconds in rows:
            writer.writerow([k, stage, f"{seconds:.6f}"])
    _echo_config(out_dir, resolved)
    return 0


# ---------------------------------------------------------------------------
# Parser


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--feature", default="fusion",
                   choices=["amplitude", "phase", "orientation", "fusion", "raw"])
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch", type=int, default=12)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--l2", type=float, default=5e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--imfs", type=int, default=3)
    p.add_argument("--sd", type=float, default=0.2)
    p.add_argument("--max-sift", type=int, dest="max_sift", default=10)
    p.add_argument("--imf-index", type=int, dest="imf_index", default=0)
    p.add_argument("--fusion-fraction", type=float, dest="fusion_fraction",
                   default=0.4)
    p.add_argument("--weighted-fusion", action="store_true",
                   dest="weighted_fusion")
    p.add_argument("--workers", type=int, default=None,
                   help="worker count (default: all cores); >1 trains "
                        "parameter-averaged replicas")
    p.add_argument("--sync-interval", type=int, dest="sync_interval", default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="monofuse",
        description="IMF decomposition, monogenic spectra, orientation "
                    "fusion, and CNN training for illumination-robust "
                    "recognition.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decompose", help="split an image into IMFs + residue")
    p.add_argument("--input", required=True)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--imfs", type=int, default=3)
    p.add_argument("--sd", type=float, default=0.2)
    p.add_argument("--max-sift", type=int, dest="max_sift", default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("monogenic", help="amplitude/phase/orientation spectra")
    p.add_argument("--input", required=True, help="an MFM1 matrix (e.g. an IMF)")
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.set_defaults(func=cmd_monogenic)

    p = sub.add_parser("fuse", help="fuse orientation maps of several IMFs")
    p.add_argument("--inputs", required=True, nargs="+",
                   help="IMF matrices from `decompose`")
    p.add_argument("--out", required=True)
    p.add_argument("--weighted-by-amplitude", action="store_true",
                   dest="weighted_by_amplitude")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("train", help="fit the recognition model")
    p.add_argument("--data", required=True, help="dataset root (class dirs)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", default=None, help="training-log CSV path")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="metrics JSON path")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline",
                       help="decompose -> spectra -> fuse -> train -> eval")
    p.add_argument("--config", required=True, help="RunConfig JSON path")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("bench", help="per-stage timings across worker counts")
    p.add_argument("--data", required=True)
    p.add_argument("--workers", default="1,2,4",
                   help="comma-separated worker counts")
    p.add_argument("--out", required=True, help="timings CSV path")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--batch", type=int, default=12)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--feature", default="fusion",
                   choices=["amplitude", "phase", "orientation", "fusion", "raw"])
    p.add_argument("--sync-interval", type=int, dest="sync_interval", default=1)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth-data",
                       help="generate the oriented-texture benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", type=int, default=40, help="samples per class")
    p.add_argument("--test", type=int, default=20, help="samples per class")
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_synth_data)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except Exception as exc:  # argparse usage errors exit(2) before this
        print(f"monofuse: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
