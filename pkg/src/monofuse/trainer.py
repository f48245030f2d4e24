"""Mini-batch training loop, spectrum dataset assembly, and evaluation.

``build_feature_dataset`` turns raw grayscale samples into one of the
spectrum representations (amplitude/phase/orientation of a chosen IMF,
the fused orientation map, or the plain normalized image).  ``train``
runs seeded SGD-with-momentum epochs over shuffled mini-batches while
logging per-iteration loss and per-layer update/parameter magnitude
ratios, and ``evaluate`` reduces predictions to a confusion matrix with
macro-averaged scores.
"""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import bemd, fusion, monogenic
from .cnn import (
    CnnModel, OptimizerState, backward, batch_loss, forward, sgd_momentum_step,
)
from .imageio import ConstantImageError, Dataset, LabeledSample, normalize

logger = logging.getLogger(__name__)

FEATURE_KINDS = ("amplitude", "phase", "orientation", "fusion", "raw")
RATIO_SENTINEL = -12.0


class FeatureExtractionError(RuntimeError):
    """Per-sample failure during spectrum assembly, with identification."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the offending iteration index."""

    def __init__(self, iteration: int, message: str):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass
class TrainConfig:
    epochs: int = 40
    minibatch_size: int = 12
    learning_rate: float = 1e-4
    momentum: float = 0.9
    l2: float = 5e-4
    seed: int = 0
    feature_kind: str = "fusion"
    imf_index: int = 0
    fusion_fraction: float = 0.4
    weighted_fusion: bool = False
    sift: bemd.SiftConfig = field(default_factory=bemd.SiftConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.minibatch_size < 1:
            raise ValueError("minibatch_size must be >= 1")
        if self.feature_kind not in FEATURE_KINDS:
            raise ValueError(
                f"feature_kind {self.feature_kind!r} not in {FEATURE_KINDS}"
            )
        if self.imf_index < 0:
            raise ValueError("imf_index must be >= 0")
        if not 0.0 < self.fusion_fraction <= 1.0:
            raise ValueError("fusion_fraction must be in (0, 1]")


@dataclass
class Metrics:
    """Confusion matrix (rows = truth, cols = prediction) plus macro scores."""

    confusion: np.ndarray
    accuracy: float
    precision: float
    recall: float
    f1: float

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "confusion": self.confusion.tolist(),
        }


@dataclass
class TrainLog:
    """Per-iteration loss/ratio series and per-epoch evaluation metrics."""

    iterations: list[int] = field(default_factory=list)
    epochs: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    ratios: list[dict[str, float]] = field(default_factory=list)
    epoch_metrics: list[Metrics] = field(default_factory=list)
    learning_rate: float = 0.0

    def epoch_mean_losses(self) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for e, l in zip(self.epochs, self.losses):
            by_epoch.setdefault(e, []).append(l)
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]

    def all_ratio_values(self) -> list[float]:
        return [v for row in self.ratios for v in row.values()]

    def to_csv(self, path: str | os.PathLike) -> None:
        """Columns: iteration, epoch, loss, then one ratio_<layer> each."""
        layer_names = list(self.ratios[0].keys()) if self.ratios else []
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["iteration", "epoch", "loss"]
                + [f"ratio_{n}" for n in layer_names]
            )
            for i, e, l, r in zip(
                self.iterations, self.epochs, self.losses, self.ratios
            ):
                writer.writerow(
                    [i, e, f"{l:.17g}"] + [f"{r[n]:.17g}" for n in layer_names]
                )


# ---------------------------------------------------------------------------
# Feature assembly


def _spectra_from_stack(img, stack, cfg: TrainConfig, kinds) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    plain = [k for k in kinds if k in ("amplitude", "phase", "orientation")]
    if plain:
        if cfg.imf_index >= len(stack.imfs):
            raise ValueError(
                f"imf_index {cfg.imf_index} out of range "
                f"({len(stack.imfs)} IMFs extracted)"
            )
        comp = monogenic.monogenic_components(stack.imfs[cfg.imf_index])
        if "amplitude" in plain:
            peak = comp.amplitude.max()
            out["amplitude"] = comp.amplitude / peak if peak > 0 else comp.amplitude
        if "phase" in plain:
            out["phase"] = comp.phase / np.pi
        if "orientation" in plain:
            out["orientation"] = comp.orientation / np.pi
    if "fusion" in kinds:
        top = fusion.select_top_imfs(stack, cfg.fusion_fraction)
        comps = [monogenic.monogenic_components(m) for m in top]
        fused = fusion.fuse_orientations(comps, cfg.weighted_fusion)
        out["fusion"] = fused.angles / np.pi
    return out


def _feature_job(args):
    """Runs in worker processes: returns (idx, features, error_message)."""
    idx, img, cfg, kinds = args
    try:
        try:
            norm = normalize(img)
        except ConstantImageError:
            norm = img
        features: dict[str, np.ndarray] = {}
        if "raw" in kinds:
            features["raw"] = norm
        spectral = [k for k in kinds if k != "raw"]
        if spectral:
            stack = bemd.decompose(norm, cfg.sift)
            features.update(_spectra_from_stack(norm, stack, cfg, spectral))
        return idx, features, None
    except Exception as exc:
        return idx, None, f"{type(exc).__name__}: {exc}"


def build_feature_datasets(
    raw: Dataset, cfg: TrainConfig, kinds, workers: int = 1
) -> dict[str, Dataset]:
    """Assemble several spectrum datasets from one decomposition pass.

    Each image is normalized and decomposed once; all requested feature
    kinds are derived from the shared IMF stack.  Per-sample failures are
    re-raised with the sample index and label attached.
    """
    kinds = list(kinds)
    for k in kinds:
        if k not in FEATURE_KINDS:
            raise ValueError(f"unknown feature kind {k!r}")
    jobs = [(i, s.image, cfg, kinds) for i, s in enumerate(raw.samples)]
    results: list[dict[str, np.ndarray] | None] = [None] * len(jobs)

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_feature_job, jobs, chunksize=4))
    else:
        outcomes = [_feature_job(job) for job in jobs]
    for idx, feats, error in outcomes:
        if error is not None:
            raise FeatureExtractionError(
                f"sample {idx} (label {raw.samples[idx].label}): {error}"
            )
        results[idx] = feats

    out = {}
    for kind in kinds:
        samples = [
            LabeledSample(image=feats[kind], label=s.label)
            for feats, s in zip(results, raw.samples)
        ]
        out[kind] = Dataset(
            samples=samples,
            num_classes=raw.num_classes,
            split=raw.split,
            class_names=list(raw.class_names),
        )
    return out


def build_feature_dataset(
    raw: Dataset, cfg: TrainConfig, workers: int = 1
) -> Dataset:
    """Assemble the dataset for ``cfg.feature_kind`` (see module docs)."""
    return build_feature_datasets(raw, cfg, [cfg.feature_kind], workers)[
        cfg.feature_kind
    ]


# ---------------------------------------------------------------------------
# Batching and the training loop


def make_minibatches(ds: Dataset, size: int, seed: int) -> list[np.ndarray]:
    """Seeded shuffle of sample indices cut into batches; the final short
    batch is kept."""
    if size < 1:
        raise ValueError("minibatch size must be >= 1")
    perm = np.random.default_rng(seed).permutation(len(ds))
    return [perm[i : i + size] for i in range(0, len(perm), size)]


def parameter_ratio_log(model: CnnModel, last_update) -> dict[str, float]:
    """log10(mean |update| / mean |param|) per parameterized layer.

    ``last_update`` mirrors ``model.parameters()`` (the velocity tensors
    just applied).  An exactly zero update reports the sentinel -12.
    """
    params = model.parameters()
    if len(last_update) != len(params):
        raise ValueError("update list does not mirror the model parameters")
    ratios: dict[str, float] = {}
    cursor = 0
    for _, name, layer in model.param_layers():
        p_mags = [np.abs(params[cursor]), np.abs(params[cursor + 1])]
        u_mags = [np.abs(last_update[cursor]), np.abs(last_update[cursor + 1])]
        cursor += 2
        p_mean = float(np.concatenate([m.ravel() for m in p_mags]).mean())
        u_mean = float(np.concatenate([m.ravel() for m in u_mags]).mean())
        if p_mean == 0.0:
            continue  # zero-parameter layer: nothing meaningful to report
        if u_mean == 0.0:
            ratios[name] = RATIO_SENTINEL
        else:
            ratios[name] = max(float(np.log10(u_mean / p_mean)), RATIO_SENTINEL)
    return ratios


def train(
    model: CnnModel,
    ds: Dataset,
    cfg: TrainConfig,
    eval_ds: Dataset | None = None,
) -> tuple[CnnModel, TrainLog]:
    """Run ``cfg.epochs`` of mini-batch SGD with momentum, in place.

    Batch order reshuffles every epoch with ``cfg.seed + epoch`` so runs
    are reproducible yet batches vary.  Per-epoch metrics are computed on
    ``eval_ds`` when given, else on the training set.  A non-finite batch
    loss aborts with the offending iteration index.
    """
    rows, cols = ds.image_shape
    if model.input_shape != (1, rows, cols):
        raise ValueError(
            f"model input {model.input_shape} does not match data "
            f"(1, {rows}, {cols})"
        )
    images = ds.stacked()[:, None, :, :]
    labels = ds.labels()
    opt = OptimizerState.for_model(
        model, cfg.learning_rate, cfg.momentum, cfg.l2
    )
    log = TrainLog(learning_rate=cfg.learning_rate)
    iteration = 0
    for epoch in range(cfg.epochs):
        for batch in make_minibatches(ds, cfg.minibatch_size, cfg.seed + epoch):
            probs, cache = forward(model, images[batch])
            value = batch_loss(probs, labels[batch])
            if not np.isfinite(value):
                raise TrainingDivergedError(iteration, f"loss {value}")
            grads = backward(model, cache, labels[batch])
            sgd_momentum_step(opt, model, grads)
            log.iterations.append(iteration)
            log.epochs.append(epoch)
            log.losses.append(value)
            log.ratios.append(parameter_ratio_log(model, opt.velocities))
            iteration += 1
        log.epoch_metrics.append(
            evaluate(model, eval_ds if eval_ds is not None else ds)
        )
        logger.info(
            "epoch %d: mean loss %.4f, eval accuracy %.4f",
            epoch,
            float(np.mean(log.losses[-max(1, len(ds) // cfg.minibatch_size):])),
            log.epoch_metrics[-1].accuracy,
        )
    return model, log


# ---------------------------------------------------------------------------
# Evaluation


def metrics_from_confusion(confusion: np.ndarray) -> Metrics:
    """Macro-averaged scores from a (truth, prediction) count matrix.

    Per-class precision TP/(TP+FP) and recall TP/(TP+FN) are 0 when their
    denominator is 0; per-class F1 = 2PR/(P+R) (0 when P+R = 0) and the
    macro scores are unweighted class means.
    """
    confusion = np.asarray(confusion, dtype=np.int64)
    total = confusion.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(confusion).astype(np.float64)
    col = confusion.sum(axis=0).astype(np.float64)
    row = confusion.sum(axis=1).astype(np.float64)
    precision = np.divide(tp, col, out=np.zeros_like(tp), where=col > 0)
    recall = np.divide(tp, row, out=np.zeros_like(tp), where=row > 0)
    pr = precision + recall
    f1 = np.divide(2 * precision * recall, pr, out=np.zeros_like(tp), where=pr > 0)
    return Metrics(
        confusion=confusion,
        accuracy=float(tp.sum() / total),
        precision=float(precision.mean()),
        recall=float(recall.mean()),
        f1=float(f1.mean()),
    )


def evaluate(model: CnnModel, test: Dataset, batch_size: int = 32) -> Metrics:
    """Argmax predictions over the test set, reduced to Metrics."""
    images = test.stacked()[:, None, :, :]
    labels = test.labels()
    k = test.num_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    for start in range(0, len(test), batch_size):
        probs, _ = forward(model, images[start : start + batch_size])
        preds = probs.argmax(axis=1)
        for t, p in zip(labels[start : start + batch_size], preds):
            confusion[t, p] += 1
    return metrics_from_confusion(confusion)
