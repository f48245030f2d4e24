"""Data-parallel training by synchronous parameter averaging.

Workers are logical concurrent tasks inside one process.  Each epoch the
sample permutation is resharded round-robin across workers; workers run
``sync_interval`` local mini-batch steps between barriers, then the
coordinator element-wise averages weights *and* momentum velocities in
fixed worker order and rebroadcasts.  With one worker the procedure
degenerates to the sequential trainer, bit for bit.
"""

from __future__ import annotations

import copy
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cnn import (
    CnnModel, OptimizerState, backward, batch_loss, build_recognition_model,
    forward, sgd_momentum_step,
)
from .imageio import Dataset
from .trainer import TrainConfig, TrainingDivergedError

logger = logging.getLogger(__name__)


@dataclass
class ShardPlan:
    """Disjoint, covering per-worker index assignments for one epoch."""

    num_workers: int
    shards: list[np.ndarray]
    sync_interval: int = 1

    def __post_init__(self):
        if self.num_workers < 1:
            raise ValueError("num_workers must be >= 1")
        if len(self.shards) != self.num_workers:
            raise ValueError("one shard per worker required")
        if self.sync_interval < 1:
            raise ValueError("sync_interval must be >= 1")


@dataclass
class SyncRoundReport:
    """One averaging round: per-worker mean batch loss and a checksum of
    the post-average parameters (fixed-order sum, recomputable)."""

    round_index: int
    worker_losses: list[float]
    checksum: float


def shard_dataset(ds: Dataset, k: int, seed: int = 0) -> ShardPlan:
    """Round-robin shards over the seeded permutation; sizes differ by <= 1."""
    if k < 1:
        raise ValueError("worker count must be >= 1")
    if k > len(ds):
        raise ValueError(f"cannot shard {len(ds)} samples across {k} workers")
    perm = np.random.default_rng(seed).permutation(len(ds))
    return ShardPlan(num_workers=k, shards=[perm[w::k] for w in range(k)])


def parameter_checksum(model: CnnModel) -> float:
    """Fixed-order sum over every parameter element."""
    total = 0.0
    for p in model.parameters():
        total += float(p.sum())
    return total


def _check_same_architecture(models: list[CnnModel]) -> None:
    head = models[0]
    for m in models[1:]:
        if (
            m.input_shape != head.input_shape
            or m.num_classes != head.num_classes
            or len(m.layers) != len(head.layers)
            or any(
                type(a) is not type(b) for a, b in zip(m.layers, head.layers)
            )
            or any(
                a.shape != b.shape
                for a, b in zip(m.parameters(), head.parameters())
            )
        ):
            raise ValueError("models do not share an architecture")


def _average_tensors(per_worker: list[list[np.ndarray]]) -> list[np.ndarray]:
    k = len(per_worker)
    out = []
    for tensors in zip(*per_worker):
        acc = np.zeros_like(tensors[0])
        for t in tensors:  # fixed worker order: deterministic reduction
            acc += t
        acc /= k
        out.append(acc)
    return out


def average_parameters(models: list[CnnModel]) -> CnnModel:
    """Element-wise mean of parameters across model replicas.

    Accumulation runs in worker-index order so the result is deterministic;
    a single model averages to itself exactly.
    """
    if not models:
        raise ValueError("no models to average")
    _check_same_architecture(models)
    averaged = copy.deepcopy(models[0])
    means = _average_tensors([m.parameters() for m in models])
    for p, mean in zip(averaged.parameters(), means):
        p[...] = mean
    return averaged


@dataclass
class _Worker:
    model: CnnModel
    opt: OptimizerState
    batches: list[np.ndarray] = field(default_factory=list)
    cursor: int = 0


def _cut_batches(shard: np.ndarray, size: int) -> list[np.ndarray]:
    return [shard[i : i + size] for i in range(0, len(shard), size)]


def _run_local_steps(
    worker: _Worker, images: np.ndarray, labels: np.ndarray, steps: int
) -> float:
    """Up to ``steps`` local mini-batch updates; returns mean batch loss
    (NaN when the worker's shard is already exhausted this epoch)."""
    losses = []
    while steps > 0 and worker.cursor < len(worker.batches):
        idx = worker.batches[worker.cursor]
        probs, cache = forward(worker.model, images[idx])
        value = batch_loss(probs, labels[idx])
        if not np.isfinite(value):
            raise TrainingDivergedError(
                worker.cursor, f"worker loss {value}"
            )
        grads = backward(worker.model, cache, labels[idx])
        sgd_momentum_step(worker.opt, worker.model, grads)
        losses.append(value)
        worker.cursor += 1
        steps -= 1
    return float(np.mean(losses)) if losses else float("nan")


def train_parallel(
    ds: Dataset,
    cfg: TrainConfig,
    k: int,
    sync_interval: int = 1,
    model: CnnModel | None = None,
) -> tuple[CnnModel, list[SyncRoundReport]]:
    """Synchronous parameter-averaged training over ``k`` worker replicas.

    All workers start from the same initial model (built from ``cfg.seed``
    when none is given).  Shards are rebuilt each epoch from ``cfg.seed +
    epoch``, so ``k=1`` visits batches in exactly the sequential trainer's
    order and produces a bit-identical model.
    """
    if k < 1:
        raise ValueError("worker count must be >= 1")
    if sync_interval < 1:
        raise ValueError("sync_interval must be >= 1")
    rows, cols = ds.image_shape
    if model is None:
        model = build_recognition_model((rows, cols), ds.num_classes, seed=cfg.seed)
    elif model.input_shape != (1, rows, cols):
        raise ValueError(
            f"model input {model.input_shape} does not match data (1, {rows}, {cols})"
        )
    images = ds.stacked()[:, None, :, :]
    labels = ds.labels()

    workers = [
        _Worker(
            model=copy.deepcopy(model),
            opt=OptimizerState.for_model(
                model, cfg.learning_rate, cfg.momentum, cfg.l2
            ),
        )
        for _ in range(k)
    ]
    reports: list[SyncRoundReport] = []
    round_index = 0
    with ThreadPoolExecutor(max_workers=k) as pool:
        for epoch in range(cfg.epochs):
            plan = shard_dataset(ds, k, cfg.seed + epoch)
            for w, shard in zip(workers, plan.shards):
                w.batches = _cut_batches(shard, cfg.minibatch_size)
                w.cursor = 0
            rounds = -(-max(len(w.batches) for w in workers) // sync_interval)
            for _ in range(rounds):
                futures = [
                    pool.submit(
                        _run_local_steps, w, images, labels, sync_interval
                    )
                    for w in workers
                ]
                losses = [f.result() for f in futures]
                averaged = average_parameters([w.model for w in workers])
                mean_velocities = _average_tensors(
                    [w.opt.velocities for w in workers]
                )
                for w in workers:
                    for p, src in zip(w.model.parameters(), averaged.parameters()):
                        p[...] = src
                    for v, src in zip(w.opt.velocities, mean_velocities):
                        v[...] = src
                reports.append(
                    SyncRoundReport(
                        round_index=round_index,
                        worker_losses=losses,
                        checksum=parameter_checksum(averaged),
                    )
                )
                round_index += 1
            logger.info(
                "epoch %d: %d averaging rounds, checksum %.6e",
                epoch,
                rounds,
                reports[-1].checksum,
            )
    final = average_parameters([w.model for w in workers])
    return final, reports
