"""Epoch loop: focal loss, AdamW, early stopping on validation weighted F1."""

from __future__ import annotations

import csv
import logging
import os
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import model as M
from ..errors import ConfigError
from .augment import augment, resolve_augment_classes
from .data import ClipDataset, split_indices
from .losses import FocalLossConfig, class_weights, focal_loss
from .metrics import Metrics, metrics
from .optim import AdamWState, OptimizerConfig, adamw_step

log = logging.getLogger(__name__)

LOG_HEADER = ("epoch", "train_loss", "val_loss", "val_acc", "val_f1")


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("EVHAR_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 1000
    patience: int = 100
    split: tuple[float, float, float] = (0.7, 0.15, 0.15)
    seed: int = 0
    gamma: float = 2.0
    optimizer: OptimizerConfig = OptimizerConfig()
    # None selects the classes named "Eating" / "Washing up" when present.
    augmentation_classes: tuple | None = None
    workers: int | None = None
    eval_batch_size: int = 32

    def __post_init__(self):
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ConfigError("split fractions must be three non-negative numbers summing to 1")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    val_f1: float


@dataclass
class TrainReport:
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_f1: float = float("-inf")
    best_val_loss: float = float("inf")
    test: Metrics | None = None
    test_loss: float = float("nan")
    minutes: float = 0.0
    parameter_count: int = 0
    stopped_early: bool = False


@dataclass
class Evaluation:
    loss: float
    metrics: Metrics
    predictions: np.ndarray


def _seed_for(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


class Trainer:
    """Owns the parameters and optimizer state for one training run.

    ``split`` may pass explicit ``(train, val, test)`` index arrays;
    otherwise a seeded per-class split of ``train_config.split`` is used.
    """

    def __init__(
        self,
        dataset: ClipDataset,
        model_config: M.ModelConfig,
        train_config: TrainConfig = TrainConfig(),
        out_dir: str | os.PathLike | None = None,
        split: tuple | None = None,
    ):
        self.dataset = dataset
        self.train_config = train_config
        if model_config.num_classes != dataset.num_classes:
            raise ConfigError(f"model has {model_config.num_classes} classes, dataset {dataset.num_classes}")
        if (model_config.clip_length, *model_config.input_resolution) != (dataset.frames, *dataset.resolution):
            raise ConfigError(
                f"dataset clips are {(dataset.frames, *dataset.resolution)}, model expects "
                f"{(model_config.clip_length, *model_config.input_resolution)}"
            )
        self.model_config = model_config
        if split is None:
            split = split_indices(dataset.labels, train_config.split, train_config.seed)
        self.train_idx, self.val_idx, self.test_idx = (np.asarray(s, dtype=np.int64) for s in split)
        for name, part in (("train", self.train_idx), ("validation", self.val_idx)):
            if part.size == 0:
                raise ConfigError(f"{name} split is empty")
        self.alpha = class_weights(dataset.counts(self.train_idx))
        self.loss_config = FocalLossConfig(train_config.gamma, tuple(self.alpha))
        self.augment_classes = resolve_augment_classes(dataset.class_names, train_config.augmentation_classes)
        self.params = M.build(model_config, seed=train_config.seed)
        self.opt_state = AdamWState.zeros_like(self.params)
        self.train_accuracy = float("nan")  # train-mode accuracy of the last epoch's batches
        self.workers = train_config.workers or default_workers()
        self.out_dir = Path(out_dir) if out_dir is not None else None

    # -- batches -----------------------------------------------------------

    def _batches(self, epoch: int) -> list[np.ndarray]:
        order = np.random.default_rng([self.train_config.seed, epoch]).permutation(self.train_idx)
        bs = self.train_config.batch_size
        return [order[s : s + bs] for s in range(0, len(order), bs)]

    def _prepare(self, epoch: int, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        clips = self.dataset.batch(idx, "train")
        labels = self.dataset.labels[idx]
        for j, (i, y) in enumerate(zip(idx, labels)):
            if y in self.augment_classes:
                rng = np.random.default_rng([self.train_config.seed, epoch, int(i)])
                clips[j] = augment(clips[j], int(y), self.augment_classes, rng)
        return clips, labels

    def _prefetched(self, epoch: int):
        """Yield prepared batches in seeded order, preparing up to ``workers`` ahead."""
        batches = self._batches(epoch)
        if self.workers <= 1:
            for idx in batches:
                yield self._prepare(epoch, idx)
            return
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            pending = deque()
            it = iter(batches)
            for idx in it:
                pending.append(pool.submit(self._prepare, epoch, idx))
                if len(pending) > self.workers:
                    break
            while pending:
                yield pending.popleft().result()
                nxt = next(it, None)
                if nxt is not None:
                    pending.append(pool.submit(self._prepare, epoch, nxt))

    # -- epochs ------------------------------------------------------------

    def train_epoch(self, epoch: int) -> float:
        """One pass over the training split; returns the sample-weighted mean loss."""
        total, seen, correct = 0.0, 0, 0
        for b, (clips, labels) in enumerate(self._prefetched(epoch)):
            logits, caches = M.forward(
                self.params, self.model_config, clips, mode="train", seed=_seed_for(self.train_config.seed, epoch, b)
            )
            loss, grad = focal_loss(logits, labels, self.loss_config)
            M.backward(self.params, self.model_config, caches, grad)
            adamw_step(self.params, self.opt_state, self.train_config.optimizer)
            total += loss * len(labels)
            seen += len(labels)
            correct += int(np.sum(np.argmax(logits, axis=1) == labels))
        self.train_accuracy = correct / seen
        return total / seen

    def evaluate(self, indices, phase: str = "val", params: M.ModelParams | None = None) -> Evaluation:
        return evaluate(
            self.params if params is None else params,
            self.model_config,
            self.dataset,
            indices,
            self.loss_config,
            phase,
            self.train_config.eval_batch_size,
        )

    def fit(self) -> tuple[M.ModelParams, TrainReport]:
        """Train until patience runs out or ``max_epochs``, then test the best model."""
        cfg = self.train_config
        report = TrainReport(parameter_count=self.params.count())
        start = time.perf_counter()
        best_params = self.params.copy()
        stale = 0
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            log_file = open(self.out_dir / "training_log.csv", "w", newline="")
            writer = csv.writer(log_file, lineterminator="\n")
            writer.writerow(LOG_HEADER)
        else:
            log_file = writer = None
        try:
            for epoch in range(1, cfg.max_epochs + 1):
                train_loss = self.train_epoch(epoch)
                ev = self.evaluate(self.val_idx, "val")
                rec = EpochRecord(epoch, train_loss, ev.loss, ev.metrics.accuracy, ev.metrics.weighted_f1)
                report.history.append(rec)
                if writer is not None:
                    writer.writerow([epoch, repr(train_loss), repr(ev.loss), repr(rec.val_acc), repr(rec.val_f1)])
                    log_file.flush()
                log.info(
                    "epoch %d train_loss %.5f val_loss %.5f val_acc %.4f val_f1 %.4f",
                    epoch, train_loss, ev.loss, rec.val_acc, rec.val_f1,
                )
                report.best_val_loss = min(report.best_val_loss, ev.loss)
                if rec.val_f1 > report.best_val_f1:
                    report.best_val_f1 = rec.val_f1
                    report.best_epoch = epoch
                    best_params = self.params.copy()
                    stale = 0
                    if self.out_dir is not None:
                        M.save_checkpoint(self.out_dir / "best.ckpt", best_params, self.model_config, self._ckpt_meta(report))
                else:
                    stale += 1
                    if stale >= cfg.patience:
                        report.stopped_early = True
                        break
        finally:
            if log_file is not None:
                log_file.close()
        report.minutes = (time.perf_counter() - start) / 60.0
        if self.test_idx.size:
            ev = self.evaluate(self.test_idx, "test", params=best_params)
            report.test = ev.metrics
            report.test_loss = ev.loss
            if self.out_dir is not None:
                write_confusion(self.out_dir / "confusion.csv", ev.metrics.confusion)
                meta = self._ckpt_meta(report)
                M.save_checkpoint(self.out_dir / "best.ckpt", best_params, self.model_config, meta)
        return best_params, report

    def _ckpt_meta(self, report: TrainReport) -> dict:
        cfg = self.train_config
        meta = {
            "best_epoch": report.best_epoch,
            "val_f1": report.best_val_f1,
            "split_seed": cfg.seed,
            "split": ",".join(repr(f) for f in cfg.split),
            "class_names": "|".join(self.dataset.class_names),
            "alpha": ",".join(repr(float(a)) for a in self.alpha),
            "gamma": cfg.gamma,
        }
        if report.test is not None:
            meta["test_accuracy"] = report.test.accuracy
            meta["test_f1"] = report.test.weighted_f1
        return meta


def evaluate(
    params: M.ModelParams,
    model_config: M.ModelConfig,
    dataset: ClipDataset,
    indices,
    loss_config: FocalLossConfig,
    phase: str = "val",
    batch_size: int = 32,
) -> Evaluation:
    """Eval-mode focal loss, metrics and predictions over ``indices`` in order."""
    indices = np.asarray(indices, dtype=np.int64)
    losses, preds = [], []
    for s in range(0, len(indices), batch_size):
        idx = indices[s : s + batch_size]
        logits, _ = M.forward(params, model_config, dataset.batch(idx, phase), mode="eval")
        loss, _ = focal_loss(logits, dataset.labels[idx], loss_config)
        losses.append(loss * len(idx))
        preds.append(np.argmax(logits, axis=1))
    predictions = np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
    m = metrics(predictions, dataset.labels[indices], dataset.num_classes)
    return Evaluation(float(sum(losses) / len(indices)), m, predictions)


def write_confusion(path, confusion: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(confusion):
            writer.writerow(int(v) for v in row)


def read_confusion(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[int(v) for v in row] for row in csv.reader(fh) if row], dtype=np.int64)


def train(
    dataset: ClipDataset,
    model_config: M.ModelConfig,
    train_config: TrainConfig = TrainConfig(),
    out_dir: str | os.PathLike | None = None,
) -> tuple[M.ModelParams, TrainReport]:
    return Trainer(dataset, model_config, train_config, out_dir).fit()
