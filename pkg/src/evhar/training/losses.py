"""Focal loss with inverse-frequency class weights."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, DegenerateClassError, LabelError
from ..tensor_engine import log_softmax

P_MIN = 1e-12


@dataclass(frozen=True)
class FocalLossConfig:
    gamma: float = 2.0
    alpha: tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        if self.gamma < 0:
            raise ConfigError("focal loss gamma must be >= 0")
        if any(not a > 0 for a in self.alpha):
            raise ConfigError("class weights must be positive")

    def weights(self, num_classes: int) -> np.ndarray:
        if not self.alpha:
            return np.ones(num_classes)
        if len(self.alpha) != num_classes:
            raise ConfigError(f"{len(self.alpha)} class weights for {num_classes} classes")
        return np.asarray(self.alpha)


def class_weights(counts) -> np.ndarray:
    """``alpha_c = N / (K * n_c)``; a balanced dataset gives all ones."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0:
        raise ConfigError("counts must be a non-empty vector")
    if np.any(counts <= 0):
        raise DegenerateClassError(f"every class needs at least one sample, got counts {counts.tolist()}")
    return counts.sum() / (counts.size * counts)


def focal_loss(logits: np.ndarray, labels, config: FocalLossConfig = FocalLossConfig()) -> tuple[float, np.ndarray]:
    """Mean focal loss over the batch and its gradient w.r.t. ``logits``.

    Per sample: ``-alpha_y * (1 - p_y)**gamma * log(p_y)`` with ``p = softmax``
    and ``p_y`` clamped to at least ``1e-12`` inside the log.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    if labels.shape != (b,):
        raise LabelError(f"expected {b} labels, got shape {labels.shape}")
    if b and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"labels must lie in [0, {k})")
    z = logits.astype(np.float64)
    alpha = config.weights(k)[labels]
    gamma = config.gamma
    logp_all = log_softmax(z)
    probs = np.exp(logp_all)
    rows = np.arange(b)
    logp = np.maximum(logp_all[rows, labels], np.log(P_MIN))
    p = np.exp(logp)
    q = 1.0 - p
    mod = q**gamma
    loss = -alpha * mod * logp
    # d loss / d p_y, multiplied through by p_y so the softmax Jacobian
    # p_y (delta_yj - p_j) reduces to a coefficient times (onehot - p).
    if gamma == 0:
        dmod = np.zeros(b)
    else:
        safe_q = np.where(q > 0, q, 1.0)
        dmod = np.where(q > 0, gamma * safe_q ** (gamma - 1.0) * p * logp, 0.0)
    coef = -alpha * (mod - dmod)
    # Clamped samples have a flat loss in the logits.
    coef = np.where(logp_all[rows, labels] < np.log(P_MIN), 0.0, coef)
    onehot = np.zeros_like(z)
    onehot[rows, labels] = 1.0
    grad = coef[:, None] * (onehot - probs) / b
    return float(loss.mean()), grad.astype(logits.dtype)


def cross_entropy(logits: np.ndarray, labels) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    lp = log_softmax(np.asarray(logits, dtype=np.float64))
    return float(-lp[np.arange(len(labels)), labels].mean())
