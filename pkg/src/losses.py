# src/losses.py: frame-level objectives returning loss value and dLoss/dLogits
#
# Gradients are taken with respect to the pre-temperature logits z, so every
# dLogits carries the 1/T factor of y = softmax(z / T). No T^2 rescaling.

from dataclasses import dataclass
from typing import Optional

import numpy as np
from loguru import logger
from scipy.special import softmax

from src.config import LOG_FLOOR
from src.errors import ParameterError, ShapeError

SOFT_ROW_TOLERANCE = 1e-9


@dataclass(frozen=True)
class TargetBatch:
    kind: str
    hard: Optional[np.ndarray] = None
    soft: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind == "hard":
            if self.hard is None or self.hard.ndim != 1:
                raise ParameterError("hard targets need a 1-D vector of class indices")
        elif self.kind == "soft":
            if self.soft is None or self.soft.ndim != 2:
                raise ParameterError("soft targets need a B x J matrix")
            if np.any(self.soft < 0) or np.any(np.abs(self.soft.sum(axis=1) - 1.0) > SOFT_ROW_TOLERANCE):
                raise ParameterError("soft target rows must be nonnegative and sum to 1")
        else:
            raise ParameterError(f"unknown target kind {self.kind!r}")

    @classmethod
    def from_labels(cls, labels):
        return cls("hard", hard=np.asarray(labels, dtype=np.int64))

    @classmethod
    def from_posteriors(cls, posteriors):
        return cls("soft", soft=np.asarray(posteriors, dtype=np.float64))

    def __len__(self):
        return len(self.hard) if self.kind == "hard" else self.soft.shape[0]

    def as_soft(self, num_classes):
        if self.kind == "soft":
            return self.soft
        onehot = np.zeros((len(self.hard), num_classes))
        onehot[np.arange(len(self.hard)), self.hard] = 1.0
        return onehot


@dataclass
class LossResult:
    value: float
    d_logits: np.ndarray
    kind: str = "ce"
    floored: int = 0


def softmax_temperature(logits, temperature=1.0):
    if temperature <= 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    # scipy subtracts the row max before exponentiating
    return softmax(logits / temperature, axis=1)


def _floored_log(y):
    floored = int(np.count_nonzero(y < LOG_FLOOR))
    if floored:
        logger.warning(f"⚠️ {floored} posterior entries below {LOG_FLOOR:g} clamped before log")
    return np.log(np.maximum(y, LOG_FLOOR)), floored


def _check_batch(y, n_targets):
    if y.ndim != 2 or y.shape[0] != n_targets:
        raise ShapeError(f"posteriors {y.shape} do not match {n_targets} targets")


def ce_loss(y, targets, temperature=1.0):
    if targets.kind != "hard":
        raise ParameterError("ce_loss needs hard targets")
    _check_batch(y, len(targets))
    B, J = y.shape
    labels = targets.hard
    if np.any(labels < 0) or np.any(labels >= J):
        raise ParameterError(f"class index out of range [0, {J})")
    log_y, floored = _floored_log(y[np.arange(B), labels])
    d_logits = y.copy()
    d_logits[np.arange(B), labels] -= 1.0
    d_logits /= B * temperature
    return LossResult(float(-log_y.mean()), d_logits, kind="ce", floored=floored)


def kl_loss(y, targets, temperature=1.0):
    """Cross-entropy against teacher posteriors; teacher and student share T."""
    if targets.kind != "soft":
        raise ParameterError("kl_loss needs soft targets")
    _check_batch(y, len(targets))
    if targets.soft.shape != y.shape:
        raise ShapeError(f"soft targets {targets.soft.shape} do not match posteriors {y.shape}")
    B = y.shape[0]
    log_y, floored = _floored_log(y)
    value = float(-(targets.soft * log_y).sum(axis=1).mean())
    d_logits = (y - targets.soft) / (B * temperature)
    return LossResult(value, d_logits, kind="kl", floored=floored)


def hybrid_loss(y, soft_targets, hard_targets, q, temperature=1.0):
    if q < 0:
        raise ParameterError(f"interpolation weight q must be nonnegative, got {q}")
    kl = kl_loss(y, soft_targets, temperature)
    ce = ce_loss(y, hard_targets, temperature)
    return LossResult(
        kl.value + q * ce.value,
        kl.d_logits + q * ce.d_logits,
        kind="hybrid",
        floored=kl.floored + ce.floored,
    )


def entropy(y):
    log_y, _ = _floored_log(y)
    return -(y * log_y).sum(axis=1)
