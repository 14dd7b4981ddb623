"""Tolerance accuracy, composite ordinal loss and their analytic gradients.

Losses take batches: probabilities/logits of shape ``(n, K)`` (a single
``(K,)`` vector is treated as a batch of one) and integer targets of shape
``(n,)``. Every loss is the arithmetic mean over the batch, and every
gradient is the gradient of that mean.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np

PROB_FLOOR = 1e-12
NUM_CLASSES = 21


class EmptyInput(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class AllZeroCounts(ValueError):
    pass


@dataclass
class EvalVectors:
    y_true: np.ndarray
    y_pred: np.ndarray
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        self.y_true = np.asarray(self.y_true, dtype=np.int64)
        self.y_pred = np.asarray(self.y_pred, dtype=np.int64)
        if self.y_true.shape != self.y_pred.shape:
            raise LengthMismatch(f"{self.y_true.shape} labels vs {self.y_pred.shape} predictions")
        if self.y_true.size == 0:
            raise EmptyInput("no samples")
        for arr in (self.y_true, self.y_pred):
            if arr.min() < 0 or arr.max() >= self.num_classes:
                raise ValueError(f"labels must lie in [0, {self.num_classes - 1}]")

    @property
    def n(self) -> int:
        return int(self.y_true.size)


def cap(y_true, y_pred, k: int) -> float:
    """Fraction of predictions within ``k`` classes of the truth."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise LengthMismatch(f"{y_true.shape} labels vs {y_pred.shape} predictions")
    if y_true.size == 0:
        raise EmptyInput("CAP of an empty set")
    if k < 0:
        raise ValueError("tolerance must be non-negative")
    hits = int(np.count_nonzero(np.abs(y_true - y_pred) <= k))
    return hits / y_true.size


@dataclass
class LossConfig:
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 2.0
    weights: Optional[np.ndarray] = None  # None means every class weighs 1

    def __post_init__(self):
        if not (0 <= self.alpha <= 1 and 0 <= self.beta <= 1):
            raise ValueError("alpha and beta must lie in [0, 1]")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if np.any(self.weights <= 0):
                raise ValueError("class weights must be positive")

    @classmethod
    def from_mapping(cls, d: Mapping, class_counts: Optional[Sequence[int]] = None) -> "LossConfig":
        """Build from a config section; ``weights = "auto"`` derives them from ``class_counts``."""
        weights = d.get("weights")
        if weights == "auto":
            if class_counts is None:
                raise ValueError('weights = "auto" needs class counts')
            weights = inverse_frequency_weights(class_counts)
        return cls(float(d.get("alpha", 0.5)), float(d.get("beta", 0.5)), float(d.get("gamma", 2.0)), weights)

    def class_weight(self, y: np.ndarray) -> np.ndarray:
        if self.weights is None:
            return np.ones(len(y))
        return self.weights[y]


def _batch(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim == 1:
        x, y = x[None, :], y.reshape(1)
    if len(x) != len(y):
        raise LengthMismatch(f"{len(x)} rows vs {len(y)} targets")
    if len(x) == 0:
        raise EmptyInput("empty batch")
    return x, y


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_sigmoid(t: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -np.asarray(t, dtype=np.float64))


def sigmoid(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    e = np.exp(-np.abs(t))
    return np.where(t >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def focused_loss(p, y, cfg: LossConfig = LossConfig()) -> float:
    """Class-weighted focal cross-entropy, ``w(y) (1 - p_y)^gamma (-log p_y)``."""
    p, y = _batch(p, y)
    py = p[np.arange(len(y)), y]
    per = cfg.class_weight(y) * (1.0 - py) ** cfg.gamma * -np.log(np.maximum(py, PROB_FLOOR))
    return float(per.mean())


def distance_loss(p, y) -> float:
    """Expected absolute class distance under ``p``."""
    p, y = _batch(p, y)
    dist = np.abs(np.arange(p.shape[1])[None, :] - y[:, None])
    return float((p * dist).sum(axis=1).mean())


def cumulative_targets(y, num_classes: int) -> np.ndarray:
    """``targets[:, k] = 1`` iff the class is at least ``k + 1``."""
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    return (y[:, None] >= np.arange(1, num_classes)[None, :]).astype(np.float64)


def ordinal_loss(t, targets) -> float:
    """Summed binary cross-entropy over the K-1 threshold logits."""
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if t.shape != targets.shape:
        raise LengthMismatch(f"{t.shape} logits vs {targets.shape} targets")
    per = -(targets * log_sigmoid(t) + (1.0 - targets) * log_sigmoid(-t)).sum(axis=1)
    return float(per.mean())


def composite_loss(fl: float, dbl: float, orl: float, cfg: LossConfig = LossConfig()) -> float:
    return cfg.alpha * fl + (1.0 - cfg.alpha) * (cfg.beta * orl + (1.0 - cfg.beta) * dbl)


def focused_loss_grad(logits, y, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """Gradient of the batch-mean focused loss with respect to pre-softmax logits."""
    z, y = _batch(logits, y)
    p = softmax(z)
    rows = np.arange(len(y))
    q = p[rows, y]
    w = cfg.class_weight(y)
    g = cfg.gamma
    one_minus = 1.0 - q
    log_q = np.log(np.maximum(q, PROB_FLOOR))
    inv_q = np.where(q >= PROB_FLOOR, 1.0 / np.maximum(q, PROB_FLOOR), 0.0)
    # d/dq of (1-q)^g; zero exponent and q == 1 both collapse the term
    if g == 0:
        d_focus = np.zeros_like(q)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            d_focus = np.where(one_minus > 0, -g * one_minus ** (g - 1), 0.0)
    dloss_dq = w * (d_focus * -log_q + one_minus ** g * -inv_q)
    onehot = np.zeros_like(p)
    onehot[rows, y] = 1.0
    grad = (dloss_dq * q)[:, None] * (onehot - p)
    return grad / len(y)


def distance_loss_grad(logits, y) -> np.ndarray:
    z, y = _batch(logits, y)
    p = softmax(z)
    dist = np.abs(np.arange(p.shape[1])[None, :] - y[:, None])
    expected = (p * dist).sum(axis=1, keepdims=True)
    return p * (dist - expected) / len(y)


def ordinal_loss_grad(t, targets) -> np.ndarray:
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    return (sigmoid(t) - targets) / len(t)


def inverse_frequency_weights(class_counts: Sequence[int]) -> np.ndarray:
    """``n / (K_present * count)``, rescaled to mean 1 over present classes.

    Classes with no samples get the largest present weight.
    """
    counts = np.asarray(class_counts, dtype=np.float64)
    present = counts > 0
    if not present.any():
        raise AllZeroCounts("every class count is zero")
    raw = counts.sum() / (present.sum() * np.maximum(counts, 1.0))
    w = raw / raw[present].mean()
    w[~present] = w[present].max()
    return w


@dataclass
class PerTraceResult:
    tolerance: int
    accuracy: float
    points: list[tuple[int, int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"tolerance": self.tolerance, "accuracy": self.accuracy, "points": [list(p) for p in self.points]}


def per_trace_eval(traces: Sequence[tuple[Sequence[int], Sequence[int]]], tolerance: int = 3) -> PerTraceResult:
    """Compare summed labels and summed predictions per trace.

    Each trace is ``(window labels, window predictions)`` over non-overlapping
    windows; a trace counts as accurate when the sums differ by at most
    ``tolerance``.
    """
    if not traces:
        raise EmptyInput("no traces")
    points = []
    for labels, preds in traces:
        if len(labels) != len(preds):
            raise LengthMismatch(f"{len(labels)} labels vs {len(preds)} predictions")
        points.append((int(sum(labels)), int(sum(preds))))
    hits = sum(abs(p - t) <= tolerance for t, p in points)
    return PerTraceResult(tolerance, hits / len(points), points)


def evaluation_report(
    y_true: Sequence[int],
    y_pred: Sequence[int],
    tolerances: Sequence[int],
    per_trace: PerTraceResult,
) -> dict:
    return {
        "cap": {str(k): cap(y_true, y_pred, k) for k in tolerances},
        "per_trace": per_trace.to_dict(),
    }


def dump_report(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True) + "\n"
