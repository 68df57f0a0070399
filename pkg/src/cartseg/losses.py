"""Tversky index / loss over soft predictions.

With soft counts TP = sum(p*g), FN = sum((1-p)*g), FP = sum(p*(1-g)):

    T = (TP + eps) / (TP + alpha*FN + beta*FP + eps)

alpha weights missed foreground, beta weights spurious foreground. The
numerator counts foreground agreement; alpha = beta = 0.5 recovers soft Dice.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


@dataclass(frozen=True)
class TverskyParams:
    alpha: float = 0.4
    beta: float = 0.6
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError(f"need alpha, beta >= 0 with alpha + beta > 0, got {self.alpha}, {self.beta}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")


def _as_truth(truth, like: Tensor) -> Tensor:
    g = truth.data if isinstance(truth, Tensor) else np.asarray(truth)
    if g.shape != like.shape:
        raise dc.ShapeError(f"prediction shape {like.shape} does not match truth shape {g.shape}")
    return Tensor(g.astype(like.dtype, copy=False))


def soft_counts(pred: Tensor, truth, axis=None) -> tuple[Tensor, Tensor, Tensor]:
    """(TP, FN, FP) soft counts, reduced over ``axis`` (all axes by default)."""
    g = _as_truth(truth, pred)
    tp = dc.tsum(pred * g, axis)
    fn = dc.tsum((1.0 - pred) * g, axis)
    fp = dc.tsum(pred * (1.0 - g), axis)
    return tp, fn, fp


def _index(tp: Tensor, fn: Tensor, fp: Tensor, params: TverskyParams) -> Tensor:
    num = tp + params.epsilon
    den = tp + params.alpha * fn + params.beta * fp + params.epsilon
    return num / den


def tversky_index(pred: Tensor, truth, params: TverskyParams = TverskyParams()) -> Tensor:
    """Scalar Tversky index over every voxel of ``pred``."""
    pred = dc.as_tensor(pred)
    return _index(*soft_counts(pred, truth), params)


def tversky_loss(pred: Tensor, truth, params: TverskyParams = TverskyParams()) -> Tensor:
    """1 - T, computed per sample along axis 0 and averaged over the batch.

    A 0-d or 1-d input is treated as a single sample.
    """
    pred = dc.as_tensor(pred)
    if pred.data.ndim < 2:
        return 1.0 - tversky_index(pred, truth, params)
    axes = tuple(range(1, pred.data.ndim))
    per_sample = _index(*soft_counts(pred, truth, axes), params)
    return dc.mean(1.0 - per_sample)


def soft_dice(pred: np.ndarray, truth: np.ndarray) -> float:
    """Plain-numpy soft Dice 2TP / (2TP + FN + FP), no smoothing."""
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(truth, dtype=np.float64)
    tp = float((p * g).sum())
    fn = float(((1 - p) * g).sum())
    fp = float((p * (1 - g)).sum())
    return 2 * tp / (2 * tp + fn + fp)
