"""Boundary-weighted BCE + IoU objective on logits."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, avgpool_same, sigmoid

WEIGHT_KERNEL = 31
DEFAULT_LAMBDA = 5.0


@dataclass
class LossOutput:
    wbce: float
    wiou: float
    total: float


def _check_binary(gt: np.ndarray) -> None:
    if not np.all((gt == 0) | (gt == 1)):
        raise ValueError("ground truth must be binary {0, 1}")


def weight_map(gt: np.ndarray, lam: float = DEFAULT_LAMBDA, k: int = WEIGHT_KERNEL) -> np.ndarray:
    """``1 + lam * |avgpool(gt) - gt|``: large near mask boundaries, 1 in flat regions."""
    _check_binary(gt)
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    g = gt.astype(np.float64)
    return 1.0 + lam * np.abs(avgpool_same(g, k) - g)


def loss_and_grad(logits: np.ndarray, gt: np.ndarray, lam: float = DEFAULT_LAMBDA, weights=None):
    """Return ``(LossOutput, dtotal/dlogits)``.

    Both terms are reduced per image and then averaged over the batch; the
    total is the mean of the two.
    """
    if logits.shape != gt.shape:
        raise ShapeError(f"logits {logits.shape} and gt {gt.shape} differ")
    _check_binary(gt)
    w = weight_map(gt, lam) if weights is None else weights
    z = logits.astype(np.float64)
    g = gt.astype(np.float64)
    n = z.shape[0]
    axes = tuple(range(1, z.ndim))

    p = sigmoid(z)
    bce = np.maximum(z, 0) - z * g + np.log1p(np.exp(-np.abs(z)))
    wsum = w.sum(axis=axes)
    wbce = (w * bce).sum(axis=axes) / wsum

    inter = (w * p * g).sum(axis=axes) + 1.0
    union = (w * (p + g - p * g)).sum(axis=axes) + 1.0
    wiou = 1.0 - inter / union

    total = 0.5 * (wbce.mean() + wiou.mean())

    shape = (n,) + (1,) * (z.ndim - 1)
    d_wbce = w * (p - g) / wsum.reshape(shape)
    dinter = w * g
    dunion = w * (1.0 - g)
    d_wiou_dp = -(dinter * union.reshape(shape) - inter.reshape(shape) * dunion) / (union**2).reshape(shape)
    d_wiou = d_wiou_dp * p * (1.0 - p)
    grad = 0.5 * (d_wbce + d_wiou) / n

    out = LossOutput(float(wbce.mean()), float(wiou.mean()), float(total))
    return out, grad.astype(logits.dtype)


def loss(logits: np.ndarray, gt: np.ndarray, lam: float = DEFAULT_LAMBDA) -> LossOutput:
    return loss_and_grad(logits, gt, lam)[0]
