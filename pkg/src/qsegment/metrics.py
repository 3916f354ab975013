"""Confusion counts, Dice, accuracy and ROC-AUC over pooled pixels."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

REPORT_KEYS = ("dice", "accuracy", "auc", "tp", "tn", "fp", "fn", "threshold", "n_images")


@dataclass
class MetricReport:
    dice: float
    accuracy: float
    auc: float
    tp: int
    tn: int
    fp: int
    fn: int
    threshold: float
    n_images: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        if set(d) != set(REPORT_KEYS):
            raise ValueError(f"metric report keys {sorted(d)} != {sorted(REPORT_KEYS)}")
        return cls(**d)


def confusion(probs: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> tuple[int, int, int, int]:
    if probs.shape != gt.shape:
        raise ValueError(f"probs {probs.shape} and gt {gt.shape} differ")
    pred = probs >= threshold
    truth = gt.astype(bool)
    tp = int(np.count_nonzero(pred & truth))
    tn = int(np.count_nonzero(~pred & ~truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return tp, tn, fp, fn


def dice_accuracy(counts) -> tuple[float, float]:
    tp, tn, fp, fn = counts
    total = tp + tn + fp + fn
    denom = 2 * tp + fp + fn
    # both masks empty counts as perfect agreement
    dice = 1.0 if denom == 0 else 2 * tp / denom
    acc = (tp + tn) / total if total else 1.0
    return float(dice), float(acc)


def dice_between(a: np.ndarray, b: np.ndarray) -> float:
    """Dice between two binary masks."""
    return dice_accuracy(confusion(a.astype(np.float64), b, 0.5))[0]


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """ROC-AUC by threshold sweep with tied scores grouped (trapezoidal)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in size")
    P = int(y.sum())
    N = y.size - P
    if P == 0 or N == 0:
        raise ValueError("AUC undefined: labels contain a single class")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last position of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(y)[ends]
    fps = (ends + 1) - tps
    tpr = np.r_[0, tps] / P
    fpr = np.r_[0, fps] / N
    return float(np.trapezoid(tpr, fpr))


def evaluate(probs: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> MetricReport:
    """Micro-averaged report over every pixel of every image in ``probs``."""
    counts = confusion(probs, gt, threshold)
    dice, acc = dice_accuracy(counts)
    try:
        a = auc(probs, gt)
    except ValueError:
        a = float("nan")
    tp, tn, fp, fn = counts
    return MetricReport(dice, acc, a, tp, tn, fp, fn, float(threshold), int(probs.shape[0]))
