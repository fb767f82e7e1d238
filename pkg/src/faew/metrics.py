"""Pixel confusion counts, Pr/Rc/F1/IoU and four-colour confusion rendering."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from math import lcm

import numpy as np

from .errors import DataError

# TP white, TN black, FP red, FN blue
COLORS = {
    "tp": (255, 255, 255),
    "tn": (0, 0, 0),
    "fp": (255, 0, 0),
    "fn": (0, 0, 255),
}


@dataclass(frozen=True)
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "Counts") -> "Counts":
        return Counts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricReport:
    """Counts plus derived metrics in percent. ``degenerate`` marks a zero denominator."""

    tp: int
    fp: int
    fn: int
    tn: int
    pr: float
    rc: float
    f1: float
    iou: float
    degenerate: bool = False

    @property
    def counts(self) -> Counts:
        return Counts(self.tp, self.fp, self.fn, self.tn)

    def row(self) -> str:
        return f"{self.pr:.2f}\t{self.rc:.2f}\t{self.f1:.2f}\t{self.iou:.2f}"


def _binary(a, name: str) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype == bool:
        return a
    if not np.all((a == 0) | (a == 1)):
        raise DataError(f"{name} must be binary (0/1)")
    return a.astype(bool)


def confusion_counts(pred, truth) -> Counts:
    p = _binary(pred, "prediction")
    t = _binary(truth, "truth")
    if p.shape != t.shape:
        raise DataError(f"prediction shape {p.shape} != truth shape {t.shape}")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return Counts(tp, fp, fn, p.size - tp - fp - fn)


def _ratio(num: int, den: int) -> tuple:
    return (num / den, False) if den else (0.0, True)


def derive_metrics(counts: Counts) -> MetricReport:
    tp, fp, fn, tn = counts.tp, counts.fp, counts.fn, counts.tn
    if min(tp, fp, fn, tn) < 0:
        raise DataError(f"negative counts: {counts}")
    pr, d1 = _ratio(tp, tp + fp)
    rc, d2 = _ratio(tp, tp + fn)
    f1, d3 = _ratio(2 * pr * rc, pr + rc)
    iou, d4 = _ratio(tp, tp + fp + fn)
    return MetricReport(tp, fp, fn, tn, 100 * pr, 100 * rc, 100 * f1, 100 * iou, d1 or d2 or d3 or d4)


def counts_for(pr: float, rc: float, tn: int = 0) -> Counts:
    """Smallest integer counts whose precision and recall equal ``pr`` and ``rc`` percent exactly."""
    p, r = Fraction(str(pr)) / 100, Fraction(str(rc)) / 100
    if not (0 < p <= 1 and 0 < r <= 1):
        raise DataError(f"precision and recall must be in (0, 100], got {pr}, {rc}")
    fp_per_tp, fn_per_tp = (1 - p) / p, (1 - r) / r
    tp = lcm(fp_per_tp.denominator, fn_per_tp.denominator)
    return Counts(tp, int(fp_per_tp * tp), int(fn_per_tp * tp), tn)


def evaluate_maps(preds, truths) -> MetricReport:
    """Micro-average: sum counts over all tiles, then derive."""
    total = Counts()
    for p, t in zip(preds, truths):
        total = total + confusion_counts(p, t)
    return derive_metrics(total)


def render_confusion(pred, truth) -> np.ndarray:
    """H x W x 3 uint8 image: white TP, black TN, red FP, blue FN."""
    p = _binary(pred, "prediction")
    t = _binary(truth, "truth")
    if p.shape != t.shape:
        raise DataError(f"prediction shape {p.shape} != truth shape {t.shape}")
    img = np.zeros(p.shape + (3,), dtype=np.uint8)
    img[p & t] = COLORS["tp"]
    img[p & ~t] = COLORS["fp"]
    img[~p & t] = COLORS["fn"]
    return img
