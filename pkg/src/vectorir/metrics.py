"""Regression and hotspot-classification metrics for per-instance IR drop."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

HOTSPOT_THRESHOLD = 8e-3  # volts


def tileize_ir(ir, loc, shape: tuple[int, int], granularity: int = 1):
    """Mean IR of the instances in each ``g x g`` block of tiles.

    Returns ``(values, occupied)``; empty blocks hold 0 and are flagged
    unoccupied so that classification can skip them.
    """
    ir = np.asarray(ir, dtype=np.float64)
    loc = np.asarray(loc).reshape(-1, 2)
    g = int(granularity)
    if g <= 0:
        raise ValueError("granularity must be positive")
    W, L = -(-shape[0] // g), -(-shape[1] // g)
    flat = (loc[:, 0] // g) * L + loc[:, 1] // g
    total = np.bincount(flat, weights=ir, minlength=W * L)
    count = np.bincount(flat, minlength=W * L)
    mean = np.divide(total, count, out=np.zeros(W * L), where=count > 0)
    return mean.reshape(W, L), (count > 0).reshape(W, L)


@dataclass(frozen=True)
class Classification:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else float("nan")

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0


def classify_and_score(pred_map, golden_map, threshold: float = HOTSPOT_THRESHOLD,
                       mask=None) -> Classification:
    """Confusion counts for ``value > threshold`` over the tiles in ``mask``."""
    pred_map = np.asarray(pred_map, dtype=np.float64)
    golden_map = np.asarray(golden_map, dtype=np.float64)
    if pred_map.shape != golden_map.shape:
        raise ValueError(f"map shapes differ: {pred_map.shape} vs {golden_map.shape}")
    keep = np.ones(pred_map.shape, bool) if mask is None else np.asarray(mask, bool)
    p = pred_map[keep] > threshold
    g = golden_map[keep] > threshold
    return Classification(int(np.sum(p & g)), int(np.sum(p & ~g)),
                          int(np.sum(~p & g)), int(np.sum(~p & ~g)))


@dataclass(frozen=True)
class PRCurve:
    points: list  # (recall, precision), one per distinct threshold, descending threshold
    thresholds: np.ndarray
    auc: float
    baseline: float  # positive fraction


def pr_auc(scores, labels, mask=None) -> PRCurve:
    """Precision-recall curve over every distinct score and its area.

    A threshold ``s`` labels every item with score ``>= s`` positive, so tied
    scores enter together. The area is the step-wise sum
    ``sum_k (R_k - R_{k-1}) P_k`` starting from recall 0.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=bool).reshape(-1)
    if mask is not None:
        keep = np.asarray(mask, bool).reshape(-1)
        scores, labels = scores[keep], labels[keep]
    npos = int(labels.sum())
    if npos == 0:
        raise ValueError("precision-recall needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last = np.flatnonzero(np.r_[s[1:] != s[:-1], True])  # end of each tie group
    tp = np.cumsum(y)[last]
    predicted = last + 1
    recall = tp / npos
    precision = tp / predicted
    auc = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    return PRCurve(list(zip(recall.tolist(), precision.tolist())), s[last], auc, npos / len(labels))


def rmse_mae(pred, golden) -> tuple[float, float, float]:
    """``(rmse, mean absolute error, max absolute error)`` in the input units."""
    err = np.asarray(pred, dtype=np.float64) - np.asarray(golden, dtype=np.float64)
    if err.size == 0:
        raise ValueError("no values to compare")
    a = np.abs(err)
    return float(math.sqrt(np.mean(err * err))), float(a.mean()), float(a.max())


def _sig(v: float) -> str:
    return f"{v:.4g}"


@dataclass
class MetricReport:
    rmse: float
    mae: float
    max_abs: float
    accuracy_1x1: float
    f1_1x1: float
    accuracy_6x6: float
    f1_6x6: float
    auc_1x1: float = float("nan")
    auc_6x6: float = float("nan")
    baseline_1x1: float = float("nan")
    baseline_6x6: float = float("nan")
    pr_curve: list = field(default_factory=list)  # 6x6 curve

    def rows(self) -> list[tuple[str, str]]:
        return [
            ("rmse_mV", _sig(self.rmse * 1e3)),
            ("mae_mV", _sig(self.mae * 1e3)),
            ("max_abs_mV", _sig(self.max_abs * 1e3)),
            ("accuracy_1x1", _sig(self.accuracy_1x1)),
            ("f1_1x1", _sig(self.f1_1x1)),
            ("accuracy_6x6", _sig(self.accuracy_6x6)),
            ("f1_6x6", _sig(self.f1_6x6)),
            ("pr_auc_1x1", _sig(self.auc_1x1)),
            ("pr_baseline_1x1", _sig(self.baseline_1x1)),
            ("pr_auc_6x6", _sig(self.auc_6x6)),
            ("pr_baseline_6x6", _sig(self.baseline_6x6)),
        ]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            w.writerows(self.rows())

    def write_pr_curve(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["recall", "precision"])
            w.writerows((repr(r), repr(p)) for r, p in self.pr_curve)


def evaluate(pred, golden, loc, shape, threshold: float = HOTSPOT_THRESHOLD,
             region: int = 6) -> MetricReport:
    """Every metric for one set of per-instance predictions.

    ``pred``/``golden`` may also be lists of arrays (several slices of one
    design); tile maps and classification are pooled across them.
    """
    if isinstance(pred, np.ndarray) and pred.ndim == 1:
        pred, golden = [pred], [golden]
    rm = rmse_mae(np.concatenate(pred), np.concatenate(golden))
    maps = {1: ([], [], []), region: ([], [], [])}
    for p, g in zip(pred, golden):
        for gran, (pm, gm, mk) in maps.items():
            a, occ = tileize_ir(p, loc, shape, gran)
            b, _ = tileize_ir(g, loc, shape, gran)
            pm.append(a.ravel())
            gm.append(b.ravel())
            mk.append(occ.ravel())
    out = {}
    for gran, (pm, gm, mk) in maps.items():
        pm, gm, mk = np.concatenate(pm), np.concatenate(gm), np.concatenate(mk)
        cls = classify_and_score(pm, gm, threshold, mk)
        hot = gm > threshold
        curve = pr_auc(pm, hot, mk) if np.any(hot & mk) else None
        out[gran] = (cls, curve)
    c1, p1 = out[1]
    c6, p6 = out[region]
    nan = float("nan")
    return MetricReport(
        rmse=rm[0], mae=rm[1], max_abs=rm[2],
        accuracy_1x1=c1.accuracy, f1_1x1=c1.f1, accuracy_6x6=c6.accuracy, f1_6x6=c6.f1,
        auc_1x1=p1.auc if p1 else nan, auc_6x6=p6.auc if p6 else nan,
        baseline_1x1=p1.baseline if p1 else nan, baseline_6x6=p6.baseline if p6 else nan,
        pr_curve=p6.points if p6 else [],
    )
