"""Evaluation metrics for point sets: L1 Chamfer, Hungarian EMD, F-Score.

Conventions: Chamfer is the average of the two directed mean nearest-neighbour
Euclidean distances; EMD is the mean matched distance of the optimal
one-to-one assignment; the F-Score threshold is a percentage of the longest
bounding-box side of the ground-truth set.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

CSV_COLUMNS = ("id", "cd", "emd", "precision", "recall", "f1", "threshold")


def _points(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[-1] != 3:
        raise ValueError(f"{name} must be an (n, 3) array, got shape {x.shape}")
    if len(x) == 0:
        raise ValueError(f"{name} is empty")
    return x


def nn_distances(src, dst) -> np.ndarray:
    """Distance from every point of ``src`` to its nearest point in ``dst``."""
    return cKDTree(dst).query(src, k=1)[0]


def chamfer_l1(x, y) -> float:
    x, y = _points(x, "X"), _points(y, "Y")
    return 0.5 * (nn_distances(x, y).mean() + nn_distances(y, x).mean())


def emd_hungarian(x, y) -> float:
    x, y = _points(x, "X"), _points(y, "Y")
    if len(x) != len(y):
        raise ValueError(f"EMD needs equal cardinality, got {len(x)} and {len(y)}")
    cost = cdist(x, y)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def f_score(x_pred, x_gt, pct: float = 1.0):
    """Precision, recall, F1 and the distance threshold used."""
    if pct <= 0:
        raise ValueError("pct must be > 0")
    x_pred, x_gt = _points(x_pred, "X_pred"), _points(x_gt, "X_gt")
    extent = float(np.max(x_gt.max(axis=0) - x_gt.min(axis=0)))
    if extent <= 0:
        raise ValueError("ground-truth bounding box has zero extent")
    thr = pct / 100.0 * extent
    precision = float(np.mean(nn_distances(x_pred, x_gt) <= thr))
    recall = float(np.mean(nn_distances(x_gt, x_pred) <= thr))
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f1, thr


@dataclass
class EvalReport:
    cd: float
    emd: float
    fscore: float
    precision: float
    recall: float
    threshold_used: float

    def csv_row(self, ident: str) -> list:
        return [ident, self.cd, self.emd, self.precision, self.recall, self.fscore,
                self.threshold_used]


def evaluate_pair(x_pred, x_gt, pct: float = 1.0) -> EvalReport:
    p, r, f1, thr = f_score(x_pred, x_gt, pct)
    return EvalReport(chamfer_l1(x_pred, x_gt), emd_hungarian(x_pred, x_gt), f1, p, r, thr)


def mean_report(reports) -> EvalReport:
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to average")
    keys = asdict(reports[0]).keys()
    return EvalReport(**{k: float(np.mean([getattr(r, k) for r in reports])) for k in keys})


def write_csv(path, rows: dict, summary: bool = True) -> None:
    """One row per ``{id: EvalReport}`` entry, optional trailing ``mean`` row."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for ident, rep in rows.items():
            w.writerow(_fmt(rep.csv_row(ident)))
        if summary and rows:
            w.writerow(_fmt(mean_report(rows.values()).csv_row("mean")))


def _fmt(row):
    return [row[0]] + [repr(float(v)) for v in row[1:]]
