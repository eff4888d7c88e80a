"""Segmentation, partition and classification scores, plus the metrics.csv writer."""
import csv
from dataclasses import dataclass

import numpy as np
from sklearn.metrics import f1_score
from sklearn.metrics.cluster import contingency_matrix, rand_score


@dataclass
class SegMetrics:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @property
    def iou(self):
        denom = self.tp + self.fp + self.fn
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, self.tp / np.maximum(denom, 1), np.nan)

    @property
    def miou(self):
        iou = self.iou
        defined = ~np.isnan(iou)
        return float(iou[defined].mean()) if defined.any() else float("nan")

    def __add__(self, other):
        return SegMetrics(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def confusion_counts(predictions, targets, C):
    """Integer TP/FP/FN per class over every pixel given."""
    p = np.asarray(predictions).ravel().astype(np.int64)
    t = np.asarray(targets).ravel().astype(np.int64)
    if p.shape != t.shape:
        raise ValueError("predictions and targets differ in size")
    cm = np.bincount(t * C + p, minlength=C * C).reshape(C, C)
    tp = np.diag(cm).copy()
    return SegMetrics(tp, cm.sum(axis=0) - tp, cm.sum(axis=1) - tp)


def miou(predictions, targets, C):
    """Dataset-level IoU: counts accumulate over all pixels before dividing.

    Classes that never occur in either predictions or targets are left out
    of the mean.
    """
    return confusion_counts(predictions, targets, C)


@dataclass
class PartitionScore:
    rand_index: float
    contingency: np.ndarray


def rand_index(labels_a, labels_b):
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.size < 2:
        raise ValueError("need two labelings of equal length >= 2")
    return float(rand_score(a, b))


def partition_score(labels_a, labels_b):
    return PartitionScore(rand_index(labels_a, labels_b), contingency_matrix(labels_a, labels_b))


def macro_f1(pred, true, M=None):
    """Unweighted F1 mean over classes that are predicted or present."""
    pred = np.asarray(pred)
    true = np.asarray(true)
    if M is not None and pred.size and max(pred.max(), true.max()) >= M:
        raise ValueError(f"labels must be < {M}")
    return float(f1_score(true, pred, average="macro", zero_division=0))


METRICS_COLUMNS = ("run_id", "method", "split_scheme", "phase", "cluster_id", "class_id",
                   "value_name", "value")


class MetricsTable:
    """Accumulates rows for ``metrics.csv`` in insertion order."""

    def __init__(self, run_id, method, split_scheme):
        self.run_id = run_id
        self.method = method
        self.split_scheme = split_scheme
        self.rows = []

    def add(self, phase, value_name, value, cluster_id="-", class_id="mean"):
        self.rows.append((self.run_id, self.method, self.split_scheme, phase, str(cluster_id),
                          str(class_id), value_name, _fmt(value)))

    def add_seg(self, phase, seg, cluster_id="-"):
        for c, v in enumerate(seg.iou):
            if not np.isnan(v):
                self.add(phase, "iou", v, cluster_id, c)
        self.add(phase, "miou", seg.miou, cluster_id, "mean")

    def get(self, phase, value_name, cluster_id="-", class_id="mean"):
        for row in self.rows:
            if row[3:7] == (phase, str(cluster_id), str(class_id), value_name):
                return float(row[7])
        raise KeyError((phase, value_name, cluster_id, class_id))

    def write(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRICS_COLUMNS)
            w.writerows(self.rows)


def _fmt(value):
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, str):
        return value
    return repr(float(value))
