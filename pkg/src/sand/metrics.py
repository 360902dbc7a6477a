"""Evaluation metrics.

Conventions pinned here because the usual libraries disagree on them:

* AUROC: trapezoidal area under the ROC curve built from distinct score
  thresholds.  Tied scores move along a diagonal segment, which makes the
  area equal to (concordant + 0.5 * tied) / (P * N).
* AUPRC: step-wise area under the precision envelope.  Thresholds are the
  distinct scores, highest first; at each the recall increment is weighted by
  the best precision attained at that recall or beyond.  No linear
  interpolation between points.
* min(Se, P+): the largest value of min(recall, precision) over thresholds
  "predict positive iff score >= tau", tau over the distinct scores.
* weighted AUC (multilabel): per-label AUROC weighted by positive counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, UndefinedMetricError


def _prepare(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ShapeError(f"scores {s.shape} vs labels {y.shape}")
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("labels must be 0/1")
    return s, y.astype(np.int64)


def _threshold_counts(s: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative (TP, FP) when predicting positive for score >= each distinct
    score, scanned from the highest score down."""
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(1 - y)[last]
    return tp.astype(np.float64), fp.astype(np.float64)


def auroc(scores, labels) -> float:
    s, y = _prepare(scores, labels)
    P = int(y.sum())
    N = len(y) - P
    if P == 0 or N == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative labels")
    tp, fp = _threshold_counts(s, y)
    tpr = np.r_[0.0, tp / P]
    fpr = np.r_[0.0, fp / N]
    return float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))


def auprc(scores, labels) -> float:
    s, y = _prepare(scores, labels)
    P = int(y.sum())
    if P == 0:
        raise UndefinedMetricError("AUPRC needs at least one positive label")
    tp, fp = _threshold_counts(s, y)
    recall = tp / P
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.r_[0.0, recall])
    return float(np.sum(steps * envelope))


def min_se_pplus(scores, labels) -> float:
    s, y = _prepare(scores, labels)
    P = int(y.sum())
    if P == 0:
        raise UndefinedMetricError("min(Se, P+) needs at least one positive label")
    tp, fp = _threshold_counts(s, y)
    return float(np.max(np.minimum(tp / P, tp / (tp + fp))))


@dataclass
class MultilabelAUC:
    micro: float
    macro: float
    weighted: float
    skipped: int = 0  # label columns with a single class


def multilabel_auc(scores, labels) -> MultilabelAUC:
    S = np.asarray(scores, dtype=np.float64)
    Y = np.asarray(labels)
    if S.ndim == 1:
        S, Y = S[:, None], Y[:, None]
    if S.shape != Y.shape:
        raise ShapeError(f"scores {S.shape} vs labels {Y.shape}")
    per, weights = [], []
    for k in range(S.shape[1]):
        pos = int(Y[:, k].sum())
        if pos == 0 or pos == len(Y):
            continue
        per.append(auroc(S[:, k], Y[:, k]))
        weights.append(pos)
    if not per:
        raise UndefinedMetricError("every label column has a single class")
    per_arr, w = np.array(per), np.array(weights, dtype=np.float64)
    return MultilabelAUC(
        micro=auroc(S.reshape(-1), Y.reshape(-1)),
        macro=float(per_arr.mean()),
        weighted=float(np.sum(per_arr * w) / w.sum()),
        skipped=S.shape[1] - len(per),
    )


def confusion_matrix(true_bins, pred_bins, C: int) -> np.ndarray:
    t = np.asarray(true_bins, dtype=np.int64).reshape(-1)
    p = np.asarray(pred_bins, dtype=np.int64).reshape(-1)
    if t.shape != p.shape:
        raise ShapeError(f"true {t.shape} vs predicted {p.shape}")
    if t.size and (t.min() < 0 or p.min() < 0 or t.max() >= C or p.max() >= C):
        raise ValueError(f"bins must lie in [0, {C})")
    O = np.zeros((C, C))
    np.add.at(O, (t, p), 1.0)
    return O


def weighted_kappa(true_bins, pred_bins, C: int = 10) -> float:
    """Cohen's kappa with linear disagreement weights |i - j| / (C - 1)."""
    O = confusion_matrix(true_bins, pred_bins, C)
    n = O.sum()
    if n == 0:
        raise UndefinedMetricError("kappa of an empty sample")
    i, j = np.indices((C, C))
    w = np.abs(i - j) / (C - 1)
    E = np.outer(O.sum(axis=1), O.sum(axis=0)) / n
    observed = float(np.sum(w * O))
    expected = float(np.sum(w * E))
    if expected == 0.0:
        # both marginals sit in one shared bin, so agreement is perfect
        return 1.0
    return 1.0 - observed / expected


@dataclass
class RegressionErrors:
    mse: float
    mape: float
    excluded: int = 0  # zero-valued targets left out of MAPE


def mse_mape(true_values, pred_values) -> RegressionErrors:
    t = np.asarray(true_values, dtype=np.float64).reshape(-1)
    p = np.asarray(pred_values, dtype=np.float64).reshape(-1)
    if t.shape != p.shape:
        raise ShapeError(f"true {t.shape} vs predicted {p.shape}")
    if t.size == 0:
        raise UndefinedMetricError("MSE of an empty sample")
    mse = float(np.mean((t - p) ** 2))
    nz = t != 0
    if not nz.any():
        raise UndefinedMetricError("MAPE is undefined when every true value is zero")
    mape = float(100.0 * np.mean(np.abs(t[nz] - p[nz]) / np.abs(t[nz])))
    return RegressionErrors(mse, mape, int((~nz).sum()))


# -- report ----------------------------------------------------------------------

HEADLINE = {
    "binary": "auroc",
    "per-step-binary": "auroc",
    "multilabel": "macro_auc",
    "multiclass": "kappa",
    "per-step-regression": "mse",
}
LOWER_IS_BETTER = {"mse", "mape", "loss"}


@dataclass
class MetricsReport:
    task_kind: str
    values: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    def __getitem__(self, key: str) -> float:
        return self.values[key]

    def to_text(self) -> str:
        lines = [f"task_kind = {self.task_kind}"]
        lines += [f"{k} = {v!r}" for k, v in self.values.items()]
        lines += [f"count.{k} = {v}" for k, v in self.counts.items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        from .config import parse_kv_text

        kv = parse_kv_text(text)
        report = cls(kv.pop("task_kind"))
        for k, v in kv.items():
            if k.startswith("count."):
                report.counts[k[6:]] = int(v)
            else:
                report.values[k] = float(v)
        return report

    def csv_header(self) -> list[str]:
        return ["task_kind"] + list(self.values) + [f"count.{k}" for k in self.counts]

    def csv_row(self) -> list:
        return [self.task_kind] + [repr(v) for v in self.values.values()] + list(self.counts.values())


def headline_score(kind_name: str, report: MetricsReport, metric: str = "") -> float:
    """Higher-is-better scalar used for model selection."""
    name = metric or HEADLINE[kind_name]
    value = report.values[name]
    if math.isnan(value):
        return -math.inf
    return -value if name in LOWER_IS_BETTER else value
