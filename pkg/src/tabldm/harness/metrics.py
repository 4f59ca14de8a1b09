"""Evaluation metrics: pairwise one-vs-one classification scores, normalized
regression errors, and rank aggregation across methods."""
from __future__ import annotations

from itertools import combinations

import numpy as np
from scipy.stats import rankdata

__all__ = ["binary_auc", "metrics_cls", "metrics_reg", "rank_aggregate",
           "RankSummary"]


def binary_auc(positive: np.ndarray, scores: np.ndarray) -> float:
    """Probability a random positive outscores a random negative, ties at
    half weight (the Mann-Whitney rank statistic)."""
    positive = np.asarray(positive, dtype=bool)
    scores = np.asarray(scores, dtype=float)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(scores)          # average ranks on ties
    r_pos = ranks[positive].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _pair_f1(y: np.ndarray, pred: np.ndarray, positive_class: int) -> float:
    tp = int(((pred == positive_class) & (y == positive_class)).sum())
    fp = int(((pred == positive_class) & (y != positive_class)).sum())
    fn = int(((pred != positive_class) & (y == positive_class)).sum())
    return 2.0 * tp / (2.0 * tp + fp + fn)


def metrics_cls(y_true: np.ndarray, probs: np.ndarray) -> tuple[float, float, float]:
    """(auc, accuracy, f1) with AUC and F1 averaged over unordered class
    pairs: each pair restricts to its own samples, scores one class against
    the other in both directions, and contributes the mean of the two."""
    y = np.asarray(y_true, dtype=int)
    probs = np.asarray(probs, dtype=float)
    if y.ndim != 1 or probs.ndim != 2 or probs.shape[0] != y.size:
        raise ValueError("y_true is (n,), probs is (n, n_classes)")
    present = np.unique(y)
    if present.size < 2:
        raise ValueError("AUC is undefined with a single observed class")
    acc = float((probs.argmax(axis=1) == y).mean())
    aucs, f1s = [], []
    for a, b in combinations(present.tolist(), 2):
        sel = (y == a) | (y == b)
        ys, ps = y[sel], probs[sel]
        auc_a = binary_auc(ys == a, ps[:, a])
        auc_b = binary_auc(ys == b, ps[:, b])
        aucs.append((auc_a + auc_b) / 2.0)
        pred = np.where(ps[:, a] >= ps[:, b], a, b)
        f1s.append((_pair_f1(ys, pred, a) + _pair_f1(ys, pred, b)) / 2.0)
    return float(np.mean(aucs)), acc, float(np.mean(f1s))


def metrics_reg(y_true: np.ndarray, y_pred: np.ndarray) -> tuple[float, float]:
    """(normalized RMSE, R^2): RMSE over the target's standard deviation, and
    one minus the explained-error ratio."""
    y = np.asarray(y_true, dtype=float)
    p = np.asarray(y_pred, dtype=float)
    if y.size < 2:
        raise ValueError("regression metrics need at least two points")
    sst = float(((y - y.mean()) ** 2).sum())
    if sst == 0.0:
        raise ValueError("target variance is zero")
    sse = float(((y - p) ** 2).sum())
    nrmse = np.sqrt(sse / y.size) / y.std()
    return float(nrmse), float(1.0 - sse / sst)


class RankSummary:
    """Per-method mean rank and mean reciprocal rank over datasets."""

    def __init__(self, mean_rank: np.ndarray, mrr: np.ndarray,
                 ranks: np.ndarray):
        self.mean_rank = mean_rank
        self.mrr = mrr
        self.ranks = ranks            # (n_datasets, n_methods)


def rank_aggregate(scores: np.ndarray, higher_better: bool = True) -> RankSummary:
    """Rank methods within each dataset (1 = best, ties share the average
    rank), then average ranks and reciprocal ranks over datasets."""
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 2:
        raise ValueError("scores is (n_datasets, n_methods)")
    if np.isnan(scores).any():
        raise ValueError("scores matrix has missing entries")
    signed = -scores if higher_better else scores
    ranks = np.vstack([rankdata(row) for row in signed])
    return RankSummary(mean_rank=ranks.mean(axis=0),
                       mrr=(1.0 / ranks).mean(axis=0), ranks=ranks)
