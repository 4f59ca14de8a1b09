"""Reference methods the model is compared against: column-statistic
imputation with its normalized error score, nearest-neighbor prediction, and
the trivial majority / mean predictors."""
from __future__ import annotations

import numpy as np

from ..tabular import CATEGORICAL, NUMERIC, Table, column_stats

__all__ = ["baseline_impute", "impute_score", "nn_predict", "nn_accuracy",
           "majority_class", "majority_accuracy", "mean_value"]


def baseline_impute(table: Table, mask: np.ndarray | None = None) -> Table:
    """Fill hidden cells with the column mean (numeric) or modal category,
    computed from the cells that stay visible."""
    mask = np.zeros((table.m, table.d), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    hidden = mask | table.missing
    values = table.values.copy()
    for j in range(table.d):
        col_hidden = hidden[:, j]
        if not col_hidden.any():
            continue
        obs = table.values[~col_hidden, j]
        if obs.size == 0:
            raise ValueError(f"column {table.columns[j].name!r} has no "
                             "visible cells to summarize")
        if table.columns[j].kind == CATEGORICAL:
            codes, counts = np.unique(obs.astype(int), return_counts=True)
            values[col_hidden, j] = float(codes[np.argmax(counts)])
        else:
            values[col_hidden, j] = obs.mean()
    return Table(table.columns, values, target=table.target)


def impute_score(truth: Table, filled: Table, cells: np.ndarray) -> float:
    """RMSE over the given cells with numeric columns min-max normalized on
    the true data; a categorical cell contributes 0 on a match, 1 otherwise."""
    cells = np.asarray(cells, dtype=bool)
    if not cells.any():
        raise ValueError("no cells to score")
    errs = []
    for j in range(truth.d):
        rows = cells[:, j]
        if not rows.any():
            continue
        t = truth.values[rows, j]
        f = filled.values[rows, j]
        if truth.columns[j].kind == CATEGORICAL:
            errs.append((t != f).astype(float))
        else:
            col = truth.values[~truth.missing[:, j], j]
            span = col.max() - col.min()
            span = span if span > 0 else 1.0
            errs.append((t - f) / span)
    errs = np.concatenate(errs)
    return float(np.sqrt(np.mean(errs ** 2)))


def _z_features(ctx: Table, rows: Table) -> tuple[np.ndarray, np.ndarray]:
    feats = ctx.feature_indices()
    mean, std = column_stats(ctx)
    zc = np.nan_to_num((ctx.values[:, feats] - mean[feats]) / std[feats])
    zr = np.nan_to_num((rows.values[:, feats] - mean[feats]) / std[feats])
    return zc, zr


def nn_predict(ctx: Table, test: Table) -> np.ndarray:
    """Each test row inherits the target of its nearest context row in
    z-scored feature space (ties to the lower row index)."""
    zc, zt = _z_features(ctx, test)
    d2 = ((zt[:, None, :] - zc[None, :, :]) ** 2).sum(axis=2)
    nearest = d2.argmin(axis=1)
    return ctx.values[nearest, ctx.target]


def nn_accuracy(ctx: Table, test: Table, y_true: np.ndarray) -> float:
    return float((nn_predict(ctx, test) == np.asarray(y_true)).mean())


def majority_class(ctx: Table) -> int:
    obs = ctx.values[~ctx.missing[:, ctx.target], ctx.target].astype(int)
    codes, counts = np.unique(obs, return_counts=True)
    return int(codes[np.argmax(counts)])


def majority_accuracy(ctx: Table, y_true: np.ndarray) -> float:
    return float((np.asarray(y_true) == majority_class(ctx)).mean())


def mean_value(ctx: Table) -> float:
    obs = ctx.values[~ctx.missing[:, ctx.target], ctx.target]
    return float(obs.mean())
