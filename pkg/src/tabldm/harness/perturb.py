"""Robustness perturbations: padding a table with shuffled copies of its own
columns, and multiplicative outliers on numeric cells."""
from __future__ import annotations

import math

import numpy as np

from ..tabular import NUMERIC, Column, Table

__all__ = ["perturb_uninformative", "perturb_outliers"]


def perturb_uninformative(table: Table, fraction: float,
                          rng: np.random.Generator) -> Table:
    """Append ceil(fraction * n_features) columns, each a row-shuffled copy
    of a randomly chosen feature column.  Original cells are untouched; the
    shuffle breaks any relation to the other columns."""
    if fraction < 0:
        raise ValueError("fraction must be non-negative")
    feats = table.feature_indices()
    k = math.ceil(fraction * len(feats))
    if k == 0:
        return table.copy()
    picks = rng.choice(feats, size=k, replace=k > len(feats))
    cols = list(table.columns)
    new_vals = [table.values]
    for i, j in enumerate(picks):
        perm = rng.permutation(table.m)
        src = table.columns[j]
        cols.append(Column(f"{src.name}_shuffled{i}", src.kind, src.vocab))
        new_vals.append(table.values[perm, j][:, None])
    return Table(tuple(cols), np.hstack(new_vals), target=table.target)


def perturb_outliers(table: Table, prob: float = 0.02, factor: float = 100.0,
                     rng: np.random.Generator | None = None) -> Table:
    """Multiply each observed numeric feature cell, independently with the
    given probability, by a coefficient drawn uniformly from [0, factor]."""
    if factor < 0:
        raise ValueError("factor must be non-negative")
    rng = rng or np.random.default_rng(0)
    values = table.values.copy()
    num_feats = [j for j in table.feature_indices()
                 if table.columns[j].kind == NUMERIC]
    for j in num_feats:
        observed = ~table.missing[:, j]
        hit = observed & (rng.random(table.m) < prob)
        if hit.any():
            values[hit, j] *= rng.uniform(0.0, factor, size=int(hit.sum()))
    return Table(table.columns, values, target=table.target)
