"""Context/query splits and structured cell masking.

An episode is a stratified row split of one table plus a boolean mask over
the query cells (all columns, target included).  Masks mix three patterns —
scattered cells, whole columns, and a contiguous column block crossed with a
row subset — under a total budget drawn from the configured ratio range.
Per-row retention keeps a floor of observed feature cells so no query row
goes fully dark, and columns that are nearly constant (dominant category) or
wildly spread (high coefficient of variation) get their cell-mask rate cut.

Naturally missing cells are never part of the sampled mask: they already
render as the mask embedding, and they never contribute to the loss.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .tabular import CATEGORICAL, NUMERIC, Table

__all__ = [
    "MaskSchedule", "Episode", "MaskView", "split_episode", "split_by_keys",
    "sample_mask", "column_rate_multipliers", "mask_density",
    "align_natural_missing", "build_episode",
]


@dataclass(frozen=True)
class MaskSchedule:
    ratio_range: tuple[float, float] = (0.1, 0.4)
    pattern_weights: tuple[float, float, float] = (0.6, 0.2, 0.2)  # cell, column, block
    retention_fraction: float = 0.2     # per-row floor of observed feature cells
    dominant_top_freq: float = 0.8
    high_cv: float = 2.0
    modifier: float = 0.5
    target_focus_prob: float = 0.0      # chance an episode spends its budget on
                                        # non-feature columns first


@dataclass
class MaskView:
    """How a sampled mask and the natural holes combine for the model."""

    hidden_query: np.ndarray    # query cells shown as the mask embedding
    hidden_context: np.ndarray  # context cells shown as the mask embedding
    loss_cells: np.ndarray      # masked-and-actually-observed query cells
    density: float


@dataclass
class Episode:
    context: Table
    query: Table
    mask: np.ndarray

    def view(self) -> MaskView:
        return align_natural_missing(self)


def split_by_keys(table: Table, keys: np.ndarray,
                  ctx_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic split core: rows ranked by their key within each class
    stratum; the smallest keys go to the context.  Permuting rows together
    with their keys therefore permutes nothing but row order.
    """
    m = table.m
    keys = np.asarray(keys, dtype=np.float64)
    if keys.shape != (m,):
        raise ValueError("one key per row required")
    if not 0.0 < ctx_fraction < 1.0:
        raise ValueError("context fraction must be strictly inside (0, 1)")

    def pick(idx: np.ndarray, frac: float) -> np.ndarray:
        n = idx.size
        n_ctx = int(round(frac * n))
        n_ctx = min(max(n_ctx, 1), n - 1)
        order = idx[np.argsort(keys[idx], kind="stable")]
        return order[:n_ctx]

    strata = None
    if table.target is not None and table.columns[table.target].kind == CATEGORICAL:
        y = table.values[:, table.target]
        obs = ~table.missing[:, table.target]
        labels = np.unique(y[obs])
        groups = [np.flatnonzero(obs & (y == lab)) for lab in labels]
        rest = np.flatnonzero(~obs)
        if all(g.size >= 2 for g in groups) and labels.size >= 1:
            strata = groups + ([rest] if rest.size else [])
        else:
            warnings.warn("a class has fewer than 2 rows; splitting unstratified",
                          stacklevel=3)
    if strata is None:
        ctx = pick(np.arange(m), ctx_fraction)
    else:
        ctx = np.concatenate([pick(g, ctx_fraction) for g in strata if g.size])
    ctx_mask = np.zeros(m, dtype=bool)
    ctx_mask[ctx] = True
    return np.flatnonzero(ctx_mask), np.flatnonzero(~ctx_mask)


def split_episode(table: Table, ctx_fraction: float,
                  rng: np.random.Generator) -> tuple[Table, Table]:
    """Split rows into (context, query), stratified by class when the target
    is categorical; degenerate strata fall back to unstratified with a warning."""
    if table.m < 2:
        raise ValueError("need at least two rows to split")
    keys = rng.random(table.m)
    ctx_idx, qry_idx = split_by_keys(table, keys, ctx_fraction)
    return table.take_rows(ctx_idx), table.take_rows(qry_idx)


def column_rate_multipliers(context: Table,
                            schedule: MaskSchedule = MaskSchedule()) -> np.ndarray:
    """Per-column cell-mask rate multipliers, judged on the context rows."""
    mult = np.ones(context.d)
    for j, col in enumerate(context.columns):
        vals = context.values[~context.missing[:, j], j]
        if vals.size == 0:
            continue
        if col.kind == CATEGORICAL:
            _, counts = np.unique(vals, return_counts=True)
            if counts.max() / vals.size > schedule.dominant_top_freq:
                mult[j] = schedule.modifier
        elif col.kind == NUMERIC:
            mu = abs(vals.mean())
            sd = vals.std()
            if sd / max(mu, 1e-12) > schedule.high_cv:
                mult[j] = schedule.modifier
    return mult


def sample_mask(shape: tuple[int, int], schedule: MaskSchedule,
                rng: np.random.Generator, *,
                feature_cols: list[int] | None = None,
                natural_missing: np.ndarray | None = None,
                rate_multipliers: np.ndarray | None = None) -> np.ndarray:
    """Draw a training mask over a query grid.

    The cell budget is the drawn ratio times the grid size (rounded, clamped
    into the ratio range, capped by what retention allows).  Whole-column and
    block patterns spend their configured share first; scattered cells fill
    the remainder exactly, so the effective ratio tracks the draw tightly.
    """
    m, c = shape
    if m < 1 or c < 1:
        raise ValueError("mask grid must be non-empty")
    feature_cols = list(range(c)) if feature_cols is None else list(feature_cols)
    nat = (np.zeros(shape, dtype=bool) if natural_missing is None
           else np.asarray(natural_missing, dtype=bool))
    if nat.shape != shape:
        raise ValueError("natural-missing grid shape mismatch")
    mult = np.ones(c) if rate_multipliers is None else np.asarray(rate_multipliers)

    lo, hi = schedule.ratio_range
    total = m * c
    ratio = rng.uniform(lo, hi)
    budget = int(round(ratio * total))
    budget = min(max(budget, math.ceil(lo * total)), math.floor(hi * total))

    d_feat = len(feature_cols)
    keep_floor = max(1, math.ceil(schedule.retention_fraction * d_feat))
    feat_set = set(feature_cols)
    obs_feat = np.array([sum(1 for j in feature_cols if not nat[i, j])
                         for i in range(m)])
    row_capacity = np.maximum(obs_feat - keep_floor, 0)
    non_feat = [j for j in range(c) if j not in feat_set]
    cap = int(row_capacity.sum() + sum((~nat[:, j]).sum() for j in non_feat))
    if budget > cap:
        warnings.warn(f"mask budget {budget} exceeds retention capacity {cap}; clipping",
                      stacklevel=2)
        budget = cap

    mask = np.zeros(shape, dtype=bool)
    w_cell, w_col, w_block = schedule.pattern_weights
    w_sum = w_cell + w_col + w_block

    # optionally spend the budget on the non-feature columns first, turning
    # the episode into a mostly label-prediction exercise
    if (schedule.target_focus_prob > 0 and non_feat
            and rng.random() < schedule.target_focus_prob):
        cells = [(i, j) for j in non_feat for i in range(m) if not nat[i, j]]
        take = min(budget, len(cells))
        if take > 0:
            picks = rng.choice(len(cells), size=take, replace=False)
            for k in picks:
                i, j = cells[k]
                mask[i, j] = True

    # whole columns
    remaining = budget - int(mask.sum())
    if w_col > 0 and remaining >= m:
        col_budget = min(w_col / w_sum * budget, remaining)
        n_cols = min(int(col_budget // m), c)
        if n_cols >= 1:
            cols = rng.choice(c, size=n_cols, replace=False)
            for j in cols:
                mask[:, j] |= ~nat[:, j]

    # one contiguous column block crossed with a row subset
    if w_block > 0 and d_feat >= 2 and budget > int(mask.sum()):
        block_budget = min(w_block / w_sum * budget, budget - int(mask.sum()))
        w_hi = min(d_feat, max(2, math.ceil(d_feat / 3)))
        width = int(rng.integers(2, w_hi + 1))
        start = int(rng.integers(0, d_feat - width + 1))
        block_cols = [feature_cols[k] for k in range(start, start + width)]
        n_rows = min(m, int(block_budget // width))
        if n_rows >= 1:
            rows = rng.choice(m, size=n_rows, replace=False)
            for i in rows:
                for j in block_cols:
                    if not nat[i, j]:
                        mask[i, j] = True

    # scattered cells fill the rest exactly, rate-weighted per column
    deficit = budget - int(mask.sum())
    if deficit > 0:
        avail = ~mask & ~nat
        flat = np.flatnonzero(avail)
        weights = np.repeat(mult[None, :], m, axis=0).reshape(-1)[flat]
        if weights.sum() <= 0:
            weights = np.ones_like(weights)
        take = min(deficit, flat.size)
        chosen = rng.choice(flat, size=take, replace=False, p=weights / weights.sum())
        mask.reshape(-1)[chosen] = True

    _repair_retention(mask, nat, feature_cols, keep_floor, rng)
    return mask


def _repair_retention(mask: np.ndarray, nat: np.ndarray, feature_cols: list[int],
                      keep_floor: int, rng: np.random.Generator) -> None:
    """Move masked feature cells out of rows that fell below the retention
    floor into rows with slack, preserving the total count."""
    m, _ = mask.shape
    fc = np.asarray(feature_cols, dtype=np.int64)
    freed = 0
    for i in range(m):
        observed = ~nat[i, fc]
        visible = observed & ~mask[i, fc]
        need = keep_floor - int(visible.sum())
        if need <= 0:
            continue
        masked_feats = fc[observed & mask[i, fc]]
        if masked_feats.size == 0:
            continue
        take = min(need, masked_feats.size)
        drop = rng.choice(masked_feats, size=take, replace=False)
        mask[i, drop] = False
        freed += take
    if freed == 0:
        return
    # re-spend the freed budget in rows with slack
    visible_feat = ((~nat[:, fc]) & (~mask[:, fc])).sum(axis=1)
    slack_rows = np.flatnonzero(visible_feat > keep_floor)
    candidates = []
    for i in slack_rows:
        free = fc[(~nat[i, fc]) & (~mask[i, fc])]
        room = int(visible_feat[i] - keep_floor)
        picks = rng.permutation(free)[:room]
        candidates.extend((i, j) for j in picks)
    rng.shuffle(candidates)
    for i, j in candidates[:freed]:
        mask[i, j] = True


def mask_density(mask: np.ndarray, natural_missing: np.ndarray | None = None) -> float:
    """Fraction of query cells rendered as the mask embedding: the sampled
    mask united with the naturally missing cells."""
    mask = np.asarray(mask, dtype=bool)
    if natural_missing is None:
        return float(mask.mean())
    return float((mask | np.asarray(natural_missing, dtype=bool)).mean())


def align_natural_missing(episode: Episode) -> MaskView:
    """Combine the sampled mask with the tables' own holes: context holes and
    all hidden query cells get the mask embedding; only masked cells that are
    actually observed carry loss."""
    qmiss = episode.query.missing
    if episode.mask.shape != qmiss.shape:
        raise ValueError("mask shape does not match the query table")
    hidden_q = episode.mask | qmiss
    loss = episode.mask & ~qmiss
    return MaskView(
        hidden_query=hidden_q,
        hidden_context=episode.context.missing.copy(),
        loss_cells=loss,
        density=mask_density(episode.mask, qmiss),
    )


def build_episode(table: Table, ctx_fraction: float, schedule: MaskSchedule,
                  rng: np.random.Generator) -> Episode:
    """Split, then mask the query grid (target column included)."""
    context, query = split_episode(table, ctx_fraction, rng)
    feature_cols = query.feature_indices() if query.target is not None else None
    mask = sample_mask(
        (query.m, query.d), schedule, rng,
        feature_cols=feature_cols,
        natural_missing=query.missing,
        rate_multipliers=column_rate_multipliers(context, schedule),
    )
    return Episode(context, query, mask)
