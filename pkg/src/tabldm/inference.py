"""Conditional inference on tables with a trained cell transformer.

Every entry point phrases its question as an episode: the rows whose cells
are known become context, the rows with hidden cells become queries, and the
per-cell heads read out a distribution for each hidden cell.  On top of that
single mechanism sit prediction, attention-guided retrieval, a two-pass
retrieval predictor, an averaging ensemble over reversible table transforms,
imputation, column-by-column synthesis, and row embeddings.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .episodes import Episode
from .model import (Model, bin_centers, bin_edges, categorical_cell_logprobs,
                    forward, numeric_cell_logprobs, prepare_episode,
                    _cell_flat_index)
from .tabular import CATEGORICAL, NUMERIC, Column, Table, column_stats

__all__ = [
    "PredictResult", "AttentionScores", "ImputeResult", "align_to_context",
    "predict", "attention_scores", "default_topk", "retrieve_topk",
    "predict_retrieval", "ensemble_predict", "impute", "generate",
    "embed_dataset",
]


@dataclass
class AttentionScores:
    """Relevance read off the final block's attention maps, one query at a
    time: over the query row's tokens, over the context rows per token, and
    the product combining both."""

    per_feature: np.ndarray      # (m_te, d+1)   token relevance, stats dropped
    per_context: np.ndarray      # (m_te, m_ct, d+1)  context-row weight per token
    combined: np.ndarray         # (m_te, m_ct)  row relevance for retrieval


@dataclass
class PredictResult:
    kind: str                            # "cls" or "reg"
    point: np.ndarray                    # (m_te,) value or class code
    probs: np.ndarray | None = None      # (m_te, n_classes)
    bin_probs: np.ndarray | None = None  # (m_te, value_bins)
    bin_values: np.ndarray | None = None  # (value_bins,) centers in data units
    labels: tuple[str, ...] | None = None
    notes: list[str] = field(default_factory=list)
    attention: AttentionScores | None = None
    embeddings: np.ndarray | None = None


@dataclass
class ImputeResult:
    table: Table
    filled: np.ndarray           # boolean (m, d), cells that were predicted
    fallback_rows: list[int]     # rows filled from column marginals
    notes: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# schema alignment


def align_to_context(context: Table, test: Table) -> tuple[Table, list[str]]:
    """Recode a test table onto the context's schema.

    Columns are matched by name and order; a missing target column is added
    as all-unknown.  Categorical codes are remapped onto the context
    vocabulary; labels the context never saw become missing cells.
    """
    notes: list[str] = []
    if context.target is None:
        raise ValueError("context table needs a designated target column")
    ctx_names = [c.name for c in context.columns]
    test_names = [c.name for c in test.columns]
    tgt_name = context.columns[context.target].name
    if tgt_name not in test_names:
        vals = np.full((test.m, 1), np.nan)
        test = Table(list(test.columns) + [context.columns[context.target]],
                     np.hstack([test.values, vals]), target=test.d)
        test_names = test_names + [tgt_name]
    if test_names != ctx_names:
        if sorted(test_names) != sorted(ctx_names):
            raise ValueError(f"test columns {test_names} do not match "
                             f"context columns {ctx_names}")
        order = [test_names.index(n) for n in ctx_names]
        test = test.take_columns(order, target=ctx_names.index(tgt_name))
    values = test.values.copy()
    for j, (cc, tc) in enumerate(zip(context.columns, test.columns)):
        if cc.kind == NUMERIC and tc.kind == CATEGORICAL:
            # short files make every column look categorical to the loader;
            # recover numbers when all the labels parse as such
            try:
                as_num = [float(lab) for lab in tc.vocab]
            except ValueError:
                as_num = None
            if as_num is not None and np.isfinite(as_num).all():
                obs = ~test.missing[:, j]
                codes = values[obs, j].astype(int)
                values[obs, j] = np.asarray(as_num)[codes]
                continue
        if cc.kind != tc.kind:
            raise ValueError(f"column {cc.name!r} is {cc.kind} in context "
                             f"but {tc.kind} in the test table")
        if cc.kind != CATEGORICAL or cc.vocab == tc.vocab:
            continue
        code_of = {lab: i for i, lab in enumerate(cc.vocab)}
        unseen = 0
        for r in range(test.m):
            if test.missing[r, j]:
                continue
            lab = tc.vocab[int(values[r, j])]
            if lab in code_of:
                values[r, j] = code_of[lab]
            else:
                values[r, j] = np.nan
                unseen += 1
        if unseen:
            notes.append(f"column {cc.name!r}: {unseen} cells carry labels "
                         "the context never saw; treated as missing")
    cols = tuple(Column(c.name, c.kind, c.vocab) for c in context.columns)
    return Table(cols, values, target=context.target), notes


# ---------------------------------------------------------------------------
# the shared episode-forward-readout path


@dataclass
class _CellOut:
    kind: str
    probs: np.ndarray            # bin probs (numeric) or class probs
    point: float


def _cell_predictions(model: Model, episode: Episode,
                      cells: list[tuple[int, int]],
                      capture_attention: bool = False):
    """One forward pass; distributions for the given (query_row, table_col)
    cells, which must all be hidden in the episode."""
    cfg = model.cfg
    prep = prepare_episode(episode, cfg)
    fwd = forward(model.params, cfg, prep, capture_attention=capture_attention)
    pos_of = {tc: p for p, tc in enumerate(prep.col_perm)}
    rows = np.array([r for r, _ in cells], dtype=np.int64)
    cols = np.array([pos_of[c] for _, c in cells], dtype=np.int64)
    centers = bin_centers(cfg)
    out: dict[tuple[int, int], _CellOut] = {}
    kinds = np.array(prep.kinds)
    num_sel = kinds[cols] == NUMERIC
    if num_sel.any():
        r, c = rows[num_sel], cols[num_sel]
        lp = numeric_cell_logprobs(model.params, cfg, fwd,
                                   _cell_flat_index(prep, r, c)).data
        probs = np.exp(lp)
        pts = probs @ centers * prep.col_std[c] + prep.col_mean[c]
        for (rr, cc, p, pt) in zip(r, c, probs, pts):
            out[(int(rr), prep.col_perm[cc])] = _CellOut(NUMERIC, p, float(pt))
    cat_sel = ~num_sel
    if cat_sel.any():
        r, c = rows[cat_sel], cols[cat_sel]
        vs = np.asarray(prep.vocab_sizes)[c]
        for v in np.unique(vs):
            g = vs == v
            lp = categorical_cell_logprobs(model.params, cfg, fwd,
                                           _cell_flat_index(prep, r[g], c[g]),
                                           int(v)).data
            probs = np.exp(lp)
            for (rr, cc, p) in zip(r[g], c[g], probs):
                out[(int(rr), prep.col_perm[cc])] = _CellOut(
                    CATEGORICAL, p, float(np.argmax(p)))
    return out, prep, fwd


def _attention_from(fwd, prep) -> AttentionScores:
    m_ct, m_te, d = prep.m_ct, prep.m_te, prep.d_feat
    t_y, t = prep.t_y, prep.n_tokens
    a_f = fwd.feat_attn[m_ct:, t_y, :t - 1]            # drop the stats token
    a_f = a_f / a_f.sum(axis=1, keepdims=True)
    per_ctx = np.empty((m_te, m_ct, d + 1))
    for i in range(m_te):
        block = fwd.samp_attn[:, m_ct + i, :m_ct].T     # (m_ct, d+1)
        sums = block.sum(axis=0, keepdims=True)
        sums[sums < 1e-300] = 1.0
        per_ctx[i] = block / sums
    combined = np.einsum("qct,qt->qc", per_ctx, a_f)
    return AttentionScores(per_feature=a_f, per_context=per_ctx,
                           combined=combined)


# ---------------------------------------------------------------------------
# prediction


def _target_mask(test: Table) -> np.ndarray:
    mask = np.zeros((test.m, test.d), dtype=bool)
    mask[:, test.target] = True
    return mask


def predict(model: Model, context: Table, test: Table, *,
            capture_attention: bool = False,
            with_embeddings: bool = False) -> PredictResult:
    """Distribution over the target column for every test row, conditioning
    on all context rows and the test row's own observed features."""
    if context.m < 1:
        raise ValueError("prediction needs at least one context row")
    test, notes = align_to_context(context, test)
    episode = Episode(context=context, query=test, mask=_target_mask(test))
    cells = [(i, test.target) for i in range(test.m)]
    out, prep, fwd = _cell_predictions(model, episode, cells,
                                       capture_attention=capture_attention)
    tgt = context.columns[context.target]
    point = np.array([out[c].point for c in cells])
    result = PredictResult(
        kind="cls" if tgt.kind == CATEGORICAL else "reg",
        point=point, notes=notes)
    if tgt.kind == CATEGORICAL:
        result.probs = np.stack([out[c].probs for c in cells])
        result.labels = tgt.vocab
    else:
        result.bin_probs = np.stack([out[c].probs for c in cells])
        result.bin_values = (bin_centers(model.cfg) * prep.col_std[prep.t_y]
                             + prep.col_mean[prep.t_y])
    if capture_attention:
        result.attention = _attention_from(fwd, prep)
    if with_embeddings:
        result.embeddings = fwd.state.data[prep.m_ct:, prep.t_y, :].copy()
    return result


def attention_scores(model: Model, context: Table, test: Table) -> AttentionScores:
    return predict(model, context, test, capture_attention=True).attention


def embed_dataset(model: Model, context: Table, rows: Table) -> np.ndarray:
    """Final-layer target-token state per row, before any head applies."""
    return predict(model, context, rows, with_embeddings=True).embeddings


# ---------------------------------------------------------------------------
# retrieval


def default_topk(m_ct: int) -> int:
    return min(m_ct, max(32, math.ceil(m_ct / 4)))


def retrieve_topk(model: Model, context: Table, test: Table,
                  k: int | None = None) -> np.ndarray:
    """Indices of the context rows most relevant to each test row, judged by
    combined attention mass; ties go to the lower index.  Shape (m_te, k),
    each row sorted ascending."""
    k = default_topk(context.m) if k is None else min(k, context.m)
    if k < 1:
        raise ValueError("k must be at least 1")
    scores = attention_scores(model, context, test).combined
    picks = np.empty((scores.shape[0], k), dtype=np.int64)
    for i, row in enumerate(scores):
        order = np.argsort(-row, kind="stable")[:k]
        picks[i] = np.sort(order)
    return picks


def predict_retrieval(model: Model, context: Table, test: Table,
                      k: int | None = None) -> tuple[PredictResult, np.ndarray]:
    """Two passes: score context rows by attention, then re-predict each test
    row against only its retrieved context.  Queries sharing a retrieved set
    share one forward pass."""
    test_aligned, notes = align_to_context(context, test)
    picks = retrieve_topk(model, context, test_aligned, k)
    groups: dict[tuple, list[int]] = {}
    for i, row in enumerate(picks):
        groups.setdefault(tuple(row), []).append(i)
    tgt = context.columns[context.target]
    m_te = test_aligned.m
    point = np.empty(m_te)
    probs = np.empty((m_te, len(tgt.vocab))) if tgt.kind == CATEGORICAL else None
    bprobs = np.empty((m_te, model.cfg.value_bins)) if tgt.kind == NUMERIC else None
    bvals = None
    for idx, members in groups.items():
        sub_ctx = context.take_rows(np.array(idx, dtype=np.int64))
        sub_test = test_aligned.take_rows(np.array(members, dtype=np.int64))
        res = predict(model, sub_ctx, sub_test)
        point[members] = res.point
        if probs is not None:
            probs[members] = res.probs
        if bprobs is not None:
            bprobs[members] = res.bin_probs
            bvals = res.bin_values
    result = PredictResult(kind="cls" if tgt.kind == CATEGORICAL else "reg",
                           point=point, probs=probs, bin_probs=bprobs,
                           bin_values=bvals,
                           labels=tgt.vocab if tgt.kind == CATEGORICAL else None,
                           notes=notes)
    return result, picks


# ---------------------------------------------------------------------------
# ensembling over reversible table transforms


def _quantile_transform(ctx_col: np.ndarray, cols: list[np.ndarray]) -> list[np.ndarray]:
    obs = ctx_col[~np.isnan(ctx_col)]
    if obs.size == 0:
        return cols
    ref = np.sort(obs)
    n = ref.size
    out = []
    for v in cols:
        r = np.full_like(v, np.nan)
        ok = ~np.isnan(v)
        lo = np.searchsorted(ref, v[ok], side="left")
        hi = np.searchsorted(ref, v[ok], side="right")
        u = ((lo + hi) / 2.0 + 0.5) / (n + 1.0)
        r[ok] = ndtri(np.clip(u, 1e-6, 1 - 1e-6))
        out.append(r)
    return out


def _apply_augment(ctx: Table, test: Table, which: set[str], cfg,
                   rng: np.random.Generator) -> tuple[Table, Table]:
    cvals, tvals = ctx.values.copy(), test.values.copy()
    feats = ctx.feature_indices()
    num_feats = [j for j in feats if ctx.columns[j].kind == NUMERIC]
    if "log" in which:
        for j in num_feats:
            for v in (cvals, tvals):
                v[:, j] = np.sign(v[:, j]) * np.log1p(np.abs(v[:, j]))
    if "quantile" in which:
        for j in num_feats:
            cvals[:, j], tvals[:, j] = _quantile_transform(
                cvals[:, j], [cvals[:, j], tvals[:, j]])
    new_cols = list(ctx.columns)
    if "svd" in which and num_feats:
        q = min(math.ceil(len(feats) / 4), len(num_feats))
        if len(feats) + q <= cfg.max_columns:
            mean, std = column_stats(Table(ctx.columns, cvals, target=ctx.target))
            z = np.nan_to_num((cvals[:, num_feats] - mean[num_feats]) / std[num_feats])
            zt = np.nan_to_num((tvals[:, num_feats] - mean[num_feats]) / std[num_feats])
            _, _, vt = np.linalg.svd(z, full_matrices=False)
            proj, projt = z @ vt[:q].T, zt @ vt[:q].T
            for a in range(q):
                new_cols.append(Column(f"_mix{a}", NUMERIC))
            cvals = np.hstack([cvals, proj])
            tvals = np.hstack([tvals, projt])
    cols = tuple(new_cols)
    return (Table(cols, cvals, target=ctx.target),
            Table(cols, tvals, target=test.target))


def _pipeline_tables(ctx: Table, test: Table, cfg, rng: np.random.Generator,
                     identity: bool) -> tuple[Table, Table, np.ndarray | None]:
    """One ensemble member's view of the data: feature permutation, optional
    class-code reorder, optional augmentations.  Returns the transformed
    tables and the class-code permutation (None when codes are untouched)."""
    if identity:
        return ctx, test, None
    feats = ctx.feature_indices()
    perm = rng.permutation(len(feats))
    order = [feats[p] for p in perm] + [ctx.target]
    ctx2 = ctx.take_columns(order, target=len(feats))
    test2 = test.take_columns(order, target=len(feats))
    rho = None
    tgt = ctx2.columns[ctx2.target]
    if tgt.kind == CATEGORICAL and len(tgt.vocab) > 1:
        rho = rng.permutation(len(tgt.vocab))
        inv = np.argsort(rho)
        vocab = tuple(tgt.vocab[inv[k]] for k in range(len(tgt.vocab)))
        def remap(t: Table) -> Table:
            vals = t.values.copy()
            col = vals[:, t.target]
            ok = ~np.isnan(col)
            vals[ok, t.target] = rho[col[ok].astype(int)]
            cols = list(t.columns)
            cols[t.target] = Column(tgt.name, CATEGORICAL, vocab)
            return Table(tuple(cols), vals, target=t.target)
        ctx2, test2 = remap(ctx2), remap(test2)
    which = {name for name in ("quantile", "log", "svd") if rng.random() < 0.5}
    ctx2, test2 = _apply_augment(ctx2, test2, which, cfg, rng)
    return ctx2, test2, rho


def ensemble_predict(model: Model, context: Table, test: Table,
                     n_pipelines: int | None = None,
                     seed: int = 0) -> PredictResult:
    """Average the predictive distributions of several transformed views of
    the same episode.  The first member is the untransformed episode."""
    test, notes = align_to_context(context, test)
    tgt = context.columns[context.target]
    kind = "cls" if tgt.kind == CATEGORICAL else "reg"
    if n_pipelines is None:
        n_pipelines = 4 if kind == "cls" else 8
    acc_probs = None
    acc_bins = None
    bvals = None
    for i in range(n_pipelines):
        rng = np.random.default_rng([seed, i])
        ctx2, test2, rho = _pipeline_tables(context, test, model.cfg, rng,
                                            identity=(i == 0))
        res = predict(model, ctx2, test2)
        if kind == "cls":
            p = res.probs
            if rho is not None:
                p = p[:, rho]          # back onto the original class codes
            acc_probs = p if acc_probs is None else acc_probs + p
        else:
            acc_bins = res.bin_probs if acc_bins is None else acc_bins + res.bin_probs
            bvals = res.bin_values
    if kind == "cls":
        probs = acc_probs / n_pipelines
        return PredictResult(kind=kind, point=np.argmax(probs, axis=1).astype(float),
                             probs=probs, labels=tgt.vocab, notes=notes)
    bins = acc_bins / n_pipelines
    point = bins @ bvals
    return PredictResult(kind=kind, point=point, bin_probs=bins,
                         bin_values=bvals, notes=notes)


# ---------------------------------------------------------------------------
# imputation


def _marginal_fill(ctx: Table, j: int) -> float:
    obs = ctx.values[~ctx.missing[:, j], j]
    if obs.size == 0:
        return 0.0
    if ctx.columns[j].kind == CATEGORICAL:
        vals, counts = np.unique(obs.astype(int), return_counts=True)
        return float(vals[np.argmax(counts)])
    return float(obs.mean())


def impute(model: Model, table: Table, mask: np.ndarray | None = None) -> ImputeResult:
    """Fill hidden cells (naturally missing plus any extra mask) with model
    predictions.  Fully observed rows act as context; rows where everything
    is hidden fall back to column marginals and are reported."""
    if table.target is None:
        table = table.with_target(table.d - 1)
    mask = np.zeros((table.m, table.d), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != (table.m, table.d):
        raise ValueError("mask shape must match the table")
    hidden = mask | table.missing
    notes: list[str] = []
    q_rows = np.nonzero(hidden.any(axis=1))[0]
    c_rows = np.nonzero(~hidden.any(axis=1))[0]
    filled = np.zeros((table.m, table.d), dtype=bool)
    if q_rows.size == 0:
        return ImputeResult(table=table.copy(), filled=filled, fallback_rows=[],
                            notes=["nothing to fill"])
    if c_rows.size == 0:
        blanked = table.values.copy()
        blanked[hidden] = np.nan
        ctx = Table(table.columns, blanked, target=table.target)
        notes.append("no fully observed rows; context is the table with "
                     "hidden cells removed")
    else:
        ctx = table.take_rows(c_rows)
    qry = table.take_rows(q_rows)
    qmask = mask[q_rows]
    qhidden = hidden[q_rows]
    full_rows = np.nonzero(qhidden.all(axis=1))[0]
    part_rows = np.nonzero(~qhidden.all(axis=1))[0]
    out_values = table.values.copy()
    fallback: list[int] = []
    for r in full_rows:
        for j in range(table.d):
            out_values[q_rows[r], j] = _marginal_fill(ctx, j)
            filled[q_rows[r], j] = True
        fallback.append(int(q_rows[r]))
    if fallback:
        notes.append(f"{len(fallback)} rows had every cell hidden; filled "
                     "from column marginals")
    if part_rows.size:
        sub = qry.take_rows(part_rows)
        episode = Episode(context=ctx, query=sub, mask=qmask[part_rows])
        cells = [(int(i), int(j)) for i, j in zip(*np.nonzero(qhidden[part_rows]))]
        out, _, _ = _cell_predictions(model, episode, cells)
        for (i, j), cell in out.items():
            out_values[q_rows[part_rows[i]], j] = cell.point
            filled[q_rows[part_rows[i]], j] = True
    result = Table(table.columns, out_values, target=table.target)
    return ImputeResult(table=result, filled=filled, fallback_rows=fallback,
                        notes=notes)


# ---------------------------------------------------------------------------
# synthesis


def _sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(probs.shape[0])
    cum = np.cumsum(probs, axis=1)
    cum /= cum[:, -1:]
    return np.minimum((cum < u[:, None]).sum(axis=1), probs.shape[1] - 1)


def generate(model: Model, table: Table, n_rows: int,
             rng: np.random.Generator | None = None,
             refine_rounds: int = 3, refine_fraction: float = 0.2,
             noise_scale: float = 0.05) -> Table:
    """Synthesize rows that follow the table's joint column structure.

    The first column is an empirical resample (numeric values get a little
    Gaussian noise); later columns are sampled from the model conditioned on
    the columns already drawn, with the real rows as context restricted to
    the columns synthesized so far.  A few refinement rounds re-hide random
    cells and replace them with point predictions against the full table.
    """
    if table.target is None:
        table = table.with_target(table.d - 1)
    rng = rng or np.random.default_rng(0)
    d = table.d
    synth = np.full((n_rows, d), np.nan)
    obs0 = table.values[~table.missing[:, 0], 0]
    if obs0.size == 0:
        raise ValueError("first column has no observed values to resample")
    draw = rng.choice(obs0, size=n_rows, replace=True)
    if table.columns[0].kind == NUMERIC:
        spread = obs0.std()
        draw = draw + rng.normal(0.0, noise_scale * (spread if spread > 0 else 1.0),
                                 size=n_rows)
    synth[:, 0] = draw
    edges = bin_edges(model.cfg)
    for j in range(1, d):
        ctx_vals = table.values.copy()
        ctx_vals[:, j + 1:] = np.nan
        ctx = Table(table.columns, ctx_vals, target=table.target)
        qry = Table(table.columns, synth.copy(), target=table.target)
        mask = np.zeros((n_rows, d), dtype=bool)
        mask[:, j] = True
        cells = [(i, j) for i in range(n_rows)]
        out, prep, _ = _cell_predictions(model, Episode(context=ctx, query=qry,
                                                        mask=mask), cells)
        probs = np.stack([out[c].probs for c in cells])
        picks = _sample_rows(probs, rng)
        if table.columns[j].kind == CATEGORICAL:
            synth[:, j] = picks.astype(float)
        else:
            pos = prep.col_perm.index(j)
            z = edges[picks] + rng.random(n_rows) * (edges[picks + 1] - edges[picks])
            synth[:, j] = z * prep.col_std[pos] + prep.col_mean[pos]
    for _ in range(refine_rounds):
        re_mask = rng.random((n_rows, d)) < refine_fraction
        if not re_mask.any():
            continue
        qvals = synth.copy()
        qry = Table(table.columns, qvals, target=table.target)
        cells = [(int(i), int(j)) for i, j in zip(*np.nonzero(re_mask))]
        out, _, _ = _cell_predictions(
            model, Episode(context=table, query=qry, mask=re_mask), cells)
        for (i, j), cell in out.items():
            synth[i, j] = cell.point
    return Table(table.columns, synth, target=table.target)
