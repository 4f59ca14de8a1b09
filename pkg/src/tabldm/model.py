"""The cell transformer: per-cell embeddings, axial attention, bin heads.

Layout per episode: every row becomes ``d`` feature tokens, one target token,
and one dataset-statistics token (an MLP of the mask density).  Blocks run
two attention passes along the token axis and one along the row axis; the
row-axis pass lets context rows see each other while query rows see context
plus themselves, so queries can never leak into one another.  Hidden cells
(sampled mask or naturally missing) enter as a learned mask embedding plus
their column code; the raw value is replaced before embedding, so it cannot
influence anything.

Numeric predictions are distributions over fixed bins of the z-scored value
range; categorical predictions share one projection head sliced to each
column's vocabulary.  The training loss is the mean negative log-likelihood
over masked-and-observed query cells.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernel as nk
from .episodes import Episode, MaskView
from .tabular import CATEGORICAL, NUMERIC, Table, column_stats

__all__ = [
    "ModelConfig", "TrainConfig", "Model", "Prepared", "Forward",
    "init_params", "init_column_codes", "prepare_episode", "forward",
    "episode_loss", "pretrain", "bin_edges", "bin_centers",
]


@dataclass(frozen=True)
class ModelConfig:
    width: int = 64                 # embedding size p
    blocks: int = 3
    heads: int = 4
    feature_passes: int = 2
    sample_passes: int = 1
    max_columns: int = 32           # column-code table size
    code_dim: int | None = None     # defaults to width // 4
    value_bins: int = 32            # numeric head resolution over [-4, 4]
    z_range: float = 4.0
    z_clip: float = 8.0             # input z-scores are softly bounded
    max_classes: int = 10           # categorical head capacity
    precision: int = 32
    seed: int = 0

    @property
    def s(self) -> int:
        return self.code_dim if self.code_dim is not None else self.width // 4

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    def validate(self) -> "ModelConfig":
        if self.width % self.heads:
            raise ValueError("width must divide evenly into heads")
        if self.s < 1 or self.s > self.width:
            raise ValueError("code dimension must lie in [1, width]")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        if self.sample_passes != 1 or self.feature_passes < 1:
            raise ValueError("blocks run n>=1 feature passes and exactly 1 sample pass")
        return self

    def dtype(self):
        return nk.dtype_for(self.precision)


# ---------------------------------------------------------------------------
# parameters


def _coherence_reduce(u: np.ndarray, target: float = 0.4, iters: int = 60) -> np.ndarray:
    """Push unit rows toward low mutual coherence by alternating projection:
    clip the off-diagonal Gram entries, refactor at the code rank, renormalize."""
    d, s = u.shape
    for _ in range(iters):
        g = u @ u.T
        off = g - np.diag(np.diag(g))
        g2 = np.clip(off, -target, target) + np.eye(d)
        w, v = np.linalg.eigh(g2)
        w = np.clip(w[-s:], 0.0, None)
        u = v[:, -s:] * np.sqrt(w)
        norms = np.linalg.norm(u, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        u = u / norms
    return u


def init_column_codes(max_columns: int, s: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-norm column identifier rows: exactly orthonormal when they fit in
    the code dimension, otherwise random rows flattened to low coherence."""
    raw = rng.normal(size=(max(max_columns, s), s))
    if max_columns <= s:
        q, _ = np.linalg.qr(raw[:s].T)   # (s, s) with orthonormal columns
        u = q.T[:max_columns]
    else:
        u = raw[:max_columns]
        u = u / np.linalg.norm(u, axis=1, keepdims=True)
        u = _coherence_reduce(u)
    return u


_PASS_KINDS = ("feat", "samp")


def _pass_names(cfg: ModelConfig) -> list[str]:
    names = [f"f{i}" for i in range(cfg.feature_passes)]
    names.append("s0")
    return names


def init_params(cfg: ModelConfig, rng: np.random.Generator | None = None
                ) -> dict[str, nk.Tensor]:
    """Fresh parameters in a fixed, checkpoint-stable order."""
    cfg = cfg.validate()
    rng = rng or np.random.default_rng(cfg.seed)
    dt = cfg.dtype()
    p = cfg.width
    params: dict[str, nk.Tensor] = {}

    def gauss(name, *shape, scale=0.02):
        params[name] = nk.tensor(rng.normal(0.0, scale, size=shape), dtype=dt, name=name)

    def zeros(name, *shape):
        params[name] = nk.tensor(np.zeros(shape), dtype=dt, name=name)

    def ones(name, *shape):
        params[name] = nk.tensor(np.ones(shape), dtype=dt, name=name)

    for emb in ("x_embed", "y_embed"):
        gauss(f"{emb}.w1", 1, p)
        zeros(f"{emb}.b1", p)
        ones(f"{emb}.ln1g", p)
        zeros(f"{emb}.ln1b", p)
        gauss(f"{emb}.w2", p, p)
        zeros(f"{emb}.b2", p)
        ones(f"{emb}.ln2g", p)
        zeros(f"{emb}.ln2b", p)

    codes = init_column_codes(cfg.max_columns, cfg.s, rng)
    params["col_code.u"] = nk.tensor(codes, dtype=dt, name="col_code.u")
    gauss("col_code.lift", cfg.s, p, scale=1.0 / math.sqrt(cfg.s))
    gauss("mask_embed", p)
    gauss("density.w1", 1, p)
    zeros("density.b1", p)
    gauss("density.w2", p, p)
    zeros("density.b2", p)

    for b in range(cfg.blocks):
        for t in _pass_names(cfg):
            pre = f"blk{b}.{t}"
            ones(f"{pre}.ln_attn_g", p)
            zeros(f"{pre}.ln_attn_b", p)
            for w in ("wq", "wk", "wv", "wo"):
                gauss(f"{pre}.{w}", p, p)
            ones(f"{pre}.ln_ffn_g", p)
            zeros(f"{pre}.ln_ffn_b", p)
            gauss(f"{pre}.ffn_w1", p, 4 * p)
            zeros(f"{pre}.ffn_b1", 4 * p)
            gauss(f"{pre}.ffn_w2", 4 * p, p)
            zeros(f"{pre}.ffn_b2", p)

    gauss("head_num.w", p, cfg.value_bins)
    zeros("head_num.b", cfg.value_bins)
    gauss("head_cat.w", p, cfg.max_classes)
    zeros("head_cat.b", cfg.max_classes)
    return params


# ---------------------------------------------------------------------------
# episode preparation (pure numpy; everything the tape needs later)


def bin_edges(cfg: ModelConfig) -> np.ndarray:
    return np.linspace(-cfg.z_range, cfg.z_range, cfg.value_bins + 1)


def bin_centers(cfg: ModelConfig) -> np.ndarray:
    e = bin_edges(cfg)
    return (e[:-1] + e[1:]) / 2.0


@dataclass
class Prepared:
    """Episode tensorized into model order: features (table order minus the
    target), then the target column last."""

    cells_z: np.ndarray          # (m_all, d_feat + 1) z-scored values, 0 where hidden
    hidden: np.ndarray           # (m_all, d_feat + 1) shown as mask embedding
    loss_cells: np.ndarray       # (m_te, d_feat + 1) masked-and-observed query cells
    raw: np.ndarray              # (m_all, d_feat + 1) original values (nan where missing)
    kinds: list[str]             # per prepared column
    vocab_sizes: list[int]
    col_mean: np.ndarray
    col_std: np.ndarray
    density: float
    m_ct: int
    m_te: int
    d_feat: int
    col_perm: list[int]          # prepared position -> episode table column

    @property
    def t_y(self) -> int:
        return self.d_feat

    @property
    def n_tokens(self) -> int:
        return self.d_feat + 2

    @property
    def m_all(self) -> int:
        return self.m_ct + self.m_te


def prepare_episode(episode: Episode, cfg: ModelConfig,
                    view: MaskView | None = None) -> Prepared:
    ctx, qry = episode.context, episode.query
    if ctx.target is None:
        raise ValueError("episode tables need a designated target column")
    view = view or episode.view()
    col_perm = ctx.feature_indices() + [ctx.target]
    d_feat = len(col_perm) - 1
    if d_feat > cfg.max_columns:
        raise ValueError(f"{d_feat} feature columns exceed the code table "
                         f"({cfg.max_columns})")
    kinds = [ctx.columns[j].kind for j in col_perm]
    vocab_sizes = [len(ctx.columns[j].vocab) for j in col_perm]
    for j, v in zip(col_perm, vocab_sizes):
        if ctx.columns[j].kind == CATEGORICAL and v > cfg.max_classes:
            raise ValueError(
                f"column {ctx.columns[j].name!r} has {v} categories; head "
                f"capacity is {cfg.max_classes}")

    mean, std = column_stats(ctx)
    raw = np.vstack([ctx.values[:, col_perm], qry.values[:, col_perm]])
    hidden = np.vstack([view.hidden_context[:, col_perm],
                        view.hidden_query[:, col_perm]])
    z = (raw - mean[col_perm]) / std[col_perm]
    z = np.clip(z, -cfg.z_clip, cfg.z_clip)
    z[hidden] = 0.0  # hidden values must not exist as far as the model knows
    z = np.nan_to_num(z)
    return Prepared(
        cells_z=z,
        hidden=hidden,
        loss_cells=view.loss_cells[:, col_perm],
        raw=raw,
        kinds=kinds,
        vocab_sizes=vocab_sizes,
        col_mean=mean[col_perm],
        col_std=std[col_perm],
        density=view.density,
        m_ct=ctx.m,
        m_te=qry.m,
        d_feat=d_feat,
        col_perm=list(col_perm),
    )


# ---------------------------------------------------------------------------
# forward


def _take_rows(x: nk.Tensor, rows: np.ndarray) -> nk.Tensor:
    idx = np.broadcast_to(np.asarray(rows, dtype=np.int64)[:, None],
                          (len(rows), x.shape[1]))
    return nk.gather(x, idx, axis=0)


def _log_softmax(x: nk.Tensor, axis: int = -1) -> nk.Tensor:
    # subtracting the detached rowwise max changes nothing analytically and
    # keeps exp() in range
    if axis not in (-1, x.ndim - 1):
        raise ValueError("log-softmax runs over the last axis")
    n = x.shape[-1]
    cap = np.broadcast_to(x.data.max(axis=-1, keepdims=True), x.shape)
    z = nk.sub(x, nk.tensor(cap.copy()))
    lse = nk.log(nk.tsum(nk.exp(z), axis=-1, keepdims=True))      # (..., 1)
    ones = nk.tensor(np.ones((1, n), dtype=x.dtype))
    return nk.sub(z, nk.matmul(lse, ones))


def _value_embed(params, prefix: str, v: nk.Tensor) -> nk.Tensor:
    """Two rounds of linear -> layernorm -> gelu on a trailing scalar axis."""
    h = nk.add(nk.matmul(v, params[f"{prefix}.w1"]), params[f"{prefix}.b1"])
    h = nk.gelu(nk.layernorm(h, params[f"{prefix}.ln1g"], params[f"{prefix}.ln1b"]))
    h = nk.add(nk.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])
    return nk.gelu(nk.layernorm(h, params[f"{prefix}.ln2g"], params[f"{prefix}.ln2b"]))


def _attention(params, prefix: str, x: nk.Tensor, cfg: ModelConfig,
               bias: np.ndarray | None = None,
               capture: bool = False) -> tuple[nk.Tensor, np.ndarray | None]:
    """Pre-norm multi-head attention over the middle axis of (B, N, p)."""
    bsz, n, p = x.shape
    h, hd = cfg.heads, cfg.head_dim
    ln = nk.layernorm(x, params[f"{prefix}.ln_attn_g"], params[f"{prefix}.ln_attn_b"])

    def split(t):
        return nk.transpose(nk.reshape(t, (bsz, n, h, hd)), (0, 2, 1, 3))

    q = split(nk.matmul(ln, params[f"{prefix}.wq"]))
    k = split(nk.matmul(ln, params[f"{prefix}.wk"]))
    v = split(nk.matmul(ln, params[f"{prefix}.wv"]))
    scores = nk.mul(nk.matmul(q, nk.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    if bias is not None:
        scores = nk.add(scores, nk.tensor(bias, dtype=scores.dtype))
    probs = nk.softmax(scores, axis=-1)
    mixed = nk.reshape(nk.transpose(nk.matmul(probs, v), (0, 2, 1, 3)), (bsz, n, p))
    out = nk.add(x, nk.matmul(mixed, params[f"{prefix}.wo"]))
    captured = probs.data.mean(axis=1) if capture else None  # head-averaged
    return out, captured


def _ffn(params, prefix: str, x: nk.Tensor) -> nk.Tensor:
    ln = nk.layernorm(x, params[f"{prefix}.ln_ffn_g"], params[f"{prefix}.ln_ffn_b"])
    h = nk.gelu(nk.add(nk.matmul(ln, params[f"{prefix}.ffn_w1"]),
                       params[f"{prefix}.ffn_b1"]))
    return nk.add(x, nk.add(nk.matmul(h, params[f"{prefix}.ffn_w2"]),
                            params[f"{prefix}.ffn_b2"]))


def _visibility_bias(m_ct: int, m_te: int, dtype) -> np.ndarray:
    """Row-axis attention rule: context rows see context rows; each query row
    sees context rows and itself."""
    m = m_ct + m_te
    bias = np.zeros((m, m), dtype=dtype)
    bias[:, m_ct:] = -np.inf
    for r in range(m_ct, m):
        bias[r, r] = 0.0
    return bias


@dataclass
class Forward:
    state: nk.Tensor                       # (m_all, T, p) after the last block
    prep: Prepared
    feat_attn: np.ndarray | None = None    # (m_all, T, T) head-averaged, last block
    samp_attn: np.ndarray | None = None    # (T-1, m_all, m_all) head-averaged


def forward(params: dict[str, nk.Tensor], cfg: ModelConfig, prep: Prepared,
            capture_attention: bool = False) -> Forward:
    dt = cfg.dtype()
    m_all, d, t_y = prep.m_all, prep.d_feat, prep.t_y

    vals = nk.tensor(prep.cells_z[..., None], dtype=dt)           # (m_all, d+1, 1)
    x_emb = _value_embed(params, "x_embed", nk.narrow(vals, 1, 0, d))
    y_emb = _value_embed(params, "y_embed", nk.narrow(vals, 1, d, 1))
    codes = nk.matmul(nk.narrow(params["col_code.u"], 0, 0, d), params["col_code.lift"])

    hid = prep.hidden[:, :, None]
    p = cfg.width
    x_tok = nk.where_mask(np.broadcast_to(hid[:, :d], (m_all, d, p)),
                          params["mask_embed"], x_emb)
    x_tok = nk.add(x_tok, codes)
    y_tok = nk.where_mask(np.broadcast_to(hid[:, d:], (m_all, 1, p)),
                          params["mask_embed"], y_emb)

    dens = nk.tensor(np.array([[prep.density]]), dtype=dt)
    dens = nk.gelu(nk.add(nk.matmul(dens, params["density.w1"]), params["density.b1"]))
    dens = nk.add(nk.matmul(dens, params["density.w2"]), params["density.b2"])
    zeros = nk.tensor(np.zeros((m_all, 1, p)), dtype=dt)
    stat_tok = nk.add(zeros, nk.reshape(dens, (1, p)))

    state = nk.concat([x_tok, y_tok, stat_tok], axis=1)           # (m_all, T, p)
    bias = _visibility_bias(prep.m_ct, prep.m_te, np.dtype(dt).type)

    feat_probs = samp_probs = None
    last = cfg.blocks - 1
    for b in range(cfg.blocks):
        for i in range(cfg.feature_passes):
            pre = f"blk{b}.f{i}"
            cap = capture_attention and b == last and i == cfg.feature_passes - 1
            state, probs = _attention(params, pre, state, cfg, capture=cap)
            state = _ffn(params, pre, state)
            if cap:
                feat_probs = probs
        pre = f"blk{b}.s0"
        tok_part = nk.narrow(state, 1, 0, d + 1)                  # stats token sits out
        stat_part = nk.narrow(state, 1, d + 1, 1)
        rows = nk.transpose(tok_part, (1, 0, 2))                  # (d+1, m_all, p)
        cap = capture_attention and b == last
        rows, probs = _attention(params, pre, rows, cfg, bias=bias, capture=cap)
        if cap:
            samp_probs = probs
        state = nk.concat([nk.transpose(rows, (1, 0, 2)), stat_part], axis=1)
        state = _ffn(params, pre, state)
    return Forward(state=state, prep=prep, feat_attn=feat_probs, samp_attn=samp_probs)


# ---------------------------------------------------------------------------
# heads and loss


def _flat_state(fwd: Forward) -> nk.Tensor:
    m_all, t, p = fwd.state.shape
    return nk.reshape(fwd.state, (m_all * t, p))


def _cell_flat_index(prep: Prepared, query_rows: np.ndarray,
                     col_pos: np.ndarray) -> np.ndarray:
    return (prep.m_ct + query_rows) * prep.n_tokens + col_pos


def numeric_cell_logprobs(params, cfg, fwd: Forward,
                          flat_idx: np.ndarray) -> nk.Tensor:
    sel = _take_rows(_flat_state(fwd), flat_idx)
    logits = nk.add(nk.matmul(sel, params["head_num.w"]), params["head_num.b"])
    return _log_softmax(logits, axis=1)


def categorical_cell_logprobs(params, cfg, fwd: Forward, flat_idx: np.ndarray,
                              vocab_size: int) -> nk.Tensor:
    sel = _take_rows(_flat_state(fwd), flat_idx)
    logits = nk.add(nk.matmul(sel, params["head_cat.w"]), params["head_cat.b"])
    return _log_softmax(nk.narrow(logits, 1, 0, vocab_size), axis=1)


def z_bin_index(cfg: ModelConfig, z: np.ndarray) -> np.ndarray:
    idx = np.digitize(z, bin_edges(cfg)) - 1
    return np.clip(idx, 0, cfg.value_bins - 1)


def episode_loss(params: dict[str, nk.Tensor], cfg: ModelConfig,
                 prep: Prepared, fwd: Forward | None = None
                 ) -> tuple[nk.Tensor | None, int]:
    """Mean NLL over masked-and-observed query cells; (None, 0) if there are
    no such cells."""
    fwd = fwd or forward(params, cfg, prep)
    pieces: list[nk.Tensor] = []
    n_cells = 0
    qrows, qcols = np.nonzero(prep.loss_cells)
    if qrows.size == 0:
        return None, 0
    kinds = np.asarray(prep.kinds)
    cell_kind = kinds[qcols]
    # numeric cells: one shared bin head
    num_sel = cell_kind == NUMERIC
    if num_sel.any():
        rows, cols = qrows[num_sel], qcols[num_sel]
        z = (prep.raw[prep.m_ct + rows, cols] - prep.col_mean[cols]) / prep.col_std[cols]
        bins = z_bin_index(cfg, z)
        lp = numeric_cell_logprobs(params, cfg, fwd,
                                   _cell_flat_index(prep, rows, cols))
        picked = nk.gather(lp, bins[:, None], axis=1)
        pieces.append(nk.reshape(picked, (-1,)))
        n_cells += rows.size
    # categorical cells: group by vocabulary size so the slice is shared
    cat_sel = cell_kind == CATEGORICAL
    if cat_sel.any():
        rows, cols = qrows[cat_sel], qcols[cat_sel]
        vs = np.asarray(prep.vocab_sizes)[cols]
        for v in np.unique(vs):
            gsel = vs == v
            grows, gcols = rows[gsel], cols[gsel]
            labels = prep.raw[prep.m_ct + grows, gcols].astype(np.int64)
            lp = categorical_cell_logprobs(params, cfg, fwd,
                                           _cell_flat_index(prep, grows, gcols),
                                           int(v))
            picked = nk.gather(lp, labels[:, None], axis=1)
            pieces.append(nk.reshape(picked, (-1,)))
            n_cells += grows.size
    total = pieces[0] if len(pieces) == 1 else nk.concat(pieces, axis=0)
    return nk.neg(nk.tmean(total)), n_cells


# ---------------------------------------------------------------------------
# bundle, checkpoints, pretraining


_CONFIG_FIELDS = ("width", "blocks", "heads", "feature_passes", "sample_passes",
                  "max_columns", "code_dim", "value_bins", "z_range", "z_clip",
                  "max_classes", "precision", "seed")


@dataclass
class Model:
    cfg: ModelConfig
    params: dict[str, nk.Tensor]

    @classmethod
    def fresh(cls, cfg: ModelConfig, rng: np.random.Generator | None = None) -> "Model":
        return cls(cfg.validate(), init_params(cfg, rng))

    def save(self, path) -> None:
        vec = [float(getattr(self.cfg, f) if f != "code_dim"
                     else (self.cfg.code_dim if self.cfg.code_dim is not None else -1))
               for f in _CONFIG_FIELDS]
        blob = {"__config__": nk.tensor(np.asarray(vec), dtype=np.float64)}
        blob.update(self.params)
        nk.save_checkpoint(path, blob)

    @classmethod
    def load(cls, path) -> "Model":
        blob = nk.load_checkpoint(path)
        if "__config__" not in blob:
            raise nk.CheckpointError(f"{path}: not a model checkpoint (no config)")
        vec = blob.pop("__config__").data
        if vec.size != len(_CONFIG_FIELDS):
            raise nk.CheckpointError(f"{path}: config vector has {vec.size} fields")
        kw = {}
        for name, val in zip(_CONFIG_FIELDS, vec):
            if name == "code_dim":
                kw[name] = None if val < 0 else int(val)
            elif name in ("z_range", "z_clip"):
                kw[name] = float(val)
            else:
                kw[name] = int(val)
        return cls(ModelConfig(**kw).validate(), blob)


@dataclass
class TrainConfig:
    steps: int = 500
    lr: float = 1e-3
    warmup: int = 100
    lr_decay: str = "none"         # "none" | "cosine" (over the post-warmup span)
    episodes_per_step: int = 1     # gradients averaged over this many episodes
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float | None = 1.0
    ctx_fraction_range: tuple[float, float] = (0.4, 0.8)
    seed: int = 0
    checkpoint_every: int = 0      # 0: only at the end
    checkpoint_path: str | None = None
    log_every: int = 50


def _clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale


def pretrain(model: Model, train_cfg: TrainConfig, table_stream,
             schedule=None) -> list[dict]:
    """Drive Adam over a stream of tables; returns the per-step history.

    ``table_stream`` yields :class:`tabular.Table` objects with a designated
    target.  Each step: split, mask, forward, masked-cell NLL, update.
    Episodes whose mask lands entirely on naturally missing cells are skipped
    (counted in the history).
    """
    from .episodes import MaskSchedule, build_episode

    if train_cfg.lr_decay not in ("none", "cosine"):
        raise ValueError("lr_decay must be 'none' or 'cosine'")
    schedule = schedule or MaskSchedule()
    rng = np.random.default_rng(train_cfg.seed)
    state = nk.AdamState()
    history: list[dict] = []
    step = 0
    per_step = max(1, train_cfg.episodes_per_step)
    while step < train_cfg.steps:
        grads: dict[str, np.ndarray] = {}
        losses: list[float] = []
        cells = 0
        attempts = 0
        while len(losses) < per_step and attempts < 8 * per_step:
            attempts += 1
            table = next(table_stream)
            frac = rng.uniform(*train_cfg.ctx_fraction_range)
            episode = build_episode(table, frac, schedule, rng)
            try:
                prep = prepare_episode(episode, model.cfg)
            except ValueError:
                continue  # e.g. a table wider than the code table; draw another
            with nk.Tape() as tape:
                loss, n_cells = episode_loss(model.params, model.cfg, prep)
            if loss is None:
                continue
            nk.backward(tape, loss)
            for k, t in model.params.items():
                if t.grad is not None:
                    grads[k] = grads.get(k, 0.0) + t.grad
                t.zero_grad()
            losses.append(float(loss.data))
            cells += n_cells
        if not losses:
            history.append({"step": step, "loss": math.nan, "cells": 0})
            step += 1
            continue
        for k in grads:
            grads[k] = grads[k] / len(losses)
        if train_cfg.max_grad_norm is not None:
            _clip_grads(grads, train_cfg.max_grad_norm)
        lr = train_cfg.lr
        if train_cfg.warmup and step < train_cfg.warmup:
            lr = train_cfg.lr * (step + 1) / train_cfg.warmup
        elif train_cfg.lr_decay == "cosine":
            span = max(1, train_cfg.steps - train_cfg.warmup)
            progress = (step - train_cfg.warmup) / span
            lr = train_cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))
        nk.adam_step(model.params, grads, state, lr=lr, beta1=train_cfg.beta1,
                     beta2=train_cfg.beta2, eps=train_cfg.eps)
        history.append({"step": step, "loss": float(np.mean(losses)),
                        "cells": cells})
        step += 1
        if (train_cfg.checkpoint_path and train_cfg.checkpoint_every
                and step % train_cfg.checkpoint_every == 0):
            model.save(train_cfg.checkpoint_path)
    if train_cfg.checkpoint_path:
        model.save(train_cfg.checkpoint_path)
    return history
