"""Retrieval-guided fine-tuning: adapt a pretrained model to one dataset by
training on episodes whose context is each query's own retrieved rows."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import kernel as nk
from ..episodes import Episode, MaskSchedule, sample_mask
from ..inference import retrieve_topk, align_to_context
from ..model import Model, episode_loss, prepare_episode
from ..tabular import Table

__all__ = ["FinetuneConfig", "finetune"]


@dataclass
class FinetuneConfig:
    steps: int = 100
    k: int = 16                     # retrieved context rows per episode
    lr: float = 3e-4
    seed: int = 0
    pool_fraction: float = 0.8
    loss_scope: str = "target"      # "target": only the outcome cell;
                                    # "all": schedule-masked cells, as in pretraining
    max_grad_norm: float | None = 1.0


def finetune(model: Model, table: Table,
             cfg: FinetuneConfig) -> tuple[Model, list[dict]]:
    """Returns a tuned copy of the model plus the per-step history.

    The table's rows split into a retrieval pool and a query set.  Each query
    row gets a fixed context: its top-k pool rows by attention relevance,
    scored once with the incoming parameters.  Steps then cycle through the
    queries in a seeded order; with the default scope the loss reads only the
    query's target cell.
    """
    if cfg.loss_scope not in ("target", "all"):
        raise ValueError("loss_scope is 'target' or 'all'")
    if table.target is None:
        raise ValueError("fine-tuning needs a designated target column")
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(table.m)
    n_pool = int(np.clip(round(cfg.pool_fraction * table.m), 1, table.m - 1))
    pool = table.take_rows(np.sort(order[:n_pool]))
    queries = table.take_rows(np.sort(order[n_pool:]))
    if pool.m < cfg.k:
        raise ValueError(f"retrieval pool has {pool.m} rows; k={cfg.k} needs "
                         "at least that many")
    tuned = Model(model.cfg, {k: nk.tensor(t.data.copy(), name=k)
                              for k, t in model.params.items()})
    if cfg.steps == 0:
        return tuned, []
    picks = retrieve_topk(model, pool, queries, cfg.k)
    aligned, _ = align_to_context(pool, queries)
    schedule = MaskSchedule()
    state = nk.AdamState()
    history: list[dict] = []
    step = 0
    qi_order = rng.permutation(queries.m)
    cursor = 0
    while step < cfg.steps:
        if cursor == len(qi_order):
            qi_order = rng.permutation(queries.m)
            cursor = 0
        qi = int(qi_order[cursor])
        cursor += 1
        ctx = pool.take_rows(picks[qi])
        qrow = aligned.take_rows(np.array([qi]))
        if cfg.loss_scope == "target":
            mask = np.zeros((1, qrow.d), dtype=bool)
            mask[0, qrow.target] = True
        else:
            mask = sample_mask((1, qrow.d), schedule, rng,
                               feature_cols=qrow.feature_indices(),
                               natural_missing=qrow.missing)
        episode = Episode(context=ctx, query=qrow, mask=mask)
        prep = prepare_episode(episode, tuned.cfg)
        with nk.Tape() as tape:
            loss, n_cells = episode_loss(tuned.params, tuned.cfg, prep)
        if loss is None:
            history.append({"step": step, "query": qi, "loss": np.nan,
                            "cells": 0})
            step += 1
            continue
        nk.backward(tape, loss)
        grads = {k: t.grad for k, t in tuned.params.items() if t.grad is not None}
        if cfg.max_grad_norm is not None:
            total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if total > cfg.max_grad_norm and total > 0:
                for g in grads.values():
                    g *= cfg.max_grad_norm / total
        nk.adam_step(tuned.params, grads, state, lr=cfg.lr)
        for t in tuned.params.values():
            t.zero_grad()
        history.append({"step": step, "query": qi, "loss": float(loss.data),
                        "cells": n_cells})
        step += 1
    return tuned, history
