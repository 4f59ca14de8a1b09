"""Held-out synthetic task family for learning smoke tests: two Gaussian
clouds with a controlled separation, plus the in-context evaluation loop."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .baselines import majority_accuracy, nn_accuracy
from ..inference import predict
from ..model import Model
from ..tabular import CATEGORICAL, NUMERIC, Column, Table

__all__ = ["TaskEval", "two_gaussian_task", "evaluate_icl"]


@dataclass
class TaskEval:
    icl: float
    majority: float
    nn: float


def two_gaussian_task(rng: np.random.Generator, m_ct: int = 256,
                      m_te: int = 64, d: int = 4,
                      separation: float = 2.4) -> tuple[Table, Table, np.ndarray]:
    """One binary task: unit-covariance Gaussians whose means differ by
    ``separation`` along a random direction.  Returns (context, test rows
    without labels, true test labels)."""
    direction = rng.normal(size=d)
    direction /= np.linalg.norm(direction)
    mu0 = rng.normal(0.0, 1.0, size=d)
    mu1 = mu0 + separation * direction
    while True:
        y_ct = (rng.random(m_ct) < 0.5).astype(int)
        if 2 <= y_ct.sum() <= m_ct - 2:
            break
    y_te = (rng.random(m_te) < 0.5).astype(int)
    x_ct = np.where(y_ct[:, None] == 1, mu1, mu0) + rng.normal(size=(m_ct, d))
    x_te = np.where(y_te[:, None] == 1, mu1, mu0) + rng.normal(size=(m_te, d))
    cols = tuple(Column(f"x{j}", NUMERIC) for j in range(d)) + (
        Column("label", CATEGORICAL, ("c0", "c1")),)
    ctx = Table(cols, np.column_stack([x_ct, y_ct.astype(float)]), target=d)
    tst = Table(cols, np.column_stack([x_te, np.full(m_te, np.nan)]), target=d)
    return ctx, tst, y_te


def evaluate_icl(model: Model, n_tasks: int = 20, seed: int = 0,
                 **task_kwargs) -> list[TaskEval]:
    """Score in-context prediction against the majority and nearest-neighbor
    references on freshly drawn tasks."""
    results = []
    for t in range(n_tasks):
        rng = np.random.default_rng([seed, t])
        ctx, tst, y_true = two_gaussian_task(rng, **task_kwargs)
        res = predict(model, ctx, tst)
        icl = float((res.point.astype(int) == y_true).mean())
        results.append(TaskEval(icl=icl,
                                majority=majority_accuracy(ctx, y_true),
                                nn=nn_accuracy(ctx, tst, y_true)))
    return results
