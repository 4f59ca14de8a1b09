"""Suite evaluation: split each dataset, run the model variants next to the
reference predictors, collect metrics, and rank everything."""
from __future__ import annotations

import numpy as np

from .baselines import majority_class, mean_value, nn_predict
from .metrics import RankSummary, metrics_cls, metrics_reg, rank_aggregate
from ..episodes import split_episode
from ..inference import ensemble_predict, predict, predict_retrieval
from ..model import Model
from ..tabular import CATEGORICAL, NUMERIC, Table

__all__ = ["CLS_METHODS", "REG_METHODS", "evaluate_table", "evaluate_suite"]

CLS_METHODS = ("model", "retrieval", "ensemble", "nn1", "majority")
REG_METHODS = ("model", "retrieval", "ensemble", "nn1", "mean")


def _check_task(table: Table, task: str) -> None:
    kind = table.columns[table.target].kind
    if task == "cls" and kind != CATEGORICAL:
        raise ValueError("classification run, but the target column is numeric")
    if task == "reg" and kind != NUMERIC:
        raise ValueError("regression run, but the target column is categorical")


def _cls_probs(method: str, model: Model, train: Table, test: Table,
               n_classes: int, seed: int) -> np.ndarray:
    if method == "model":
        return predict(model, train, test).probs
    if method == "retrieval":
        return predict_retrieval(model, train, test)[0].probs
    if method == "ensemble":
        return ensemble_predict(model, train, test, seed=seed).probs
    if method == "nn1":
        probs = np.full((test.m, n_classes), 1e-6)
        lab = nn_predict(train, test).astype(int)
        probs[np.arange(test.m), lab] = 1.0
        return probs / probs.sum(axis=1, keepdims=True)
    if method == "majority":
        probs = np.full((test.m, n_classes), 1e-6)
        probs[:, majority_class(train)] = 1.0
        return probs / probs.sum(axis=1, keepdims=True)
    raise ValueError(f"unknown method {method!r}")


def _reg_points(method: str, model: Model, train: Table, test: Table,
                seed: int) -> np.ndarray:
    if method == "model":
        return predict(model, train, test).point
    if method == "retrieval":
        return predict_retrieval(model, train, test)[0].point
    if method == "ensemble":
        return ensemble_predict(model, train, test, seed=seed).point
    if method == "nn1":
        return nn_predict(train, test)
    if method == "mean":
        return np.full(test.m, mean_value(train))
    raise ValueError(f"unknown method {method!r}")


def evaluate_table(model: Model, table: Table, task: str, seed: int = 0,
                   test_fraction: float = 0.3,
                   methods: tuple[str, ...] | None = None) -> dict[str, dict]:
    """Split one dataset, run every method, return metrics per method."""
    _check_task(table, task)
    methods = methods or (CLS_METHODS if task == "cls" else REG_METHODS)
    rng = np.random.default_rng(seed)
    train, test = split_episode(table, 1.0 - test_fraction, rng)
    scored = ~test.missing[:, test.target]
    if scored.sum() < 2:
        raise ValueError("test split has fewer than two labeled rows")
    test_rows = test.take_rows(np.nonzero(scored)[0])
    y_true = test_rows.values[:, test_rows.target]
    out: dict[str, dict] = {}
    if task == "cls":
        n_classes = len(table.columns[table.target].vocab)
        for method in methods:
            probs = _cls_probs(method, model, train, test_rows, n_classes, seed)
            auc, acc, f1 = metrics_cls(y_true.astype(int), probs)
            out[method] = {"auc": auc, "accuracy": acc, "f1": f1}
    else:
        for method in methods:
            points = _reg_points(method, model, train, test_rows, seed)
            nrmse, r2 = metrics_reg(y_true, points)
            out[method] = {"nrmse": nrmse, "r2": r2}
    return out


def evaluate_suite(model: Model, named_tables: list[tuple[str, Table]],
                   task: str, seed: int = 0,
                   methods: tuple[str, ...] | None = None
                   ) -> tuple[list[dict], RankSummary, tuple[str, ...]]:
    """Evaluate every dataset, then rank methods.  Returns flat result rows
    (one per dataset and method), the rank summary, and the method order."""
    methods = methods or (CLS_METHODS if task == "cls" else REG_METHODS)
    rows: list[dict] = []
    score_matrix = []
    for name, table in named_tables:
        per_method = evaluate_table(model, table, task, seed=seed,
                                    methods=methods)
        score_matrix.append([per_method[m]["auc" if task == "cls" else "nrmse"]
                             for m in methods])
        for m in methods:
            rows.append({"dataset": name, "method": m, **per_method[m]})
    summary = rank_aggregate(np.asarray(score_matrix),
                             higher_better=(task == "cls"))
    return rows, summary, methods
