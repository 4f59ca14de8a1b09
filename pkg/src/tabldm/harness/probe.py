"""Linear probing: a softmax regression trained by plain gradient descent on
a stratified split, scored with the shared classification metrics."""
from __future__ import annotations

import numpy as np

from .metrics import metrics_cls

__all__ = ["linear_probe", "softmax_regression"]


def _stratified_split(labels: np.ndarray, train_fraction: float,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    train, test = [], []
    for cls in np.unique(labels):
        idx = np.nonzero(labels == cls)[0]
        if idx.size < 2:
            raise ValueError(f"class {cls} has fewer than 2 samples")
        idx = rng.permutation(idx)
        n_tr = int(np.clip(round(train_fraction * idx.size), 1, idx.size - 1))
        train.append(idx[:n_tr])
        test.append(idx[n_tr:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def softmax_regression(x: np.ndarray, y: np.ndarray, n_classes: int,
                       lr: float = 0.5, epochs: int = 300,
                       l2: float = 1e-4) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Full-batch gradient descent on the multinomial cross-entropy.
    Returns (weights, bias, per-epoch loss trace)."""
    n, p = x.shape
    w = np.zeros((p, n_classes))
    b = np.zeros(n_classes)
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0
    trace = []
    for _ in range(epochs):
        logits = x @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        ex = np.exp(logits)
        probs = ex / ex.sum(axis=1, keepdims=True)
        nll = -np.log(probs[np.arange(n), y] + 1e-300).mean()
        trace.append(float(nll + 0.5 * l2 * (w ** 2).sum()))
        g = (probs - onehot) / n
        w -= lr * (x.T @ g + l2 * w)
        b -= lr * g.sum(axis=0)
    return w, b, trace


def linear_probe(embeddings: np.ndarray, labels: np.ndarray,
                 train_fraction: float = 0.7, seed: int = 0,
                 lr: float = 0.5, epochs: int = 300) -> dict:
    """Fit a linear classifier on 70% of the rows, score it on the rest.
    Returns auc / accuracy / f1 plus the training-loss trace."""
    x = np.asarray(embeddings, dtype=float)
    y = np.asarray(labels, dtype=int)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ValueError("embeddings is (n, p) and labels is (n,)")
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("probing needs at least two classes")
    dense = np.searchsorted(classes, y)
    rng = np.random.default_rng(seed)
    tr, te = _stratified_split(dense, train_fraction, rng)
    mean = x[tr].mean(axis=0)
    std = x[tr].std(axis=0)
    std[std == 0] = 1.0
    xz = (x - mean) / std
    w, b, trace = softmax_regression(xz[tr], dense[tr], classes.size,
                                     lr=lr, epochs=epochs)
    logits = xz[te] @ w + b
    logits -= logits.max(axis=1, keepdims=True)
    ex = np.exp(logits)
    probs = ex / ex.sum(axis=1, keepdims=True)
    auc, acc, f1 = metrics_cls(dense[te], probs)
    return {"auc": auc, "accuracy": acc, "f1": f1, "loss_trace": trace,
            "n_train": int(tr.size), "n_test": int(te.size)}
