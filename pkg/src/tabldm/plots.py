"""Figure rendering for report outputs.

Every report-style CLI command that writes a delimited file also drops a
PNG next to it.  All figures go through the Agg backend with fixed sizes
and no timestamps, so rerunning a command reproduces the file bytes.
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = [
    "loss_curve", "rank_bars", "robustness_curves", "scaling_curve",
    "deviation_hist",
]

_DPI = 100


def _save(fig, path):
    fig.savefig(path, dpi=_DPI, metadata={"Software": None})
    plt.close(fig)


def loss_curve(history: list[dict], path) -> None:
    """Per-step training loss; skipped steps (no loss cells) are left out."""
    steps = [h["step"] for h in history if np.isfinite(h["loss"])]
    losses = [h["loss"] for h in history if np.isfinite(h["loss"])]
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ax.plot(steps, losses, lw=1.0)
    if len(losses) >= 20:
        k = max(1, len(losses) // 20)
        smooth = np.convolve(losses, np.ones(k) / k, mode="valid")
        ax.plot(steps[k - 1:], smooth, lw=2.0)
    ax.set_xlabel("step")
    ax.set_ylabel("masked-cell loss")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def rank_bars(methods: list[str], mean_ranks: np.ndarray, path) -> None:
    """Mean rank per method over a suite; lower is better."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    pos = np.arange(len(methods))
    ax.bar(pos, mean_ranks, color="tab:blue")
    ax.set_xticks(pos)
    ax.set_xticklabels(methods, rotation=20, ha="right")
    ax.set_ylabel("mean rank (lower is better)")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def robustness_curves(levels: list[float], by_method: dict[str, list[float]],
                      metric: str, path) -> None:
    """One line per method: score as the perturbation level grows."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for name in sorted(by_method):
        ax.plot(levels, by_method[name], marker="o", label=name)
    ax.set_xlabel("perturbation level")
    ax.set_ylabel(metric)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def scaling_curve(n: np.ndarray, m: np.ndarray, fit, path) -> None:
    """Observed points and the fitted power-plus-floor curve, log-x."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ax.scatter(n, m, color="tab:blue", label="observed", zorder=3)
    grid = np.logspace(np.log10(n.min()), np.log10(n.max()), 200)
    ax.plot(grid, fit.predict(grid), color="tab:orange",
            label=f"fit: {fit.a:.3g} * n^{fit.c:.3g} + {fit.b:.3g}")
    ax.set_xscale("log")
    ax.set_xlabel("n")
    ax.set_ylabel("metric")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def deviation_hist(deviations: np.ndarray, path, xlabel: str = "max abs deviation") -> None:
    """Histogram of per-trial reconstruction deviations (log-spaced bins)."""
    dev = np.asarray(deviations, dtype=float)
    floor = 1e-18
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ax.hist(np.log10(np.maximum(dev, floor)), bins=30, color="tab:blue")
    ax.set_xlabel(f"log10 {xlabel}")
    ax.set_ylabel("trials")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    _save(fig, path)
