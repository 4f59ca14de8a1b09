"""Fitting M = a * N^c + b: a golden-section search over the exponent with a
closed-form least-squares solve for the linear pair at each candidate."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["ScalingFit", "scaling_fit"]

_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass
class ScalingFit:
    a: float
    b: float
    c: float
    r2: float
    degenerate: bool = False
    sse_trace: list[float] = field(default_factory=list, repr=False, compare=False)

    def predict(self, n: np.ndarray) -> np.ndarray:
        return self.a * np.asarray(n, dtype=float) ** self.c + self.b


def _solve_linear(n: np.ndarray, m: np.ndarray, c: float
                  ) -> tuple[float, float, float]:
    x = np.column_stack([n ** c, np.ones_like(n)])
    theta, *_ = np.linalg.lstsq(x, m, rcond=None)
    resid = m - x @ theta
    return float(theta[0]), float(theta[1]), float(resid @ resid)


def scaling_fit(points, c_range: tuple[float, float] = (-2.0, 0.0),
                tol: float = 1e-6, grid: int = 41) -> ScalingFit:
    """Least-squares power-law fit over the given (N, M) pairs.

    The exponent interval is first scanned on a coarse grid to bracket the
    best basin, then narrowed by golden-section search to ``tol``; (a, b)
    come from the exact linear solve at each exponent.  A constant target is
    flagged degenerate (any exponent fits it equally well).
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 4:
        raise ValueError("need at least 4 (N, M) points")
    n, m = pts[:, 0], pts[:, 1]
    if (n <= 0).any():
        raise ValueError("resource values N must be positive")
    trace: list[float] = []

    def sse_at(c: float) -> float:
        return _solve_linear(n, m, c)[2]

    cs = np.linspace(c_range[0], c_range[1], grid)
    errs = [sse_at(c) for c in cs]
    k = int(np.argmin(errs))
    lo = cs[max(k - 1, 0)]
    hi = cs[min(k + 1, grid - 1)]
    best_sse = errs[k]
    trace.append(best_sse)
    x1 = hi - _GOLDEN * (hi - lo)
    x2 = lo + _GOLDEN * (hi - lo)
    f1, f2 = sse_at(x1), sse_at(x2)
    while hi - lo > tol:
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - _GOLDEN * (hi - lo)
            f1 = sse_at(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + _GOLDEN * (hi - lo)
            f2 = sse_at(x2)
        best_sse = min(best_sse, f1, f2)
        trace.append(best_sse)
    c = (lo + hi) / 2.0
    a, b, sse = _solve_linear(n, m, c)
    sst = float(((m - m.mean()) ** 2).sum())
    if sst == 0.0:
        return ScalingFit(a=a, b=b, c=c, r2=1.0 if sse < 1e-18 else -np.inf,
                          degenerate=True, sse_trace=trace)
    return ScalingFit(a=a, b=b, c=c, r2=1.0 - sse / sst, sse_trace=trace)
