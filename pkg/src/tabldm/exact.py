"""Exact finite-distribution oracle for conditional reconstruction.

Everything here is plain 64-bit summation over small probability tables,
no sampling and no model: joints over ``d`` variables with a shared finite
alphabet, the family of conditionals obtained by masking every size-``k``
variable subset, reconstruction of the joint from such a family, a
counterexample showing one fixed mask is not enough, and an exact
masked-conditional KL used to compare mask sizes.

Conditional tables are stored at full joint shape: ``tables[pi][x]`` is
``p(x_pi | x_rest)`` evaluated at the complete assignment ``x``, which makes
marginalizing, comparing and broadcasting trivial.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

__all__ = [
    "DiscreteJoint", "ConditionalFamily", "InconsistencyError",
    "random_joint", "conditionals_from_joint", "joint_from_conditionals",
    "single_mask_gap", "masked_conditional_kl", "total_variation",
]

_SUM_TOL = 1e-12


class InconsistencyError(ValueError):
    """Raised when a conditional family cannot come from any single joint."""

    def __init__(self, msg, offending=None, deviation=None):
        super().__init__(msg)
        self.offending = offending
        self.deviation = deviation


@dataclass(frozen=True)
class DiscreteJoint:
    """A joint distribution over ``d`` variables with ``omega`` states each."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", p)
        if p.ndim < 1:
            raise ValueError("joint needs at least one variable")
        if len(set(p.shape)) != 1:
            raise ValueError(f"all variables must share one alphabet, got shape {p.shape}")
        if np.any(p < 0):
            raise ValueError("negative probability entry")
        if abs(p.sum() - 1.0) > _SUM_TOL:
            raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")

    @property
    def d(self) -> int:
        return self.probs.ndim

    @property
    def omega(self) -> int:
        return self.probs.shape[0]

    @classmethod
    def normalized(cls, weights) -> "DiscreteJoint":
        w = np.asarray(weights, dtype=np.float64)
        return cls(w / w.sum())


@dataclass(frozen=True)
class ConditionalFamily:
    """All conditionals ``p(X_pi | X_rest)`` for every size-``k`` subset ``pi``."""

    d: int
    omega: int
    k: int
    tables: dict[tuple[int, ...], np.ndarray]

    def subsets(self):
        return sorted(self.tables)


def random_joint(d: int, omega: int, rng: np.random.Generator,
                 floor: float = 0.05) -> DiscreteJoint:
    """A strictly positive random joint; ``floor`` keeps entries away from 0."""
    w = rng.random((omega,) * d) + floor
    return DiscreteJoint.normalized(w)


def conditionals_from_joint(joint: DiscreteJoint, k: int) -> ConditionalFamily:
    """Mask every size-``k`` subset and record the exact conditionals."""
    if not (1 <= k <= joint.d):
        raise ValueError(f"k must be in 1..{joint.d}, got {k}")
    p = joint.probs
    if np.any(p <= 0):
        raise ValueError("conditionals need a strictly positive joint")
    tables = {}
    for pi in combinations(range(joint.d), k):
        rest_marg = p.sum(axis=pi, keepdims=True)
        tables[pi] = p / rest_marg
    return ConditionalFamily(joint.d, joint.omega, k, tables)


def _singletons(family: ConditionalFamily, tol: float) -> dict[int, np.ndarray]:
    """Recover every ``p(x_j | x_rest)`` from the family via the ratio trick,
    cross-checking all masks that contain ``j``."""
    out: dict[int, np.ndarray] = {}
    for j in range(family.d):
        candidates = []
        for pi, table in sorted(family.tables.items()):
            if j not in pi:
                continue
            # summing the conditional over x_j marginalizes j out of the masked
            # block, so the ratio leaves exactly p(x_j | everything else)
            denom = table.sum(axis=j, keepdims=True)
            candidates.append((pi, table / denom))
        base_pi, base = candidates[0]
        for pi, cand in candidates[1:]:
            dev = float(np.max(np.abs(cand - base)))
            if dev > tol:
                raise InconsistencyError(
                    f"singleton conditional for variable {j} disagrees between "
                    f"masks {base_pi} and {pi} (max deviation {dev:.3e})",
                    offending=(base_pi, pi), deviation=dev)
        out[j] = base
    return out


def joint_from_conditionals(family: ConditionalFamily,
                            tol: float = 1e-9) -> DiscreteJoint:
    """Reconstruct the unique joint consistent with a size-``k`` mask family.

    Three stages: recover single-variable conditionals by ratios inside each
    mask, grow conditionals one variable at a time using the reciprocal-sum
    identity, and read the joint off the full-set conditional.  The result is
    verified against the input family; disagreement beyond ``tol`` raises
    :class:`InconsistencyError`.
    """
    d = family.d
    p1 = _singletons(family, tol)
    level: dict[tuple[int, ...], np.ndarray] = {(j,): p1[j] for j in range(d)}
    for size in range(2, d + 1):
        nxt: dict[tuple[int, ...], np.ndarray] = {}
        for subset in combinations(range(d), size):
            j = subset[0]
            rest = subset[1:]
            # sum_{x_j} p(x_j | x_-j) / p(X_rest | x_j, x_out) = 1 / p(X_rest | x_out)
            recip = (p1[j] / level[rest]).sum(axis=j, keepdims=True)
            nxt[subset] = p1[j] / recip
        level = nxt
    full = level[tuple(range(d))]
    joint = DiscreteJoint.normalized(full)
    # closing the loop: the family regenerated from the answer must match
    check = conditionals_from_joint(joint, family.k)
    for pi in family.tables:
        dev = float(np.max(np.abs(check.tables[pi] - family.tables[pi])))
        if dev > tol:
            raise InconsistencyError(
                f"family is not consistent with any joint: mask {pi} deviates "
                f"by {dev:.3e} from its reconstruction",
                offending=(pi, "reconstruction"), deviation=dev)
    return joint


def total_variation(p: DiscreteJoint, q: DiscreteJoint) -> float:
    return 0.5 * float(np.sum(np.abs(p.probs - q.probs)))


def single_mask_gap() -> tuple[DiscreteJoint, DiscreteJoint, float]:
    """Two joints over two binary variables that share ``p(x1 | x2)`` exactly
    yet differ as distributions: reweighting the x2 marginal never touches the
    x1-given-x2 conditional, so observing that one mask cannot identify the
    joint.  Returns ``(p, p_alt, total_variation)``."""
    p = DiscreteJoint(np.array([[0.1, 0.2], [0.3, 0.4]]))
    cond_x1 = p.probs / p.probs.sum(axis=0, keepdims=True)
    q_x2 = np.array([0.6, 0.4])  # the true marginal is (0.4, 0.6)
    alt = DiscreteJoint(cond_x1 * q_x2[None, :])
    return p, alt, total_variation(p, alt)


def masked_conditional_kl(r: DiscreteJoint, q: DiscreteJoint, k: int,
                          weight_joint: DiscreteJoint | None = None) -> float:
    """Exact expected KL between the two models' masked conditionals.

    Draw an assignment from ``r`` (or from ``weight_joint`` when given) and a
    size-``k`` mask uniformly; compare ``r`` and ``q`` conditioned on the
    unmasked part.  Everything is summed exactly.  Under the default
    weighting this is non-decreasing in ``k``.
    """
    if r.probs.shape != q.probs.shape:
        raise ValueError("joints must share shape")
    if np.any(r.probs <= 0) or np.any(q.probs <= 0):
        raise ValueError("masked-conditional KL needs strictly positive joints")
    w = (weight_joint or r).probs
    if w.shape != r.probs.shape:
        raise ValueError("weight joint must share shape")
    subsets = list(combinations(range(r.d), k))
    total = 0.0
    for pi in subsets:
        r_cond = r.probs / r.probs.sum(axis=pi, keepdims=True)
        q_cond = q.probs / q.probs.sum(axis=pi, keepdims=True)
        total += float(np.sum(w * (np.log(r_cond) - np.log(q_cond))))
    return total / len(subsets)
