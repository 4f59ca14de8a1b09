"""Synthetic-data forge: hierarchical causal graphs evaluated into tables.

Graphs grow by repeatedly attaching a unit (one new child wired to sampled
parent nodes); every zero-in-degree node is a root with its own sampling
distribution, and every edge carries a frozen random function (a small MLP,
a 1-D convolution over the sample axis, or a decision tree over the parent
value).  A child aggregates its mapped parents and receives Gaussian noise
scaled to the aggregated column's spread; roots get no noise.

From a full table, datasets are cut out either by graph distance around a
target node or by a difficulty proxy (1-nearest-neighbour holdout score)
bucketed into terciles.  Task adaptation then turns the target column into
a classification or regression target, rejecting degenerate draws.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .tabular import CATEGORICAL, NUMERIC, Column, Table

__all__ = [
    "ForgeConfig", "TaskSpec", "Graph", "Node", "ForgeError", "TaskRejected",
    "NonFiniteError", "build_dag", "propagate", "subsample_graph_biased",
    "subsample_difficulty_biased", "adapt_task", "sample_dataset",
    "nn_holdout_score", "assign_terciles", "sample_bucket_probs",
    "skeleton_distances", "d_separated_marginally", "ACTIVATIONS",
]


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ForgeConfig:
    units_range: tuple[int, int] = (2, 6)
    parents_range: tuple[int, int] = (1, 3)
    attach_mode: str = "random"          # or "chain": always extend the last child
    rows: int = 256
    feature_range: tuple[int, int] = (2, 8)

    edge_kind_weights: tuple[float, float, float] = (0.6, 0.2, 0.2)  # mlp, conv, tree
    mlp_depth_range: tuple[int, int] = (1, 2)
    mlp_width_range: tuple[int, int] = (2, 6)
    conv_kernel_sizes: tuple[int, ...] = (3, 5, 7)
    tree_depth_range: tuple[int, int] = (1, 3)

    root_family_weights: tuple[float, float, float, float] = (0.4, 0.25, 0.2, 0.15)
    # normal, uniform, zipf categorical, lognormal
    zipf_levels_range: tuple[int, int] = (2, 10)
    zipf_exponent: float = 1.0
    lognormal_sigma: float = 0.5

    noise_coeff_range: tuple[float, float] = (0.01, 0.3)  # log-uniform

    subsample_graph_prob: float = 0.5    # else difficulty-biased
    n_candidates: int = 12
    difficulty_rows: int = 512
    bucket_means: tuple[float, float, float] = (0.4, 0.4, 0.2)  # high, moderate, low
    bucket_std: float = 0.1

    classification_prob: float = 0.7
    class_count_range: tuple[int, int] = (2, 5)
    retry_budget: int = 8

    def validate(self):
        if self.n_candidates < 3:
            raise ValueError("need at least 3 subsample candidates for terciles")
        if self.attach_mode not in ("random", "chain"):
            raise ValueError(f"unknown attach mode {self.attach_mode!r}")
        if self.units_range[0] < 1:
            raise ValueError("need at least one unit")
        return self


@dataclass(frozen=True)
class TaskSpec:
    kind: str                      # "cls" | "reg"
    n_classes: int | None = None   # sampled from config when None


class ForgeError(RuntimeError):
    pass


class TaskRejected(ValueError):
    pass


class NonFiniteError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# activations (scalar maps applied elementwise to columns)


def _np_gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp overflows for large negative inputs; the result still saturates
    # correctly, so only the warning needs silencing
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


ACTIVATIONS: dict[str, callable] = {
    "identity": lambda x: x,
    "tanh": np.tanh,
    "sigmoid": _sigmoid,
    "log": lambda x: np.sign(x) * np.log1p(np.abs(x)),
    "abs": np.abs,
    "sin": np.sin,
    "square": lambda x: x * x,
    "modulo": lambda x: np.mod(x, 2.0 * np.pi),
    "heaviside": lambda x: np.heaviside(x, 1.0),
    "gelu": _np_gelu,
}

_ACT_NAMES = tuple(ACTIVATIONS)

_ROOT_FAMILIES = ("normal", "uniform", "zipf", "lognormal")
_EDGE_KINDS = ("mlp", "conv", "tree")


# ---------------------------------------------------------------------------
# frozen edge functions


@dataclass(frozen=True)
class EdgeFn:
    kind: str
    params: dict

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "mlp":
            h = x[:, None]
            for w, b, act in self.params["layers"]:
                h = ACTIVATIONS[act](h @ w + b)
            return h[:, 0]
        if self.kind == "conv":
            y = np.convolve(x, self.params["kernel"], mode="same")
            return ACTIVATIONS[self.params["act"]](y)
        if self.kind == "tree":
            thresholds = self.params["thresholds"]
            leaves = self.params["leaves"]
            depth = self.params["depth"]
            idx = np.zeros(x.shape[0], dtype=np.int64)
            for _ in range(depth):
                go_right = x > thresholds[idx]
                idx = 2 * idx + 1 + go_right
            return leaves[idx - (2 ** depth - 1)]
        raise ValueError(f"unknown edge kind {self.kind!r}")


def _init_matrix(rng, fan_in, fan_out):
    # Xavier or He, coin-flipped per matrix
    if rng.random() < 0.5:
        scale = math.sqrt(2.0 / (fan_in + fan_out))
    else:
        scale = math.sqrt(2.0 / fan_in)
    return rng.normal(0.0, scale, size=(fan_in, fan_out))


def _sample_edge(cfg: ForgeConfig, rng) -> EdgeFn:
    kind = rng.choice(_EDGE_KINDS, p=np.asarray(cfg.edge_kind_weights) /
                      sum(cfg.edge_kind_weights))
    if kind == "mlp":
        depth = int(rng.integers(cfg.mlp_depth_range[0], cfg.mlp_depth_range[1] + 1))
        widths = [1] + [int(rng.integers(cfg.mlp_width_range[0],
                                         cfg.mlp_width_range[1] + 1))
                        for _ in range(depth)] + [1]
        layers = []
        for a, b in zip(widths[:-1], widths[1:]):
            w = _init_matrix(rng, a, b)
            bias = rng.normal(0.0, 0.1, size=b)
            act = str(rng.choice(_ACT_NAMES))
            layers.append((w, bias, act))
        return EdgeFn("mlp", {"layers": layers})
    if kind == "conv":
        ksize = int(rng.choice(cfg.conv_kernel_sizes))
        kernel = _init_matrix(rng, ksize, 1)[:, 0]
        return EdgeFn("conv", {"kernel": kernel, "act": str(rng.choice(_ACT_NAMES))})
    depth = int(rng.integers(cfg.tree_depth_range[0], cfg.tree_depth_range[1] + 1))
    return EdgeFn("tree", {
        "depth": depth,
        "thresholds": rng.normal(size=2 ** depth - 1),
        "leaves": rng.normal(size=2 ** depth),
    })


@dataclass(frozen=True)
class AggSpec:
    kind: str                    # "mean" | "weighted" | "mlp"
    params: dict

    def apply(self, mapped: np.ndarray) -> np.ndarray:
        """Combine mapped parent columns, shape (m, n_parents) -> (m,)."""
        if self.kind == "mean":
            return mapped.mean(axis=1)
        if self.kind == "weighted":
            return mapped @ self.params["weights"]
        if self.kind == "mlp":
            h = mapped
            for w, b in self.params["layers"][:-1]:
                h = _np_gelu(h @ w + b)
            w, b = self.params["layers"][-1]
            return (h @ w + b)[:, 0]
        raise ValueError(f"unknown aggregation {self.kind!r}")


def _sample_agg(n_parents: int, rng) -> AggSpec:
    kind = str(rng.choice(("mean", "weighted", "mlp")))
    if kind == "mean":
        return AggSpec("mean", {})
    if kind == "weighted":
        raw = rng.normal(size=n_parents)
        w = np.exp(raw - raw.max())
        return AggSpec("weighted", {"weights": w / w.sum()})
    width = int(rng.integers(2, 5))
    layers = [(_init_matrix(rng, n_parents, width), rng.normal(0.0, 0.1, size=width)),
              (_init_matrix(rng, width, 1), rng.normal(0.0, 0.1, size=1))]
    return AggSpec("mlp", {"layers": layers})


# ---------------------------------------------------------------------------
# graph construction


@dataclass(frozen=True)
class RootSpec:
    family: str
    params: dict

    def sample(self, m: int, rng) -> np.ndarray:
        if self.family == "normal":
            return rng.normal(size=m)
        if self.family == "uniform":
            return rng.uniform(-1.0, 1.0, size=m)
        if self.family == "zipf":
            return rng.choice(len(self.params["weights"]), size=m,
                              p=self.params["weights"]).astype(np.float64)
        if self.family == "lognormal":
            return np.exp(rng.normal(0.0, self.params["sigma"], size=m))
        raise ValueError(f"unknown root family {self.family!r}")


@dataclass
class Node:
    index: int
    root: RootSpec | None = None
    parents: list[int] = field(default_factory=list)
    edges: list[EdgeFn] = field(default_factory=list)
    agg: AggSpec | None = None
    noise_coeff: float | None = None

    @property
    def is_root(self) -> bool:
        return self.root is not None


@dataclass
class Graph:
    nodes: list[Node]
    units: list[tuple[list[int], int]]   # (parent ids, child id) in attach order

    @property
    def n(self) -> int:
        return len(self.nodes)

    def roots(self) -> list[int]:
        return [n.index for n in self.nodes if n.is_root]

    def edge_list(self) -> list[tuple[int, int]]:
        return [(p, n.index) for n in self.nodes for p in n.parents]


def _sample_root(cfg: ForgeConfig, rng) -> RootSpec:
    fam = rng.choice(_ROOT_FAMILIES, p=np.asarray(cfg.root_family_weights) /
                     sum(cfg.root_family_weights))
    if fam == "zipf":
        levels = int(rng.integers(cfg.zipf_levels_range[0],
                                  cfg.zipf_levels_range[1] + 1))
        w = 1.0 / np.arange(1, levels + 1) ** cfg.zipf_exponent
        return RootSpec("zipf", {"weights": w / w.sum()})
    if fam == "lognormal":
        return RootSpec("lognormal", {"sigma": cfg.lognormal_sigma})
    return RootSpec(str(fam), {})


def build_dag(cfg: ForgeConfig, rng: np.random.Generator) -> Graph:
    """Grow a DAG by unit attachment.

    The first unit creates fresh roots for all its parent slots.  Later units
    draw parents from the member nodes of one or two existing units (in
    ``chain`` mode, always the previous unit's child), topping up with fresh
    roots when the pool runs short.  Children only ever point at existing
    nodes, so the result is acyclic by construction.
    """
    cfg.validate()
    n_units = int(rng.integers(cfg.units_range[0], cfg.units_range[1] + 1))
    nodes: list[Node] = []
    units: list[tuple[list[int], int]] = []

    def new_root() -> int:
        node = Node(index=len(nodes), root=_sample_root(cfg, rng))
        nodes.append(node)
        return node.index

    def new_child(parent_ids: list[int]) -> int:
        node = Node(index=len(nodes),
                    parents=list(parent_ids),
                    edges=[_sample_edge(cfg, rng) for _ in parent_ids],
                    agg=_sample_agg(len(parent_ids), rng),
                    noise_coeff=float(np.exp(rng.uniform(
                        math.log(cfg.noise_coeff_range[0]),
                        math.log(cfg.noise_coeff_range[1])))))
        nodes.append(node)
        return node.index

    for u in range(n_units):
        k = int(rng.integers(cfg.parents_range[0], cfg.parents_range[1] + 1))
        if u == 0:
            parent_ids = [new_root() for _ in range(k)]
        elif cfg.attach_mode == "chain":
            parent_ids = [units[-1][1]]
        else:
            n_targets = min(len(units), int(rng.integers(1, 3)))
            chosen = rng.choice(len(units), size=n_targets, replace=False)
            pool = sorted({nid for t in chosen for nid in units[t][0] + [units[t][1]]})
            take = min(k, len(pool))
            parent_ids = sorted(int(i) for i in
                                rng.choice(pool, size=take, replace=False))
            parent_ids += [new_root() for _ in range(k - take)]
        child = new_child(parent_ids)
        units.append((list(parent_ids), child))
    return Graph(nodes, units)


def propagate(graph: Graph, m: int, rng: np.random.Generator) -> Table:
    """Evaluate every node column for ``m`` rows, in node order (which is
    topological).  Raises :class:`NonFiniteError` if anything overflows."""
    cols = np.empty((m, graph.n))
    for node in graph.nodes:
        if node.is_root:
            col = node.root.sample(m, rng)
        else:
            mapped = np.column_stack([edge.apply(cols[:, p])
                                      for p, edge in zip(node.parents, node.edges)])
            pre = node.agg.apply(mapped)
            if not np.all(np.isfinite(pre)):
                raise NonFiniteError(f"node {node.index} produced non-finite values")
            scale = node.noise_coeff * pre.std()
            col = pre + rng.normal(0.0, 1.0, size=m) * scale
        if not np.all(np.isfinite(col)):
            raise NonFiniteError(f"node {node.index} produced non-finite values")
        cols[:, node.index] = col
    columns = []
    for node in graph.nodes:
        if node.is_root and node.root.family == "zipf":
            levels = len(node.root.params["weights"])
            columns.append(Column(f"x{node.index}", CATEGORICAL,
                                  tuple(str(v) for v in range(levels))))
        else:
            columns.append(Column(f"x{node.index}", NUMERIC))
    return Table(columns, cols)


# ---------------------------------------------------------------------------
# graph utilities


def skeleton_distances(graph: Graph, start: int) -> np.ndarray:
    """BFS hop counts from ``start`` on the undirected skeleton (-1: unreachable)."""
    adj: list[set[int]] = [set() for _ in range(graph.n)]
    for a, b in graph.edge_list():
        adj[a].add(b)
        adj[b].add(a)
    dist = np.full(graph.n, -1, dtype=np.int64)
    dist[start] = 0
    frontier = [start]
    while frontier:
        nxt = []
        for i in frontier:
            for j in adj[i]:
                if dist[j] < 0:
                    dist[j] = dist[i] + 1
                    nxt.append(j)
        frontier = nxt
    return dist


def _ancestor_sets(graph: Graph) -> list[set[int]]:
    anc: list[set[int]] = [set() for _ in range(graph.n)]
    for node in graph.nodes:  # node order is topological
        s = {node.index}
        for p in node.parents:
            s |= anc[p]
        anc[node.index] = s
    return anc


def d_separated_marginally(graph: Graph, i: int, j: int) -> bool:
    """True when nodes i and j are d-separated given the empty set, which for
    a DAG means they share no common ancestor (self included)."""
    anc = _ancestor_sets(graph)
    return not (anc[i] & anc[j])


# ---------------------------------------------------------------------------
# dataset subsampling


def subsample_graph_biased(graph: Graph, table: Table, d_out: int,
                           rng: np.random.Generator) -> Table:
    """Pick a target node uniformly, then features with probability
    proportional to ``2**(-hops)`` on the undirected skeleton."""
    target = int(rng.integers(graph.n))
    dist = skeleton_distances(graph, target)
    cand = [i for i in range(graph.n) if i != target and dist[i] >= 0]
    d_out = min(d_out, len(cand))
    if d_out < 1:
        raise ForgeError("graph too small to subsample")
    w = np.array([2.0 ** (-dist[i]) for i in cand])
    chosen = rng.choice(cand, size=d_out, replace=False, p=w / w.sum())
    cols = sorted(int(c) for c in chosen) + [target]
    return table.take_columns(cols, target=len(cols) - 1)


def nn_holdout_score(x: np.ndarray, y: np.ndarray, kind: str,
                     rng: np.random.Generator, holdout: float = 0.3) -> float:
    """Difficulty proxy: 1-nearest-neighbour holdout accuracy (categorical
    target) or R^2 (numeric).  Features are z-scored before distances."""
    m = x.shape[0]
    if m < 4:
        raise ValueError("too few rows for a holdout score")
    mu = np.nanmean(x, axis=0)
    sd = np.nanstd(x, axis=0)
    sd[sd == 0] = 1.0
    xz = (x - mu) / sd
    xz = np.nan_to_num(xz)
    perm = rng.permutation(m)
    n_test = max(1, int(round(holdout * m)))
    test, train = perm[:n_test], perm[n_test:]
    d2 = ((xz[test][:, None, :] - xz[train][None, :, :]) ** 2).sum(axis=2)
    nearest = train[np.argmin(d2, axis=1)]
    pred = y[nearest]
    truth = y[test]
    if kind == CATEGORICAL:
        return float(np.mean(pred == truth))
    sse = float(((truth - pred) ** 2).sum())
    sst = float(((truth - truth.mean()) ** 2).sum())
    if sst == 0:
        return 0.0
    return 1.0 - sse / sst


def assign_terciles(scores: np.ndarray) -> np.ndarray:
    """Bucket scores into 0=high, 1=moderate, 2=low by tercile edges."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size < 3:
        raise ValueError("terciles need at least 3 candidate scores")
    q1, q2 = np.quantile(scores, [1.0 / 3.0, 2.0 / 3.0])
    out = np.full(scores.size, 1, dtype=np.int64)
    out[scores <= q1] = 2
    out[scores > q2] = 0
    return out


def sample_bucket_probs(cfg: ForgeConfig, rng: np.random.Generator) -> np.ndarray:
    """Draw the (high, moderate, low) bucket probabilities: independent
    Gaussians around the configured means, clipped to [0, 1], normalized."""
    p = rng.normal(np.asarray(cfg.bucket_means), cfg.bucket_std)
    p = np.clip(p, 0.0, 1.0)
    if p.sum() == 0:
        p = np.ones(3)
    return p / p.sum()


def subsample_difficulty_biased(graph: Graph, table: Table, d_out: int,
                                cfg: ForgeConfig, rng: np.random.Generator) -> Table:
    """Score candidate (features, target) cuts with the 1-NN proxy, bucket
    them into terciles, then draw a bucket from sampled categorical weights."""
    if cfg.n_candidates < 3:
        raise ValueError("terciles need at least 3 candidates")
    rows = min(cfg.difficulty_rows, table.m)
    cands = []
    scores = []
    for _ in range(cfg.n_candidates):
        target = int(rng.integers(graph.n))
        rest = [i for i in range(graph.n) if i != target]
        take = min(d_out, len(rest))
        feats = sorted(int(i) for i in rng.choice(rest, size=take, replace=False))
        x = table.values[:rows][:, feats]
        y = table.values[:rows][:, target]
        kind = table.columns[target].kind
        scores.append(nn_holdout_score(x, y, kind, rng))
        cands.append((feats, target))
    buckets = assign_terciles(np.asarray(scores))
    probs = sample_bucket_probs(cfg, rng)
    present = np.unique(buckets)
    # renormalize over buckets that actually have candidates
    mask = np.isin(np.arange(3), present)
    probs = np.where(mask, probs, 0.0)
    if probs.sum() == 0:
        probs = mask / mask.sum()
    else:
        probs = probs / probs.sum()
    bucket = rng.choice(3, p=probs)
    pool = [i for i, b in enumerate(buckets) if b == bucket]
    feats, target = cands[int(rng.choice(pool))]
    cols = feats + [target]
    return table.take_columns(cols, target=len(cols) - 1)


# ---------------------------------------------------------------------------
# task adaptation


def _balanced_value_bins(values: np.ndarray, n_bins: int) -> np.ndarray:
    """Class labels from a contiguous partition of the sorted distinct values,
    cut as close to equal frequency as possible; every bin is non-empty
    whenever there are at least ``n_bins`` distinct values."""
    uniq, counts = np.unique(values, return_counts=True)
    u = len(uniq)
    n_bins = min(n_bins, u)
    cum = np.cumsum(counts)
    total = cum[-1]
    bin_of_uniq = np.empty(u, dtype=np.int64)
    start = 0
    for g in range(n_bins):
        hi = u - 1 - (n_bins - g - 1)
        seg = cum[start:hi + 1]
        target = (g + 1) * total / n_bins
        end = start + int(np.argmin(np.abs(seg - target)))
        bin_of_uniq[start:end + 1] = g
        start = end + 1
    code = {v: b for v, b in zip(uniq, bin_of_uniq)}
    return np.array([code[v] for v in values], dtype=np.int64)


def _dense_ranks(values: np.ndarray) -> np.ndarray:
    """Map each value to the index of its distinct value in sorted order."""
    uniq = np.unique(values)
    return np.searchsorted(uniq, values).astype(np.float64)


def adapt_task(table: Table, task: TaskSpec, rng: np.random.Generator,
               cfg: ForgeConfig | None = None) -> Table:
    """Shape the designated target column for the requested task.

    Classification quantile-bins the target into ``C`` classes.  Regression
    rejects discrete targets outright and rank-transforms clustered ones
    (fewer than 10 distinct values, or one value holding the majority).
    """
    if table.target is None:
        raise ValueError("table has no designated target")
    j = table.target
    col = table.values[:, j]
    obs = ~table.missing[:, j]
    if not obs.any():
        raise TaskRejected("target column entirely missing")
    vals = col[obs]
    distinct = np.unique(vals)
    if distinct.size < 2:
        raise TaskRejected("constant target column")
    out = table.copy()
    if task.kind == "cls":
        if table.columns[j].kind == CATEGORICAL:
            labels = col.copy()
            vocab = table.columns[j].vocab
        else:
            if task.n_classes is not None:
                n_classes = task.n_classes
            else:
                lo, hi = (cfg or ForgeConfig()).class_count_range
                n_classes = int(rng.integers(lo, hi + 1))
            binned = _balanced_value_bins(vals, n_classes)
            labels = np.full(table.m, np.nan)
            labels[obs] = binned
            vocab = tuple(f"c{i}" for i in range(int(binned.max()) + 1))
        out.columns[j] = Column(table.columns[j].name, CATEGORICAL, vocab)
        out.values[:, j] = labels
        out.values[out.missing[:, j], j] = np.nan
        return out
    if task.kind == "reg":
        if table.columns[j].kind == CATEGORICAL:
            raise TaskRejected("discrete target cannot be regressed")
        top_freq = np.max(np.unique(vals, return_counts=True)[1]) / vals.size
        if distinct.size < 10 or top_freq > 0.5:
            ranked = np.full(table.m, np.nan)
            ranked[obs] = _dense_ranks(vals)
            out.values[:, j] = ranked
        return out
    raise ValueError(f"unknown task kind {task.kind!r}")


# ---------------------------------------------------------------------------
# end-to-end dataset draw


def sample_dataset(cfg: ForgeConfig, rng: np.random.Generator,
                   task: TaskSpec | None = None) -> tuple[Table, dict]:
    """Draw one adapted dataset; retries on degenerate draws up to the budget.

    Returns the table plus a metadata dict (graph size, strategy, retries...).
    """
    cfg.validate()
    failures = 0
    while True:
        try:
            graph = build_dag(cfg, rng)
            full = propagate(graph, cfg.rows, rng)
            d_out = int(rng.integers(cfg.feature_range[0], cfg.feature_range[1] + 1))
            d_out = min(d_out, graph.n - 1)
            if d_out < 1:
                raise TaskRejected("graph has a single node")
            if rng.random() < cfg.subsample_graph_prob:
                strategy = "graph"
                cut = subsample_graph_biased(graph, full, d_out, rng)
            else:
                strategy = "difficulty"
                cut = subsample_difficulty_biased(graph, full, d_out, cfg, rng)
            if task is None:
                kind = "cls" if rng.random() < cfg.classification_prob else "reg"
                drawn = TaskSpec(kind)
            else:
                drawn = task
            adapted = adapt_task(cut, drawn, rng, cfg)
            meta = {
                "task": drawn.kind,
                "strategy": strategy,
                "n_nodes": graph.n,
                "n_edges": len(graph.edge_list()),
                "rows": adapted.m,
                "features": adapted.d - 1,
                "retries": failures,
            }
            if drawn.kind == "cls":
                meta["classes"] = len(adapted.columns[adapted.target].vocab)
            return adapted, meta
        except (NonFiniteError, TaskRejected) as exc:
            failures += 1
            if failures > cfg.retry_budget:
                raise ForgeError(
                    f"gave up after {failures} failed draws (last: {exc})") from exc
