import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from tabldm import scm
from tabldm.scm import (
    ACTIVATIONS, AggSpec, EdgeFn, ForgeConfig, ForgeError, TaskRejected,
    TaskSpec, adapt_task, assign_terciles, build_dag, d_separated_marginally,
    nn_holdout_score, propagate, sample_bucket_probs, sample_dataset,
    skeleton_distances, subsample_graph_biased,
)
from tabldm.tabular import CATEGORICAL, NUMERIC, Column, Table


def test_activation_conventions():
    assert ACTIVATIONS["heaviside"](np.array([0.0]))[0] == 1.0
    assert ACTIVATIONS["heaviside"](np.array([-0.5]))[0] == 0.0
    assert_allclose(ACTIVATIONS["log"](np.array([-3.0])), [-np.log(4.0)])
    assert_allclose(ACTIVATIONS["log"](np.array([3.0])), [np.log(4.0)])
    x = np.array([7.0, -1.0])
    got = ACTIVATIONS["modulo"](x)
    assert np.all((got >= 0) & (got < 2 * np.pi))
    assert_allclose(got[0], 7.0 - 2 * np.pi)
    assert len(ACTIVATIONS) == 10


def test_tree_edge_is_piecewise_constant():
    edge = EdgeFn("tree", {"depth": 1, "thresholds": np.array([0.0]),
                           "leaves": np.array([-5.0, 5.0])})
    got = edge.apply(np.array([-2.0, -0.001, 0.0, 0.001, 3.0]))
    assert_array_equal(got, [-5.0, -5.0, -5.0, 5.0, 5.0])


def test_conv_edge_identity_kernel():
    edge = EdgeFn("conv", {"kernel": np.array([0.0, 1.0, 0.0]), "act": "identity"})
    x = np.arange(6, dtype=float)
    assert_array_equal(edge.apply(x), x)


def test_single_unit_two_parents_shape():
    cfg = ForgeConfig(units_range=(1, 1), parents_range=(2, 2))
    g = build_dag(cfg, np.random.default_rng(0))
    assert g.n == 3
    assert len(g.edge_list()) == 2
    assert sorted(g.roots()) == [0, 1]
    assert g.nodes[2].parents == [0, 1]


def test_chain_attachment_builds_path():
    for L in (1, 2, 5):
        cfg = ForgeConfig(units_range=(L, L), parents_range=(1, 1),
                          attach_mode="chain")
        g = build_dag(cfg, np.random.default_rng(1))
        assert g.n == L + 1
        assert g.edge_list() == [(i, i + 1) for i in range(L)]
        assert g.roots() == [0]


def test_parents_always_precede_children():
    for seed in range(30):
        g = build_dag(ForgeConfig(), np.random.default_rng(seed))
        for node in g.nodes:
            assert all(p < node.index for p in node.parents)


def test_propagation_deterministic_and_roots_noise_free():
    cfg = ForgeConfig(units_range=(2, 2), parents_range=(1, 2),
                      root_family_weights=(0.0, 1.0, 0.0, 0.0))
    g = build_dag(cfg, np.random.default_rng(2))
    t1 = propagate(g, 4000, np.random.default_rng(7))
    t2 = propagate(g, 4000, np.random.default_rng(7))
    assert_array_equal(t1.values, t2.values)
    for r in g.roots():
        col = t1.values[:, r]
        assert np.all((col >= -1.0) & (col <= 1.0))  # noise would spill out


def test_child_noise_scale_tracks_pre_noise_spread():
    cfg = ForgeConfig(units_range=(1, 1), parents_range=(1, 1),
                      root_family_weights=(1.0, 0.0, 0.0, 0.0),
                      noise_coeff_range=(0.25, 0.3))
    g = build_dag(cfg, np.random.default_rng(3))
    child = g.nodes[1]
    table = propagate(g, 40000, np.random.default_rng(11))
    parent_col = table.values[:, 0]
    pre = child.agg.apply(np.column_stack([child.edges[0].apply(parent_col)]))
    resid = table.values[:, 1] - pre
    expected = child.noise_coeff * pre.std()
    if expected > 1e-9:
        assert abs(resid.std() / expected - 1.0) < 0.1
    assert abs(resid.mean()) < 5 * expected / np.sqrt(40000) + 1e-12


def test_zipf_roots_have_decreasing_frequencies():
    cfg = ForgeConfig(units_range=(1, 1), parents_range=(1, 1),
                      root_family_weights=(0.0, 0.0, 1.0, 0.0))
    g = build_dag(cfg, np.random.default_rng(4))
    root = g.nodes[0]
    levels = len(root.root.params["weights"])
    assert 2 <= levels <= 10
    table = propagate(g, 20000, np.random.default_rng(5))
    assert table.columns[0].kind == CATEGORICAL
    counts = np.bincount(table.values[:, 0].astype(int), minlength=levels)
    assert np.all(np.diff(counts) <= 0)


def test_skeleton_distances_on_path():
    cfg = ForgeConfig(units_range=(4, 4), parents_range=(1, 1), attach_mode="chain")
    g = build_dag(cfg, np.random.default_rng(6))
    assert_array_equal(skeleton_distances(g, 0), np.arange(5))
    assert_array_equal(skeleton_distances(g, 4), np.arange(5)[::-1])


def test_d_separation_marginal():
    cfg = ForgeConfig(units_range=(1, 1), parents_range=(2, 2))
    g = build_dag(cfg, np.random.default_rng(8))
    # two roots with a common child: the child is a collider, so the roots
    # are marginally independent
    assert d_separated_marginally(g, 0, 1)
    assert not d_separated_marginally(g, 0, 2)
    chain = build_dag(ForgeConfig(units_range=(2, 2), parents_range=(1, 1),
                                  attach_mode="chain"), np.random.default_rng(9))
    assert not d_separated_marginally(chain, 0, 2)


def test_graph_biased_subsample_prefers_near_nodes():
    cfg = ForgeConfig(units_range=(3, 3), parents_range=(1, 1), attach_mode="chain")
    g = build_dag(cfg, np.random.default_rng(10))  # path 0-1-2-3
    table = propagate(g, 64, np.random.default_rng(10))
    rng = np.random.default_rng(12)
    counts = {0: 0, 1: 0, 2: 0}
    n = 4000
    hits = 0
    for _ in range(n):
        sub = subsample_graph_biased(g, table, 1, rng)
        # identify target and feature by column names
        target_name = sub.columns[sub.target].name
        feat_name = sub.columns[0].name
        if target_name == "x3":
            counts[int(feat_name[1:])] += 1
            hits += 1
    # for target x3 the weights over (x0, x1, x2) are 2^-3, 2^-2, 2^-1
    w = np.array([1 / 8, 1 / 4, 1 / 2])
    w = w / w.sum()
    got = np.array([counts[0], counts[1], counts[2]]) / hits
    assert np.max(np.abs(got - w)) < 0.05


def test_nn_score_separates_easy_from_hopeless():
    rng = np.random.default_rng(13)
    y = rng.normal(size=400)
    x_easy = np.column_stack([y, rng.normal(size=400)])
    x_junk = rng.normal(size=(400, 2))
    easy = nn_holdout_score(x_easy, y, NUMERIC, np.random.default_rng(0))
    junk = nn_holdout_score(x_junk, y, NUMERIC, np.random.default_rng(0))
    assert easy > 0.9
    assert junk < 0.3
    yc = (y > 0).astype(float)
    easy_c = nn_holdout_score(np.column_stack([yc]), yc, CATEGORICAL,
                              np.random.default_rng(0))
    assert easy_c == 1.0


def test_terciles_and_bucket_probs():
    buckets = assign_terciles(np.array([0.1, 0.2, 0.3, 0.7, 0.8, 0.9, 0.4, 0.5, 0.6]))
    assert list(buckets[:3]) == [2, 2, 2]
    assert list(buckets[3:6]) == [0, 0, 0]
    assert list(buckets[6:]) == [1, 1, 1]
    with pytest.raises(ValueError):
        assign_terciles(np.array([1.0, 2.0]))
    rng = np.random.default_rng(14)
    draws = np.array([sample_bucket_probs(ForgeConfig(), rng) for _ in range(3000)])
    assert np.all(draws >= 0)
    assert_allclose(draws.sum(axis=1), 1.0, atol=1e-12)
    assert np.max(np.abs(draws.mean(axis=0) - np.array([0.4, 0.4, 0.2]))) < 0.02


def _plain_table(values, target=None, kinds=None):
    cols = []
    for j in range(values.shape[1]):
        kind = (kinds or {}).get(j, NUMERIC)
        if kind == CATEGORICAL:
            levels = int(np.nanmax(values[:, j])) + 1
            cols.append(Column(f"x{j}", CATEGORICAL, tuple(str(v) for v in range(levels))))
        else:
            cols.append(Column(f"x{j}", NUMERIC))
    return Table(cols, values, target=target)


class TestAdaptTask:
    def test_median_split(self):
        t = _plain_table(np.array([[0.0, 1.0], [0.0, 2.0], [0.0, 3.0], [0.0, 4.0]]),
                         target=1)
        out = adapt_task(t, TaskSpec("cls", n_classes=2), np.random.default_rng(0))
        assert_array_equal(out.values[:, 1], [0, 0, 1, 1])
        assert out.columns[1].kind == CATEGORICAL

    def test_exact_class_count_when_enough_distinct(self):
        rng = np.random.default_rng(15)
        for c in (2, 3, 4, 5):
            vals = np.column_stack([rng.normal(size=60), rng.normal(size=60)])
            t = _plain_table(vals, target=1)
            out = adapt_task(t, TaskSpec("cls", n_classes=c), rng)
            labels = out.values[:, 1].astype(int)
            assert len(np.unique(labels)) == c

    def test_heavily_tied_targets_keep_classes_nonempty(self):
        col = np.array([0.0] * 50 + [1.0] * 3 + [2.0] * 3)
        t = _plain_table(np.column_stack([np.zeros(56), col]), target=1)
        out = adapt_task(t, TaskSpec("cls", n_classes=3), np.random.default_rng(0))
        assert len(np.unique(out.values[:, 1].astype(int))) == 3

    def test_regression_rank_transform_on_clustered(self):
        col = np.array([0.0, 0.0, 0.0, 0.01, 100.0, 100.0])
        t = _plain_table(np.column_stack([np.zeros(6), col]), target=1)
        out = adapt_task(t, TaskSpec("reg"), np.random.default_rng(0))
        assert_array_equal(out.values[:, 1], [0, 0, 0, 1, 2, 2])

    def test_regression_keeps_spread_targets(self):
        rng = np.random.default_rng(16)
        col = rng.normal(size=40)
        t = _plain_table(np.column_stack([np.zeros(40), col]), target=1)
        out = adapt_task(t, TaskSpec("reg"), rng)
        assert_array_equal(out.values[:, 1], col)

    def test_constant_target_rejected(self):
        t = _plain_table(np.column_stack([np.zeros(6), np.ones(6)]), target=1)
        with pytest.raises(TaskRejected):
            adapt_task(t, TaskSpec("cls", n_classes=2), np.random.default_rng(0))

    def test_categorical_target_rejected_for_regression(self):
        vals = np.column_stack([np.zeros(6), np.array([0, 1, 0, 1, 0, 1.0])])
        t = _plain_table(vals, target=1, kinds={1: CATEGORICAL})
        with pytest.raises(TaskRejected):
            adapt_task(t, TaskSpec("reg"), np.random.default_rng(0))

    def test_missing_targets_stay_missing(self):
        col = np.array([1.0, 2.0, np.nan, 4.0, 5.0])
        t = _plain_table(np.column_stack([np.zeros(5), col]), target=1)
        out = adapt_task(t, TaskSpec("cls", n_classes=2), np.random.default_rng(0))
        assert out.missing[2, 1]
        assert np.isnan(out.values[2, 1])


def test_sample_dataset_end_to_end_and_deterministic():
    cfg = ForgeConfig()
    t1, meta1 = sample_dataset(cfg, np.random.default_rng(17))
    t2, _ = sample_dataset(cfg, np.random.default_rng(17))
    assert_array_equal(np.nan_to_num(t1.values), np.nan_to_num(t2.values))
    assert t1.target == t1.d - 1
    assert meta1["task"] in ("cls", "reg")
    assert meta1["strategy"] in ("graph", "difficulty")
    if meta1["task"] == "cls":
        assert t1.columns[t1.target].kind == CATEGORICAL
        assert meta1["classes"] >= 2
    assert meta1["features"] == t1.d - 1


def test_sample_dataset_cls_and_reg_explicit():
    cfg = ForgeConfig()
    cls_t, _ = sample_dataset(cfg, np.random.default_rng(18), TaskSpec("cls"))
    assert cls_t.columns[cls_t.target].kind == CATEGORICAL
    reg_t, _ = sample_dataset(cfg, np.random.default_rng(19), TaskSpec("reg"))
    assert reg_t.columns[reg_t.target].kind == NUMERIC


def test_retry_budget_exhaustion(monkeypatch):
    calls = {"n": 0}

    def always_overflow(graph, m, rng):
        calls["n"] += 1
        raise scm.NonFiniteError("boom")

    monkeypatch.setattr(scm, "propagate", always_overflow)
    with pytest.raises(ForgeError, match="9 failed"):
        sample_dataset(ForgeConfig(retry_budget=8), np.random.default_rng(20))
    assert calls["n"] == 9


def test_config_validation():
    with pytest.raises(ValueError):
        ForgeConfig(n_candidates=2).validate()
    with pytest.raises(ValueError):
        ForgeConfig(attach_mode="ring").validate()
