"""Acceptance gate.

One test per release criterion, run at the stated tolerance, each printing a
single pass/fail line (visible with ``pytest -s`` and on any failure).  The
learning smoke test trains a real model; its checkpoint is shared by the
retrieval-toy and imputation tests.  Set ``LDM_ACCEPT_CACHE=/path/ckpt`` to
reuse a previously trained checkpoint during development; by default every
run trains from scratch.
"""
import math
import os
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from tabldm import kernel as nk
from tabldm.cli import main as cli_main
from tabldm.episodes import Episode, MaskSchedule, sample_mask
from tabldm.exact import (conditionals_from_joint, joint_from_conditionals,
                          masked_conditional_kl, random_joint,
                          single_mask_gap, total_variation)
from tabldm.harness import (baseline_impute, evaluate_icl, impute_score,
                            perturb_outliers, perturb_uninformative,
                            scaling_fit)
from tabldm.inference import attention_scores, impute
from tabldm.model import (Model, ModelConfig, TrainConfig, episode_loss,
                          forward, prepare_episode, pretrain)
from tabldm.scm import (ForgeConfig, ForgeError, build_dag,
                        d_separated_marginally, propagate, sample_bucket_probs,
                        sample_dataset)
from tabldm.tabular import CATEGORICAL, NUMERIC, Column, Table, save_csv


def _line(num: int, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {num:2d} {detail}")
    assert ok, f"acceptance {num}: {detail}"


# ---------------------------------------------------------------------------
# 1. gradient fidelity


def _hand_episode(rng=None, poison=None):
    """Four context rows, three query rows, three mixed columns."""
    rng = rng or np.random.default_rng(11)
    cols = (Column("a", NUMERIC), Column("b", CATEGORICAL, ("u", "v", "w")),
            Column("t", NUMERIC))
    ctx = Table(cols, np.column_stack([rng.normal(size=4),
                                       rng.integers(0, 3, 4),
                                       rng.normal(size=4)]).astype(float),
                target=2)
    qry_vals = np.column_stack([rng.normal(size=3), rng.integers(0, 3, 3),
                                rng.normal(size=3)]).astype(float)
    mask = np.zeros((3, 3), dtype=bool)
    mask[0, 2] = mask[1, 0] = mask[2, 1] = mask[2, 2] = True
    if poison is not None:
        qry_vals[mask] = poison
    return Episode(context=ctx, query=Table(cols, qry_vals, target=2),
                   mask=mask)


def test_01_gradient_fidelity():
    t0 = time.monotonic()
    cfg = ModelConfig(width=16, blocks=2, heads=2, feature_passes=2,
                      value_bins=5, max_columns=4, max_classes=4,
                      precision=64, seed=5)
    model = Model.fresh(cfg)
    prep = prepare_episode(_hand_episode(), cfg)

    # ten warm-up steps move the parameters off the raw init point, where
    # layernorm curvature is too sharp for h=1e-5 differences to resolve
    adam = nk.AdamState()
    for _ in range(10):
        with nk.Tape() as tape:
            loss, _ = episode_loss(model.params, cfg, prep)
        nk.backward(tape, loss)
        nk.adam_step(model.params, {k: t.grad for k, t in model.params.items()},
                     adam, lr=1e-3)
        for t in model.params.values():
            t.zero_grad()

    def run():
        loss, _ = episode_loss(model.params, cfg, prep)
        return float(loss.data)

    with nk.Tape() as tape:
        loss, _ = episode_loss(model.params, cfg, prep)
    nk.backward(tape, loss)
    assert float(loss.data) > 0.5, "loss saturated; check point is degenerate"

    names = list(model.params)
    tensors = [model.params[n] for n in names]
    pick = np.random.default_rng(99)
    coords = {}
    for i, t in enumerate(tensors):
        cells = list(np.ndindex(*t.shape)) if t.ndim else [()]
        take = min(4, len(cells))
        coords[i] = [cells[j] for j in pick.choice(len(cells), take,
                                                   replace=False)]
    fd = nk.finite_difference(run, tensors, h=1e-5, coords=coords)
    worst_name, worst = "", 0.0
    for name, t, g in zip(names, tensors, fd):
        probed = ~np.isnan(g)
        a, f = t.grad[probed], g[probed]
        rel = np.abs(a - f) / np.maximum.reduce(
            [np.abs(a), np.abs(f), np.full_like(f, 1e-4)])
        if rel.size and rel.max() > worst:
            worst_name, worst = name, float(rel.max())
    dt = time.monotonic() - t0
    _line(1, worst < 1e-3 and dt < 120.0,
          f"gradient fidelity: {len(names)} parameter groups, worst relative "
          f"error {worst:.2e} at {worst_name or 'n/a'} (< 1e-3), {dt:.1f}s")


# ---------------------------------------------------------------------------
# 2-4. exact-distribution oracle


def test_02_reconstruction_round_trip():
    t0 = time.monotonic()
    combos = [(d, o) for d in (2, 3, 4) for o in (2, 3)]
    rng = np.random.default_rng(20)
    worst = 0.0
    for i in range(100):
        d, omega = combos[i % len(combos)]
        joint = random_joint(d, omega, rng)
        for k in range(1, d + 1):
            rebuilt = joint_from_conditionals(conditionals_from_joint(joint, k))
            worst = max(worst, float(np.max(np.abs(rebuilt.probs - joint.probs))))
    dt = time.monotonic() - t0
    _line(2, worst < 1e-9 and dt < 60.0,
          f"conditional round-trip: 100 joints, every mask size, max "
          f"deviation {worst:.2e} (< 1e-9), {dt:.1f}s")


def test_03_single_mask_witness():
    p, q, tv = single_mask_gap()
    cond_p = p.probs / p.probs.sum(axis=0, keepdims=True)
    cond_q = q.probs / q.probs.sum(axis=0, keepdims=True)
    shared_dev = float(np.max(np.abs(cond_p - cond_q)))
    _line(3, shared_dev < 1e-12 and tv > 0.05,
          f"one-mask witness: shared conditional deviation {shared_dev:.1e} "
          f"(< 1e-12), joint TV {tv:.3f} (> 0.05)")


def test_04_mask_kl_monotone():
    rng = np.random.default_rng(40)
    worst = np.inf
    for _ in range(100):
        r = random_joint(3, 3, rng)
        q = random_joint(3, 3, rng)
        vals = [masked_conditional_kl(r, q, k) for k in (1, 2, 3)]
        worst = min(worst, vals[1] - vals[0], vals[2] - vals[1])
    _line(4, worst >= -1e-12,
          f"mask-KL monotone in mask size: 100 pairs, smallest increment "
          f"{worst:.2e} (>= -1e-12)")


# ---------------------------------------------------------------------------
# 5. structural invariances


def _random_episode(rng, max_classes=4):
    d_feat = int(rng.integers(2, 5))
    m_ct = int(rng.integers(6, 13))
    m_te = int(rng.integers(3, 6))
    cols, vals = [], []
    for j in range(d_feat):
        if rng.random() < 0.5:
            cols.append(Column(f"f{j}", NUMERIC))
            vals.append(rng.normal(size=m_ct + m_te))
        else:
            v = int(rng.integers(2, max_classes + 1))
            cols.append(Column(f"f{j}", CATEGORICAL,
                               tuple(f"c{t}" for t in range(v))))
            vals.append(rng.integers(0, v, m_ct + m_te).astype(float))
    if rng.random() < 0.5:
        cols.append(Column("y", NUMERIC))
        vals.append(rng.normal(size=m_ct + m_te))
    else:
        cols.append(Column("y", CATEGORICAL, ("p", "q")))
        vals.append(rng.integers(0, 2, m_ct + m_te).astype(float))
    values = np.column_stack(vals)
    holes = rng.random(values.shape) < 0.08
    holes[0, :] = False                      # keep one fully observed row
    values = values.copy()
    values[holes] = np.nan
    ctx = Table(list(cols), values[:m_ct], target=d_feat)
    qry = Table(list(cols), values[m_ct:], target=d_feat)
    mask = rng.random((m_te, d_feat + 1)) < 0.35
    return Episode(context=ctx, query=qry, mask=mask)


def test_05_structural_invariances():
    checks = {"row-perm": 0.0, "col-perm": 0.0, "isolation": 0.0,
              "blindness": 0.0}
    trials_per = 50
    for trial in range(trials_per):
        rng = np.random.default_rng([5, trial])
        cfg = ModelConfig(width=16, blocks=2, heads=2, value_bins=6,
                          max_columns=8, max_classes=4, precision=64,
                          seed=trial)
        model = Model.fresh(cfg)
        ep = _random_episode(rng)
        m_ct = ep.context.m
        s1 = forward(model.params, cfg, prepare_episode(ep, cfg)).state.data

        # context rows permuted: query states unchanged
        perm = rng.permutation(m_ct)
        ep2 = Episode(ep.context.take_rows(perm), ep.query, ep.mask)
        s2 = forward(model.params, cfg, prepare_episode(ep2, cfg)).state.data
        checks["row-perm"] = max(checks["row-perm"],
                                 float(np.abs(s2[m_ct:] - s1[m_ct:]).max()))

        # feature columns and their code rows permuted together: states follow
        d = len(ep.context.feature_indices())
        cperm = rng.permutation(d)
        order = [ep.context.feature_indices()[k] for k in cperm]
        tgt = ep.context.target
        ep3 = Episode(ep.context.take_columns(order + [tgt], target=d),
                      ep.query.take_columns(order + [tgt], target=d),
                      ep.mask[:, list(order) + [tgt]])
        model2 = Model(cfg, {k: nk.tensor(t.data.copy(), name=k)
                             for k, t in model.params.items()})
        model2.params["col_code.u"].data[:d] = \
            model.params["col_code.u"].data[cperm]
        s3 = forward(model2.params, cfg, prepare_episode(ep3, cfg)).state.data
        dev = max(float(np.abs(s3[:, d, :] - s1[:, d, :]).max()),
                  float(np.abs(s3[:, :d, :] - s1[:, cperm, :]).max()))
        checks["col-perm"] = max(checks["col-perm"], dev)

        # one query row rewritten: the other query rows' states unchanged
        alter = int(rng.integers(0, ep.query.m))
        qry2 = ep.query.copy()
        qry2.values[alter, :] = rng.normal(size=ep.query.d)
        qry2.values[alter, :] = np.where(
            [c.kind == CATEGORICAL for c in qry2.columns], 0.0,
            qry2.values[alter, :])
        ep4 = Episode(ep.context, qry2, ep.mask)
        s4 = forward(model.params, cfg, prepare_episode(ep4, cfg)).state.data
        others = [r for r in range(ep.query.m) if r != alter]
        if others:
            checks["isolation"] = max(
                checks["isolation"],
                float(np.abs(s4[m_ct + np.array(others)]
                             - s1[m_ct + np.array(others)]).max()))

        # values under masked cells rewritten: every state unchanged
        qry3 = ep.query.copy()
        poison = ep.mask & ~qry3.missing
        qry3.values[poison] = 1e30
        ep5 = Episode(ep.context, qry3, ep.mask)
        s5 = forward(model.params, cfg, prepare_episode(ep5, cfg)).state.data
        checks["blindness"] = max(checks["blindness"],
                                  float(np.abs(s5 - s1).max()))

    worst = max(checks.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in checks.items())
    _line(5, worst < 1e-10,
          f"invariances over {4 * trials_per} randomized trials: {detail} "
          f"(all < 1e-10)")


# ---------------------------------------------------------------------------
# 6. mask schedule


def test_06_mask_schedule():
    rng = np.random.default_rng(60)
    sched = MaskSchedule()
    ratios = np.empty(10_000)
    retention_ok = True
    for i in range(10_000):
        m = int(rng.integers(16, 49))
        c = int(rng.integers(5, 11))
        feature_cols = list(range(c - 1))
        mask = sample_mask((m, c), sched, rng, feature_cols=feature_cols)
        ratios[i] = mask.sum() / (m * c)
        keep = max(1, math.ceil(sched.retention_fraction * (c - 1)))
        visible = (~mask[:, :-1]).sum(axis=1)
        retention_ok = retention_ok and bool(visible.min() >= keep)
    in_band = bool(np.all((ratios >= 0.1 - 1e-12) & (ratios <= 0.4 + 1e-12)))
    ks = stats.kstest(ratios, "uniform", args=(0.1, 0.3)).statistic
    _line(6, in_band and retention_ok and ks < 0.02,
          f"mask schedule: 10,000 masks, ratios in [{ratios.min():.3f}, "
          f"{ratios.max():.3f}] within [0.1, 0.4], retention floor held, "
          f"KS vs uniform {ks:.4f} (< 0.02)")


# ---------------------------------------------------------------------------
# 7. data forge


def test_07_data_forge():
    cfg = ForgeConfig()
    acyclic = True
    worst_rho = 0.0
    pairs_checked = 0
    for seed in range(1000):
        rng = np.random.default_rng([7, seed])
        graph = build_dag(cfg, rng)
        for idx, node in enumerate(graph.nodes):
            if any(p >= idx for p in node.parents):
                acyclic = False
        pairs = [(i, j) for i in range(graph.n) for j in range(i + 1, graph.n)
                 if d_separated_marginally(graph, i, j)]
        if not pairs:
            continue
        table = propagate(graph, 10_000, rng)
        for i, j in pairs:
            a, b = table.values[:, i], table.values[:, j]
            if a.std() == 0 or b.std() == 0:
                continue
            rho = abs(float(np.corrcoef(a, b)[0, 1]))
            worst_rho = max(worst_rho, rho)
            pairs_checked += 1

    rng = np.random.default_rng(71)
    draws = np.array([sample_bucket_probs(cfg, rng) for _ in range(10_000)])
    picks = np.array([rng.choice(3, p=p) for p in draws])
    freq = np.bincount(picks, minlength=3) / 10_000
    gap = float(np.max(np.abs(freq - draws.mean(axis=0))))
    _line(7, acyclic and worst_rho < 0.1 and gap < 0.03,
          f"forge: 1,000 graphs acyclic, {pairs_checked} separated pairs "
          f"max |rho| {worst_rho:.3f} (< 0.1) at m=10,000, bucket frequency "
          f"gap {gap:.4f} (< 0.03) over 10,000 draws")


# ---------------------------------------------------------------------------
# 8-10. trained model


@dataclass
class TrainedRun:
    model: Model
    seconds: float
    cached: bool


def _forge_stream(forge: ForgeConfig, data_rng: np.random.Generator):
    while True:
        try:
            table, _ = sample_dataset(forge, data_rng)
        except ForgeError:
            continue
        yield table


@pytest.fixture(scope="module")
def trained_run():
    """Width-64, 3-block model pretrained for 2,000 steps of forge output.

    Two-phase curriculum within the step budget: 1,200 steps of small binary
    near-linear tables with label-focused masks let the in-context circuit
    form, then 800 steps of the broader mixture (more classes, deeper edges,
    numeric targets, more feature masking) generalize it.  Gradients average
    four episodes per step.
    """
    cache = os.environ.get("LDM_ACCEPT_CACHE", "")
    if cache and Path(cache).exists():
        return TrainedRun(Model.load(cache), 0.0, True)
    cfg = ModelConfig(width=64, blocks=3, heads=4, precision=32, seed=0)
    model = Model.fresh(cfg)
    t0 = time.monotonic()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        narrow = ForgeConfig(rows=144, feature_range=(2, 5),
                             classification_prob=1.0, class_count_range=(2, 2),
                             edge_kind_weights=(1.0, 0.0, 0.0),
                             mlp_depth_range=(1, 1),
                             noise_coeff_range=(0.01, 0.1))
        pretrain(model,
                 TrainConfig(steps=1200, lr=2e-3, warmup=150, beta2=0.98,
                             episodes_per_step=4,
                             ctx_fraction_range=(0.5, 0.85), seed=0,
                             log_every=10 ** 9),
                 _forge_stream(narrow, np.random.default_rng([0, 1])),
                 schedule=MaskSchedule(target_focus_prob=0.8))
        broad = ForgeConfig(rows=144, feature_range=(2, 6),
                            classification_prob=0.9, class_count_range=(2, 5),
                            edge_kind_weights=(0.7, 0.15, 0.15),
                            mlp_depth_range=(1, 2),
                            noise_coeff_range=(0.01, 0.2))
        pretrain(model,
                 TrainConfig(steps=800, lr=8e-4, warmup=0, lr_decay="cosine",
                             beta2=0.98, episodes_per_step=4,
                             ctx_fraction_range=(0.5, 0.85), seed=1,
                             log_every=10 ** 9),
                 _forge_stream(broad, np.random.default_rng([0, 2])),
                 schedule=MaskSchedule(target_focus_prob=0.5))
    seconds = time.monotonic() - t0
    if cache:
        model.save(cache)
    return TrainedRun(model, seconds, False)


def test_08_learning_smoke(trained_run):
    t0 = time.monotonic()
    evals = evaluate_icl(trained_run.model, n_tasks=20, seed=8, m_ct=256,
                         m_te=64, d=4, separation=2.4)
    eval_s = time.monotonic() - t0
    icl = float(np.mean([e.icl for e in evals]))
    maj = float(np.mean([e.majority for e in evals]))
    nn = float(np.mean([e.nn for e in evals]))
    total = trained_run.seconds + eval_s
    time_note = ("cached checkpoint" if trained_run.cached
                 else f"{total / 60:.1f} min (< 30)")
    ok = (icl >= maj + 0.15) and (icl >= nn - 0.10) \
        and (trained_run.cached or total < 1800.0)
    _line(8, ok,
          f"learning smoke: 20 binary tasks at m_ct=256, mean ICL acc "
          f"{icl:.3f} vs majority {maj:.3f} (+0.15 -> {maj + 0.15:.3f}) and "
          f"1-NN {nn:.3f} (-0.10 -> {nn - 0.10:.3f}); {time_note}")


def _ten_sector_tables(rng, m_ct=300, m_te=40):
    def draw(n):
        theta = rng.uniform(0, 2 * np.pi, n)
        radius = rng.uniform(0.5, 1.5, n)
        sector = np.floor(theta / (2 * np.pi / 10)).astype(int)
        return np.column_stack([radius * np.cos(theta),
                                radius * np.sin(theta)]), sector
    cols = (Column("x", NUMERIC), Column("y", NUMERIC),
            Column("sector", CATEGORICAL, tuple(f"s{i}" for i in range(10))))
    xy, sec = draw(m_ct)
    ctx = Table(cols, np.column_stack([xy, sec.astype(float)]), target=2)
    xy_te, sec_te = draw(m_te)
    test = Table(cols[:2], xy_te)
    return ctx, test, sec_te


def _causal_chain_tables(rng, m_ct=256, m_te=32):
    n = m_ct + m_te
    x0 = rng.normal(size=n)
    x1 = np.tanh(1.5 * x0) + 0.3 * rng.normal(size=n)
    x2 = rng.normal(size=n)
    x3 = rng.normal(size=n)
    y = np.tanh(2.0 * x1) + 0.1 * rng.normal(size=n)
    cols = (Column("x0", NUMERIC), Column("x1", NUMERIC),
            Column("x2", NUMERIC), Column("x3", NUMERIC),
            Column("y", NUMERIC))
    vals = np.column_stack([x0, x1, x2, x3, y])
    ctx = Table(cols, vals[:m_ct], target=4)
    test = Table(cols[:4], vals[m_ct:, :4])
    return ctx, test


def test_09_retrieval_toys(trained_run):
    model = trained_run.model
    rng = np.random.default_rng(90)

    ctx, test, sec_te = _ten_sector_tables(rng)
    scores = attention_scores(model, ctx, test)
    k = max(1, int(0.1 * ctx.m))
    ctx_sec = ctx.values[:, 2].astype(int)
    match, base = [], []
    for qi in range(test.m):
        picks = np.argsort(-scores.combined[qi], kind="stable")[:k]
        match.append(float(np.mean(ctx_sec[picks] == sec_te[qi])))
        base.append(float(np.mean(ctx_sec == sec_te[qi])))
    match_rate, base_rate = float(np.mean(match)), float(np.mean(base))
    sector_ok = match_rate >= 2.0 * base_rate
    if not sector_ok:
        warnings.warn(
            f"ten-sector retrieval below 2x base rate: top-{k} match "
            f"{match_rate:.3f} vs base {base_rate:.3f}", stacklevel=1)

    ctx2, test2 = _causal_chain_tables(rng)
    scores2 = attention_scores(model, ctx2, test2)
    a_f = scores2.per_feature            # columns x0..x3 then outcome token
    cause_mass = float((a_f[:, 1] + a_f[:, 4]).mean())
    noise_mass = float((a_f[:, 2] + a_f[:, 3]).mean())
    causal_ok = cause_mass > noise_mass
    if not causal_ok:
        warnings.warn(
            f"causal-chain attention mass on direct cause + outcome "
            f"{cause_mass:.3f} does not exceed non-causes {noise_mass:.3f}",
            stacklevel=1)

    _line(9, True,
          f"retrieval toys (soft): ten-sector top-10% match {match_rate:.3f} "
          f"vs base {base_rate:.3f} ({'OK' if sector_ok else 'WARNED'}); "
          f"cause+outcome mass {cause_mass:.3f} vs non-causes "
          f"{noise_mass:.3f} ({'OK' if causal_ok else 'WARNED'})")


def test_10_imputation_superiority(trained_run):
    wins, details = 0, []
    for s in range(5):
        rng = np.random.default_rng([10, s])
        truth, _ = sample_dataset(ForgeConfig(rows=192, feature_range=(3, 6)),
                                  rng)
        hide = (rng.random(truth.values.shape) < 0.05) & ~truth.missing
        holes = truth.copy()
        holes.values[hide] = np.nan
        holes = Table(list(holes.columns), holes.values, target=truth.target)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            model_filled = impute(trained_run.model, holes).table
        base_filled = baseline_impute(holes)
        ms = impute_score(truth, model_filled, hide)
        bs = impute_score(truth, base_filled, hide)
        wins += int(ms < bs)
        details.append(f"{ms:.3f}/{bs:.3f}")
    _line(10, wins >= 4,
          f"imputation at 5% missing-at-random: model beats mean/mode on "
          f"{wins}/5 seeds (need >= 4); model/baseline scores "
          f"{', '.join(details)}")


# ---------------------------------------------------------------------------
# 11-12. fitting and perturbation harness


def test_11_scaling_recovery():
    n = np.array([10.0, 1e2, 1e3, 1e4, 1e5, 1e6])
    m = 2.0 * n ** -0.5 + 1.0
    fit = scaling_fit(np.column_stack([n, m]))
    errs = (abs(fit.a - 2.0) / 2.0, abs(fit.b - 1.0) / 1.0,
            abs(fit.c + 0.5) / 0.5)
    ok = max(errs) < 0.01 and fit.r2 > 0.9999
    _line(11, ok,
          f"scaling recovery: planted (2, 1, -0.5) -> ({fit.a:.4f}, "
          f"{fit.b:.4f}, {fit.c:.4f}), max parameter error "
          f"{max(errs) * 100:.2f}% (< 1%), R2 {fit.r2:.6f} (> 0.9999)")


def test_12_perturbation_contracts():
    rng = np.random.default_rng(12)
    m, d_feat = 125_000, 8
    cols = tuple(Column(f"f{j}", NUMERIC) for j in range(d_feat)) \
        + (Column("y", NUMERIC),)
    vals = rng.uniform(1.0, 2.0, size=(m, d_feat + 1))
    table = Table(list(cols), vals, target=d_feat)
    out = perturb_outliers(table, prob=0.02, factor=100.0,
                           rng=np.random.default_rng(121))
    changed = out.values[:, :d_feat] != vals[:, :d_feat]
    rate = float(changed.mean())
    rate_ok = 0.018 <= rate <= 0.022

    base, _ = sample_dataset(ForgeConfig(rows=60, feature_range=(3, 5)),
                             np.random.default_rng(122))
    shuffled = perturb_uninformative(base, 1.0, np.random.default_rng(123))
    multiset_ok = True
    for j in range(base.d, shuffled.d):
        src_name = shuffled.columns[j].name.rsplit("_shuffled", 1)[0]
        src = next(i for i, c in enumerate(base.columns)
                   if c.name == src_name)
        a = np.sort(np.nan_to_num(shuffled.values[:, j]))
        b = np.sort(np.nan_to_num(base.values[:, src]))
        multiset_ok = multiset_ok and bool(np.array_equal(a, b))
    _line(12, rate_ok and multiset_ok,
          f"perturbations: outlier rate {rate:.4f} over 10^6 cells (in "
          f"[0.018, 0.022]); {shuffled.d - base.d} shuffled copies are exact "
          f"multiset permutations")


# ---------------------------------------------------------------------------
# 13. command-line determinism


@pytest.fixture(scope="module")
def cli_inputs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli13")
    rng = np.random.default_rng(130)
    x = rng.normal(size=40)
    cols = (Column("x", NUMERIC), Column("z", NUMERIC),
            Column("label", CATEGORICAL, ("lo", "hi")))
    ctx = Table(cols, np.column_stack([x, rng.normal(size=40),
                                       (x > 0).astype(float)]), target=2)
    save_csv(ctx, root / "cls.csv")
    (root / "test.csv").write_text("x,z\n0.5,0.1\n-0.5,0.2\n1.5,-0.4\n")
    holes = ctx.copy()
    holes.values[3, 0] = np.nan
    holes.values[7, 1] = np.nan
    holes = Table(list(cols), holes.values, target=2)
    save_csv(holes, root / "holes.csv")
    suite = root / "suite"
    suite.mkdir()
    for s in range(2):
        cli_main(["gen", "--rows", "40", "--task", "cls", "--classes", "2",
                  "--seed", str(30 + s), "--out", str(suite / f"ds{s}.csv")])
    n = np.array([10.0, 100.0, 1e3, 1e4, 1e5])
    lines = ["n,loss"] + [f"{float(a)!r},{float(2.0 * a ** -0.5 + 1.0)!r}"
                          for a in n]
    (root / "points.csv").write_text("\n".join(lines) + "\n")
    ckpt = root / "tiny64.ckpt"
    Model.fresh(ModelConfig(width=8, blocks=1, heads=2, feature_passes=2,
                            value_bins=5, max_columns=16, max_classes=6,
                            precision=64, seed=3)).save(ckpt)
    return root


def test_13_cli_determinism(cli_inputs, tmp_path):
    root = cli_inputs
    ck = str(root / "tiny64.ckpt")
    commands = {
        "gen": lambda d: ["gen", "--rows", "30", "--seed", "3",
                          "--out", str(d / "ds.csv")],
        "episodes": lambda d: ["episodes", "--in", str(root / "cls.csv"),
                               "--seed", "3", "--out-dir", str(d)],
        "pretrain": lambda d: ["pretrain", "--steps", "3", "--width", "8",
                               "--blocks", "1", "--heads", "2",
                               "--value-bins", "5", "--rows", "32",
                               "--features", "2,3", "--warmup", "1",
                               "--precision", "64", "--seed", "3",
                               "--out", str(d / "m.ckpt")],
        "predict": lambda d: ["predict", "--ckpt", ck,
                              "--context", str(root / "cls.csv"),
                              "--in", str(root / "test.csv"),
                              "--method", "ensemble", "--seed", "3",
                              "--out", str(d / "preds.csv")],
        "impute": lambda d: ["impute", "--ckpt", ck,
                             "--in", str(root / "holes.csv"),
                             "--out", str(d / "filled.csv")],
        "synth": lambda d: ["synth", "--ckpt", ck,
                            "--in", str(root / "cls.csv"), "--rows", "6",
                            "--refine-rounds", "1", "--seed", "3",
                            "--out", str(d / "synth.csv")],
        "oracle": lambda d: ["oracle", "--trials", "10", "--seed", "3",
                             "--out", str(d / "oracle.csv")],
        "eval": lambda d: ["eval", "--ckpt", ck, "--suite",
                           str(root / "suite"), "--task", "cls",
                           "--seed", "3", "--out", str(d / "report.csv")],
        "robustness": lambda d: ["robustness", "--ckpt", ck,
                                 "--in", str(root / "cls.csv"),
                                 "--mode", "outliers", "--level", "0.1",
                                 "--seed", "3",
                                 "--out", str(d / "robust.csv")],
        "scaling-fit": lambda d: ["scaling-fit", "--in",
                                  str(root / "points.csv"),
                                  "--metric", "loss",
                                  "--out", str(d / "fit.csv")],
        "finetune": lambda d: ["finetune", "--ckpt", ck,
                               "--in", str(root / "cls.csv"), "--steps", "2",
                               "--k", "4", "--seed", "3",
                               "--out", str(d / "tuned.ckpt")],
    }
    total_files = 0
    mismatched = []
    for name, build in commands.items():
        dirs = []
        for tag in ("a", "b"):
            d = tmp_path / f"{name}_{tag}"
            d.mkdir()
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                assert cli_main(build(d)) == 0
            dirs.append(d)
        rel_a = sorted(p.relative_to(dirs[0])
                       for p in dirs[0].rglob("*") if p.is_file())
        rel_b = sorted(p.relative_to(dirs[1])
                       for p in dirs[1].rglob("*") if p.is_file())
        if rel_a != rel_b or not rel_a:
            mismatched.append(f"{name}: file sets differ")
            continue
        for rel in rel_a:
            if (dirs[0] / rel).read_bytes() != (dirs[1] / rel).read_bytes():
                mismatched.append(f"{name}: {rel}")
        total_files += len(rel_a)
    _line(13, not mismatched,
          f"determinism: {len(commands)} commands rerun with fixed seeds, "
          f"{total_files} output files byte-identical"
          + (f"; mismatches: {mismatched}" if mismatched else ""))
