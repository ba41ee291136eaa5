"""Acceptance suite: one PASS/FAIL line per criterion, echoed in the terminal summary.

Tolerances and protocols are fixed here; a criterion that is not met
fails its test rather than being loosened.
"""

import time

import numpy as np
import pytest

from cascade_explain.attribution import (build_attribution, cascade_contributions,
                                         cascade_mdi, last_layer_total_mdi, mda)
from cascade_explain.cascade import (CascadeConfig, default_layer, fit_cascade,
                                     paper_bench_config, paper_small_config,
                                     predict_cascade, split_features_used)
from cascade_explain.dataset import gen_linear, gen_sim, gen_sincos, gen_threeclass
from cascade_explain.evalbench import BenchmarkSpec, ranked_pair_score, run_benchmark
from cascade_explain.forest import bootstrap_counts
from cascade_explain.tree import TreeParams, grow_tree, tree_mdi_classic, tree_mdi_cov

from helpers import hand_dataset, hand_model, oracle, report

N_PROBES = 500
CALIBRATIONS = ("partial", "additive", "multiplicative")


@pytest.fixture(scope="module")
def c1_models():
    """The sincos (n=2000) and 3-class (n=200, 100 noise dims) models plus probes."""
    t0 = time.perf_counter()
    out = {}
    for name, d, probes in (
            ("sincos", gen_sincos(2000, seed=0), gen_sincos(N_PROBES, seed=1000)),
            ("threeclass", gen_threeclass(200, 100, seed=0),
             gen_threeclass(N_PROBES, 100, seed=1000))):
        out[name] = (d, fit_cascade(d, paper_small_config(seed=0)), probes)
    return out, time.perf_counter() - t0


def test_criterion_1_decomposition_identity(c1_models):
    models, fit_s = c1_models
    t0 = time.perf_counter()
    worst, n_layers = 0.0, 0
    for d, m, probes in models.values():
        for layer in range(1, m.n_layers + 1):
            rep = cascade_contributions(m, probes.features, layer)
            np.testing.assert_array_equal(rep.prediction,
                                          predict_cascade(m, probes.features, layer))
            worst = max(worst, rep.residual())
            n_layers += 1
    elapsed = fit_s + time.perf_counter() - t0
    ok = worst <= 1e-8 and elapsed < 120
    report(1, ok, f"max |pred - bias - sum f|/(1+|pred|) = {worst:.2e} (<= 1e-8) over "
                  f"{n_layers} layers x {N_PROBES} probes; {elapsed:.1f} s (< 120 s)")
    assert ok


def _leaf_sum_gap(m):
    """Largest |sum_k table[leaf] - (value[leaf] - value[root])| over layer >= 2 trees."""
    gap, n_nodes = 0.0, 0
    for L in m.layers[1:]:
        for F in L.forests:
            for t in F.trees:
                leaves = t.is_leaf
                diff = t.leaf_contrib.sum(axis=1) - (t.value[leaves] - t.value[0])
                gap = max(gap, float(np.abs(diff).max()))
                n_nodes += int((t.feature >= m.n_features).sum())
    return gap, n_nodes


def test_criterion_2_calibration_constraint(c1_models):
    models, _ = c1_models
    details, ok = [], True
    for method in CALIBRATIONS:
        worst, leaf_gap, n_nodes = 0.0, 0.0, 0
        for d, m, _ in models.values():
            mm = build_attribution(m, d, method)
            worst = max([worst] + mm.calibration_residual[1:])
            g, nn = _leaf_sum_gap(mm)
            leaf_gap, n_nodes = max(leaf_gap, g), n_nodes + nn
        ok &= worst <= 1e-12 and leaf_gap <= 1e-12 and n_nodes > 0
        details.append(f"{method} node {worst:.1e} / leaf {leaf_gap:.1e}")
    report(2, ok, f"calibrated nodes checked: {n_nodes}; " + ", ".join(details)
                  + " (<= 1e-12)")
    assert ok


def test_criterion_3_covariance_mdi_equals_classic():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for i in range(50):
        n, p = int(rng.integers(20, 300)), int(rng.integers(1, 8))
        X = rng.normal(size=(n, p))
        if i % 3 == 0:
            X = np.round(X, 1)
        if i % 2:
            Y = np.eye(3)[rng.integers(0, 3, n)]
        else:
            Y = (X[:, :1] ** 2 + rng.normal(size=(n, 1))) * rng.uniform(0.1, 10)
        params = TreeParams(max_depth=[None, 2, 5, 10][i % 4],
                            min_samples_leaf=int(rng.integers(1, 6)),
                            feature_mode=["all", "sqrt", 1][i % 3],
                            split_mode=["best", "random_threshold"][(i // 2) % 2],
                            seed_stream=i)
        w = bootstrap_counts(n, i, 0).astype(float) if i % 4 >= 2 else None
        t = grow_tree(X, Y, params, w)
        worst = max(worst, float(np.abs(tree_mdi_cov(t, X, Y, w) - tree_mdi_classic(t)).max()))
    ok = worst <= 1e-10
    report(3, ok, f"max |cov MDI - node-sum MDI| over 50 random trees = {worst:.2e} (<= 1e-10)")
    assert ok


def test_criterion_4_conservation(c1_models):
    models, _ = c1_models
    worst = 0.0
    for d, m, _ in models.values():
        tr = d.take(m.train_rows)
        for layer in range(1, m.n_layers + 1):
            deep = cascade_mdi(m, tr, layer).mdi.sum()
            total = last_layer_total_mdi(m, tr, layer)
            worst = max(worst, abs(deep - total) / abs(total))
    ok = worst <= 1e-8
    report(4, ok, f"max relative |sum deep MDI - mean forest MDI| = {worst:.2e} (<= 1e-8)")
    assert ok


def test_criterion_5_hand_oracle():
    o = oracle()
    d = hand_dataset()
    m = hand_model()
    rep = cascade_contributions(m, d.features)
    gaps = {
        "bias": abs(rep.bias[0] - o["bias"]),
        "contributions": np.abs(rep.contrib[:, :, 0] - o["contributions"]).max(),
        "prediction": np.abs(rep.prediction[:, 0] - o["prediction"]).max(),
        "mdi": np.abs(cascade_mdi(m, d).mdi - o["mdi"]).max(),
        "total": abs(last_layer_total_mdi(m, d) - 1.25),
    }
    ok = max(gaps.values()) <= 1e-12 and abs(o["mdi"].sum() - 1.25) == 0
    report(5, ok, "hand oracle max gaps " +
           ", ".join(f"{k} {v:.1e}" for k, v in gaps.items()) + " (<= 1e-12)")
    assert ok


@pytest.fixture(scope="module")
def sim_benchmark():
    spec = BenchmarkSpec(generator="sim", n_train=1000, n_valid=1000, n_runs=20, seed=0,
                         methods=("MDI_RF", "MDI_DF(partial)", "MDI_DF(multiplicative)"),
                         rf_trees=200, rf_max_depth=None, df_preset="paper-bench")
    t0 = time.perf_counter()
    res = run_benchmark(spec)
    return res, time.perf_counter() - t0


def test_criterion_6_sim_auc(sim_benchmark):
    res, elapsed = sim_benchmark
    df = res.values("MDI_DF(partial)")
    rf = res.values("MDI_RF")
    ok = (df.size == 20 and rf.size == 20 and df.mean() >= 0.75
          and df.mean() - rf.mean() >= 0.3 and elapsed < 600)
    report(6, ok, f"sim AUC MDI(DF) {df.mean():.4f} (>= 0.75), MDI(RF) {rf.mean():.4f}, "
                  f"gap {df.mean() - rf.mean():.4f} (>= 0.3), {df.size} runs, "
                  f"{elapsed:.0f} s (< 600 s)")
    assert ok


def test_criterion_7_partial_vs_multiplicative(sim_benchmark):
    res, _ = sim_benchmark
    part = res.values("MDI_DF(partial)")
    mult = res.values("MDI_DF(multiplicative)")
    ok = part.size == 20 and mult.size == 20 and part.mean() >= mult.mean() - 0.02
    report(7, ok, f"sim AUC partial {part.mean():.4f} vs multiplicative {mult.mean():.4f} "
                  f"(partial >= multiplicative - 0.02)")
    assert ok


def test_criterion_8_linear_ranking():
    first, best = [], []
    for seed in range(10):
        d = gen_linear(1000, 10, seed=seed)
        m = fit_cascade(d, paper_small_config(seed=seed))
        tr = d.take(m.train_rows)
        first.append(ranked_pair_score(cascade_mdi(m, tr, 1).mdi))
        best.append(ranked_pair_score(cascade_mdi(m, tr).mdi))
    med1, medb = float(np.median(first)), float(np.median(best))
    ok = medb >= med1 and medb >= 0.9
    report(8, ok, f"linear K=10 median ranked-pair score: layer 1 {med1:.4f}, "
                  f"best layer {medb:.4f} (>= layer 1 and >= 0.9)")
    assert ok


def test_criterion_9_noise_suppression(c1_models):
    models, _ = c1_models
    hits, ratios = 0, []
    for seed in range(10):
        if seed == 0:
            d, m, _ = models["threeclass"]
        else:
            d = gen_threeclass(200, 100, seed=seed)
            m = fit_cascade(d, paper_small_config(seed=seed))
        imp = cascade_mdi(m, d.take(m.train_rows)).mdi
        noise = imp[~d.relevant_mask].mean()
        ratio = noise / max(imp[0], imp[1])
        ratios.append(ratio)
        hits += bool(ratio <= 0.05 and imp[0] > imp[1])
    ok = hits >= 8
    report(9, ok, f"{hits}/10 seeds with noise MDI <= 5% of max(X1, X2) and X1 > X2 "
                  f"(>= 8); worst noise ratio {max(ratios):.3f}")
    assert ok


def test_criterion_10_mdi_faster_than_mda():
    d = gen_sim(2000, seed=0)
    tr, va = d.take(np.arange(1000)), d.take(np.arange(1000, 2000))
    t0 = time.perf_counter()
    m = fit_cascade(tr, paper_bench_config(seed=0, attribution=False))
    train_s = time.perf_counter() - t0
    t0 = time.perf_counter()
    cascade_mdi(build_attribution(m, tr), tr.take(m.train_rows))
    mdi_s = time.perf_counter() - t0
    t0 = time.perf_counter()
    mda(lambda X: predict_cascade(m, X), va, n_repeats=5, seed=0)
    mda_s = time.perf_counter() - t0
    ok = train_s + mdi_s <= train_s + mda_s
    report(10, ok, f"train {train_s:.2f} s + MDI {mdi_s:.2f} s vs "
                   f"train + MDA(5 repeats) {mda_s:.2f} s")
    assert ok


def test_criterion_11_mda_zero_for_unused_features():
    # shallow forests leave most of the 100 noise features unsplit
    d = gen_threeclass(200, 100, seed=0)
    cfg = CascadeConfig(forests_per_layer=default_layer(n_trees=5, max_depth=2), seed=0)
    m = fit_cascade(d, cfg)
    unused = ~split_features_used(m)
    scores = mda(lambda X: predict_cascade(m, X), d, n_repeats=20, seed=3)
    ok = unused.sum() > 0 and np.all(scores[unused] == 0.0)
    report(11, ok, f"{int(unused.sum())} unsplit features, MDA over 20 repeats exactly 0 "
                   f"for {int((scores[unused] == 0.0).sum())} of them")
    assert ok
