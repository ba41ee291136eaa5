import itertools
import json

import numpy as np
import pytest

from cascade_explain.attribution import (CalibrationMethod, ContributionReport,
                                         build_attribution, calibrate, cascade_contributions,
                                         cascade_mdi, estimate_node_delta,
                                         last_layer_total_mdi, local_mdi, mda,
                                         tree_deep_contributions)
from cascade_explain.cascade import fit_cascade, paper_small_config, predict_cascade
from cascade_explain.dataset import CLASSIFICATION, REGRESSION, Dataset, gen_threeclass
from cascade_explain.errors import DataError, InvariantViolation
from cascade_explain.forest import forest_contributions, forest_mdi, predict_forest
from cascade_explain.tree import path_tables, predict_tree, tree_from_splits

from helpers import hand_dataset, hand_model, oracle

H = np.array([0.4, -0.2, 0.1])


# --- calibration -------------------------------------------------------------------

def test_partial_example():
    out = calibrate(H, [0.5], "partial")
    np.testing.assert_allclose(out, [0.56, -0.2, 0.14], rtol=0, atol=1e-15)
    assert out[1] == H[1]                         # outside S: untouched bit for bit
    assert abs(out.sum() - 0.5) <= 1e-12


def test_multiplicative_example():
    out = calibrate(H, [0.5], "multiplicative")
    np.testing.assert_allclose(out, [2 / 3, -1 / 3, 1 / 6], rtol=0, atol=1e-15)


def test_additive_example():
    out = calibrate(H, [0.5], "additive")
    np.testing.assert_allclose(out, [0.4 + 0.8 / 7, -0.2 + 0.4 / 7, 0.1 + 0.2 / 7],
                               rtol=0, atol=1e-15)


@pytest.mark.parametrize("method", ["partial", "additive", "multiplicative"])
def test_consistent_input_unchanged(method):
    h = np.array([0.25, -0.5, 0.75])
    np.testing.assert_array_equal(calibrate(h, [0.5], method), h)


@pytest.mark.parametrize("method", ["partial", "additive", "multiplicative"])
def test_zero_delta_zeroes_column(method):
    est = np.array([[0.3, 0.1], [0.2, -0.1]])
    out = calibrate(est, [0.0, 0.4], method)
    assert not out[:, 0].any()
    assert abs(out[:, 1].sum() - 0.4) <= 1e-12


def test_degenerate_fallbacks_spread_residual_evenly():
    # multiplicative: estimates cancel
    np.testing.assert_allclose(calibrate([0.2, -0.2], [0.4], "multiplicative"), [0.4, 0.0])
    # additive: all estimates zero
    np.testing.assert_allclose(calibrate([0.0, 0.0], [0.4], "additive"), [0.2, 0.2])
    # partial: no estimate shares the sign of the true change
    np.testing.assert_allclose(calibrate([-0.1, 0.0], [0.3], "partial"), [0.1, 0.2])


def test_partial_keeps_signs_in_S():
    rng = np.random.default_rng(0)
    for _ in range(200):
        h = rng.normal(size=6)
        d = rng.normal()
        out = calibrate(h, [d], "partial")
        S = (np.sign(h) == np.sign(d)) & (h != 0)
        if not S.any():
            continue                      # fallback case, tested separately
        np.testing.assert_array_equal(out[~S], h[~S])
        assert np.all(np.sign(out[S]) == np.sign(h[S]))
        assert abs(out.sum() - d) <= 1e-12


def test_method_names_and_epsilon():
    assert CalibrationMethod("partial_additive").canonical == "partial"
    with pytest.raises(DataError):
        CalibrationMethod("bogus")
    with pytest.raises(DataError):
        CalibrationMethod("partial", epsilon=0.0)
    np.testing.assert_array_equal(calibrate(H, [0.5], 2), calibrate(H, [0.5], "partial"))


# --- estimation ------------------------------------------------------------------

def test_estimate_hand_example():
    prev = np.zeros((4, 2, 1))
    prev[:, 0, 0] = [-1, -1, 1, 1]
    est = estimate_node_delta(prev, [0, 1], [0, 1, 2, 3])
    np.testing.assert_array_equal(est[:, 0], [-1.0, 0.0])


def test_estimate_degenerate_cases():
    prev = np.random.default_rng(1).normal(size=(5, 3, 2))
    assert not estimate_node_delta(prev, [1, 3], [1, 3]).any()
    assert not estimate_node_delta(np.zeros((5, 3, 2)), [0], [0, 1, 2]).any()
    with pytest.raises(DataError):
        estimate_node_delta(prev, [], [0, 1])


def test_estimate_sums_to_estimated_change():
    rng = np.random.default_rng(2)
    prev = rng.normal(size=(10, 4, 1))
    child, parent = [0, 2, 5], list(range(10))
    est = estimate_node_delta(prev, child, parent)
    preds = 1.7 + prev.sum(axis=1)            # mu0 cancels in the difference
    assert est.sum() == pytest.approx(preds[child].mean() - preds[parent].mean(), abs=1e-14)


# --- leaf tables -----------------------------------------------------------------

def test_hand_oracle_leaf_tables():
    o = oracle()
    m = hand_model()
    t2 = m.layers[1].forests[0].trees[0]
    leaf = t2.apply(np.column_stack([hand_dataset().features, [0.5, 0.5, 2.5, 2.5]]))
    got = t2.leaf_contrib[t2.leaf_slot[leaf]][:, :, 0]
    np.testing.assert_allclose(got, o["contributions"], rtol=0, atol=1e-12)


def test_only_original_splits_equal_path_tables():
    d = hand_dataset()
    X3 = np.column_stack([d.features, [0.5, 0.5, 2.5, 2.5]])
    t = tree_from_splits(X3, d.response, (1, 0.5, (0, 0.5, None, None), None))
    table, res = tree_deep_contributions(t, X3, None, [-1, -1, 0], 2)
    np.testing.assert_array_equal(table, path_tables(t)[t.is_leaf][:, :2])
    assert res == 0.0


def test_deep_contribution_schema_errors():
    d = hand_dataset()
    X3 = np.column_stack([d.features, [0.5, 0.5, 2.5, 2.5]])
    t = tree_from_splits(X3, d.response, (2, 1.5, None, None))
    with pytest.raises(DataError):
        tree_deep_contributions(t, X3, np.zeros((1, 4, 2, 1)), [-1, -1], 2)
    with pytest.raises(DataError):
        tree_deep_contributions(t, X3, np.zeros((1, 4, 2, 1)), [-1, 0, 0], 2)
    with pytest.raises(DataError, match="missing"):
        tree_deep_contributions(t, X3, np.zeros((1, 4, 2, 1)), [-1, -1, 3], 2)


# --- cascade-level queries -----------------------------------------------------------

def test_hand_oracle_contributions_and_mdi():
    o = oracle()
    m, d = hand_model(), hand_dataset()
    rep = cascade_contributions(m, d.features)
    assert rep.bias[0] == o["bias"]
    np.testing.assert_allclose(rep.contrib[:, :, 0], o["contributions"], atol=1e-12, rtol=0)
    np.testing.assert_allclose(rep.prediction[:, 0], o["prediction"], atol=1e-12, rtol=0)
    mdi = cascade_mdi(m, d).mdi
    np.testing.assert_allclose(mdi, o["mdi"], atol=1e-12, rtol=0)
    total = o["last_layer_mdi"]
    assert last_layer_total_mdi(m, d) == pytest.approx(sum(total.values()), abs=1e-12)
    np.testing.assert_allclose(cascade_mdi(m, d).normalized(d.total_variance()).mdi,
                               o["normalized_mdi"], atol=1e-12)


def test_single_point_report():
    rep = cascade_contributions(hand_model(), [0.0, 1.0])
    np.testing.assert_array_equal(rep.contrib[0, :, 0], [-1.0, 0.5])
    assert rep.prediction[0, 0] == 1.0


def test_layer_one_reduction(sincos_model):
    d, m = sincos_model
    rep = cascade_contributions(m, d.features, layer=1)
    forests = m.layers[0].forests
    avg = np.mean([forest_contributions(F, d.features)[1] for F in forests], axis=0)
    np.testing.assert_allclose(rep.contrib, avg, atol=1e-12)
    tr = d.take(m.train_rows)
    mdi = cascade_mdi(m, tr, layer=1).mdi
    expect = np.mean([forest_mdi(F, tr.features, tr.response) for F in forests], axis=0)
    np.testing.assert_allclose(mdi, expect, atol=1e-12)


def test_identity_every_layer(sincos_model, threeclass_model):
    for d, m in (sincos_model, threeclass_model):
        for layer in range(1, m.n_layers + 1):
            rep = cascade_contributions(m, d.features, layer)
            np.testing.assert_allclose(rep.prediction, predict_cascade(m, d.features, layer),
                                       rtol=0, atol=0)
            assert rep.check(1e-8) <= 1e-8


def test_calibration_residuals_recorded(sincos_model):
    _, m = sincos_model
    assert len(m.calibration_residual) == m.n_layers
    assert max(m.calibration_residual) <= 1e-12


@pytest.mark.parametrize("method", ["additive", "multiplicative"])
def test_recalibration(sincos_model, method):
    d, m = sincos_model
    r = build_attribution(m, d, method)
    assert r.calibration == method and max(r.calibration_residual) <= 1e-12
    rep = cascade_contributions(r, d.features)
    rep.check(1e-8)
    for L in r.layers:
        for F in L.forests:
            for t in F.trees:
                t.check()


def test_conservation(threeclass_model):
    d, m = threeclass_model
    tr = d.take(m.train_rows)
    lhs = cascade_mdi(m, tr).mdi.sum()
    rhs = last_layer_total_mdi(m, tr)
    assert abs(lhs - rhs) <= 1e-8 * abs(rhs)


def test_zero_labels_give_zero_mdi():
    m, d = hand_model(), hand_dataset()
    z = Dataset(d.features, np.zeros(4), REGRESSION, d.feature_names)
    assert not cascade_mdi(m, z).mdi.any()


def test_missing_tables_and_dimension_errors(sincos_model):
    d, m = sincos_model
    bare = fit_cascade(d, paper_small_config(seed=1, max_layers=1, attribution=False))
    with pytest.raises(DataError, match="leaf contribution tables"):
        cascade_contributions(bare, d.features)
    with pytest.raises(DataError):
        cascade_contributions(m, np.zeros((3, 5)))


def test_local_mdi_weighted_sum_matches_global(threeclass_model):
    d, m = threeclass_model
    rep = local_mdi(m, d)
    freq = d.response.mean(axis=0)
    np.testing.assert_allclose(freq @ rep.per_class, rep.mdi, atol=1e-8)
    assert rep.undefined_classes == []


def test_local_mdi_flags_empty_class(threeclass_model):
    d, m = threeclass_model
    only = d.take(np.flatnonzero(d.response[:, 0] == 1))
    rep = local_mdi(m, only)
    assert rep.undefined_classes == [1, 2]
    assert np.isnan(rep.per_class[1:]).all()
    # one class present: its row is the global MDI
    np.testing.assert_allclose(rep.per_class[0], rep.mdi, atol=1e-12)
    assert json.loads(rep.to_json())["per_class"]["2"] is None


def test_local_mdi_needs_classification():
    with pytest.raises(DataError):
        local_mdi(hand_model(), hand_dataset())


def _threeclass_fits(seeds=range(10)):
    for s in seeds:
        d = gen_threeclass(200, noise_dims=100, seed=s)
        yield d, fit_cascade(d, paper_small_config(seed=s))


@pytest.mark.slow
def test_threeclass_qualitative_checks():
    """Point (0,1) is explained by x1; for class 1 only x1 matters (10 seeds, majority)."""
    point_ok = local_ok = 0
    for d, m in _threeclass_fits():
        rep = cascade_contributions(m, np.r_[0.0, 1.0, np.full(100, 0.5)])
        point_ok += rep.prediction[0].argmax() == 0 and rep.contrib[0, 0, 0] > 0
        per1 = local_mdi(m, d.take(m.train_rows)).per_class[0]
        local_ok += per1.argmax() == 0 and abs(per1[1]) <= 0.1 * per1[0]
    assert point_ok >= 6 and local_ok >= 6


# --- permutation importance -----------------------------------------------------------

def test_mda_zero_for_ignored_and_constant_features():
    d = hand_dataset()
    X = np.column_stack([d.features, np.full(4, 2.0)])
    dd = Dataset(X, d.response, REGRESSION, ())
    t = tree_from_splits(X, d.response, (0, 0.5, None, None))
    out = mda(lambda Z: predict_tree(t, Z), dd, n_repeats=20, seed=3)
    assert out[1] == 0.0 and out[2] == 0.0 and out[0] > 0


def test_mda_matches_enumerated_permutations():
    d = hand_dataset()
    t = tree_from_splits(d.features, d.response, (0, 0.5, None, None))
    base = -np.mean((predict_tree(t, d.features)[:, 0] - d.response[:, 0]) ** 2)
    drops = []
    for perm in itertools.permutations(range(4)):
        Xp = d.features.copy()
        Xp[:, 0] = d.features[list(perm), 0]
        drops.append(base + np.mean((predict_tree(t, Xp)[:, 0] - d.response[:, 0]) ** 2))
    expect = np.mean(drops)
    assert expect > 0
    got = mda(lambda Z: predict_tree(t, Z), d, n_repeats=4000, seed=0)[0]
    se = np.std(drops) / np.sqrt(4000)
    assert abs(got - expect) <= 4 * se


def test_mda_accuracy_for_classification(threeclass_model):
    d, m = threeclass_model
    out = mda(lambda Z: predict_cascade(m, Z), d, n_repeats=2, seed=1)
    assert out.shape == (d.n_features,) and out[0] > 0
    with pytest.raises(DataError):
        mda(lambda Z: predict_cascade(m, Z), d, n_repeats=0)


# --- reports ------------------------------------------------------------------------

def test_report_exports():
    rep = cascade_contributions(hand_model(), hand_dataset().features[:1])
    rows = rep.rows()
    assert rows[0] == (0, "bias", "bias", "value", 1.5)
    assert (0, 0, "x1", "value", -1.0) in rows and rows[-1][1] == "prediction"
    doc = json.loads(rep.to_json())
    assert doc["instances"][0]["contributions"]["x2"] == [-0.5]


def test_report_check_raises():
    rep = ContributionReport(np.zeros(1), np.ones((1, 2, 1)), np.zeros((1, 1)), 1)
    with pytest.raises(InvariantViolation):
        rep.check()
