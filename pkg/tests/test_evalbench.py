import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cascade_explain.attribution import build_attribution, cascade_mdi
from cascade_explain.cascade import fit_cascade
from cascade_explain.dataset import gen_threeclass, write_csv
from cascade_explain.errors import DataError
from cascade_explain.evalbench import (BenchmarkSpec, df_config, ranked_pair_score,
                                       relevant_feature_auc, run_benchmark, run_data)
from cascade_explain.forest import forest_mdi_classic, grow_forest
from cascade_explain.evalbench import rf_params


def test_auc_examples():
    assert relevant_feature_auc([3, 2, 1], [True, True, False]) == 1.0
    assert relevant_feature_auc([5, 5, 5, 5], [True, False, True, False]) == 0.5
    assert relevant_feature_auc([1, 2, 3], [True, False, False]) == 0.0


def test_auc_midrank_ties():
    # rel scores {2, 1}, irrelevant {1, 0}: pairs > : 3, ties: 1 -> (3 + 0.5) / 4
    assert relevant_feature_auc([2, 1, 1, 0], [True, True, False, False]) == 0.875


def test_auc_errors():
    with pytest.raises(DataError):
        relevant_feature_auc([1, 2], [True, True])
    with pytest.raises(DataError):
        relevant_feature_auc([1, 2], [False, False])
    with pytest.raises(DataError):
        relevant_feature_auc([1, 2, 3], [True, False])


def test_ranked_pair_examples():
    assert ranked_pair_score([1, 2, 3, 4]) == 1.0
    assert ranked_pair_score([4, 3, 2, 1]) == 0.0
    assert ranked_pair_score([1, 3, 2]) == pytest.approx(2 / 3)
    assert ranked_pair_score([1, 1]) == 0.5
    with pytest.raises(DataError):
        ranked_pair_score([1])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-1000, 1000), min_size=3, max_size=12), st.data())
def test_metrics_invariant_under_increasing_transform(scores, data):
    s = np.array(scores, dtype=float)
    mask = data.draw(st.lists(st.booleans(), min_size=len(s), max_size=len(s)))
    t = np.exp(s / 200) * 7 - 3          # strictly increasing on these integers
    assert ranked_pair_score(t) == ranked_pair_score(s)
    if 0 < sum(mask) < len(mask):
        assert relevant_feature_auc(t, mask) == relevant_feature_auc(s, mask)


TINY = dict(generator="sincos", n_train=120, n_valid=60, n_runs=1, seed=3,
            rf_trees=10, df_preset="paper-small", df_max_layers=2, mda_repeats=1,
            metric="ranked_pairs")


def test_spec_validation():
    with pytest.raises(DataError):
        BenchmarkSpec(n_runs=0).validate()
    with pytest.raises(DataError):
        BenchmarkSpec(methods=("SHAP",)).validate()
    with pytest.raises(DataError):
        BenchmarkSpec(methods=("MDA_RF(partial)",)).validate()
    with pytest.raises(DataError):
        BenchmarkSpec(generator=None).validate()
    with pytest.raises(DataError, match="unknown benchmark spec keys"):
        BenchmarkSpec.from_dict({"bogus": 1})


def test_determinism_and_layout(tmp_path):
    spec = BenchmarkSpec.from_dict({**TINY, "methods": ["MDI_RF", "MDI_DF", "MDA_DF"]})
    a, b = run_benchmark(spec), run_benchmark(spec)
    assert [r["value"] for r in a.rows] == [r["value"] for r in b.rows]
    assert [r["method"] for r in a.rows] == ["MDI_RF", "MDI_DF(partial)", "MDA_DF"]
    a.write_csv(tmp_path / "r.csv")
    a.write_summary(tmp_path / "s.json")
    header = (tmp_path / "r.csv").read_text().splitlines()[0]
    assert header == "dataset,method,run,seed,metric,value,train_ms,importance_ms"
    summary = json.loads((tmp_path / "s.json").read_text())
    assert set(summary["methods"]) == {"MDI_RF", "MDI_DF(partial)", "MDA_DF"}
    assert "MDI_DF(partial)" in a.format_summary()


def test_single_run_equals_manual_pipeline():
    spec = BenchmarkSpec.from_dict({**TINY, "methods": ["MDI_RF", "MDI_DF(additive)"]})
    res = run_benchmark(spec)
    seed, tr, _ = run_data(spec, 0)
    rf = grow_forest(tr.features, tr.response, rf_params(spec, seed))
    assert res.rows[0]["value"] == ranked_pair_score(forest_mdi_classic(rf))
    m = build_attribution(fit_cascade(tr, df_config(spec, seed)), tr, "additive")
    mdi = cascade_mdi(m, tr.take(m.train_rows)).mdi
    assert res.rows[1]["value"] == ranked_pair_score(mdi)


def test_failures_reported_per_cell():
    spec = BenchmarkSpec.from_dict({**TINY, "n_valid": 0, "methods": ["MDA_RF", "MDI_RF"]})
    res = run_benchmark(spec)
    assert np.isnan(res.rows[0]["value"]) and np.isfinite(res.rows[1]["value"])
    assert res.failures[0]["method"] == "MDA_RF"


def test_csv_source_with_augmentation(tmp_path):
    d = gen_threeclass(120, noise_dims=2, seed=1)
    write_csv(d, tmp_path / "d.csv")
    spec = BenchmarkSpec(generator=None, csv_path=str(tmp_path / "d.csv"), augment=True,
                         train_fraction=0.25, methods=("MDIoob_RF",), n_runs=2, rf_trees=20)
    seed, tr, va = run_data(spec, 0)
    assert tr.n == va.n == 30 and tr.n_features == 8
    res = run_benchmark(spec)
    assert all(0 <= r["value"] <= 1 for r in res.rows)
