"""Shared builders for tests: the hand-oracle cascade and small fitted models."""

import json
from fractions import Fraction
from pathlib import Path

import numpy as np

from cascade_explain.attribution import build_attribution
from cascade_explain.cascade import CascadeModel, Layer, LayerSchema, augment_features
from cascade_explain.dataset import REGRESSION, Dataset
from cascade_explain.forest import Forest, ForestParams
from cascade_explain.tree import tree_from_splits

ORACLE_PATH = Path(__file__).parent / "oracles" / "hand_oracle.json"

# criterion number -> "PASS/FAIL criterion N: ..." line, echoed in the terminal summary
ACCEPTANCE_LOG = {}


def report(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE_LOG[n] = line
    print(line)
    return ok


def oracle():
    """The brute-force oracle values as floats (exact for these dyadic rationals)."""
    doc = json.loads(ORACLE_PATH.read_text())

    def conv(v):
        if isinstance(v, list):
            return np.array([conv(x) for x in v], dtype=float)
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        return float(Fraction(v))
    return {k: conv(v) for k, v in doc.items()}


def hand_dataset():
    X = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
    return Dataset(X, 2 * X[:, 0] + X[:, 1], REGRESSION, ("x1", "x2"), name="hand")


def _forest(tree, mu0):
    return Forest([tree], ForestParams(n_trees=1), mu0=mu0, n_features=tree.n_features)


def hand_model(method="partial"):
    """The 2-layer, one-tree-per-layer cascade of the hand oracle."""
    d = hand_dataset()
    X, Y = d.features, d.response
    mu0 = Y.mean(axis=0)
    t1 = tree_from_splits(X, Y, (0, 0.5, None, None))
    f1 = _forest(t1, mu0)
    schema = LayerSchema.build(1, 1)
    X2 = augment_features(X, [t1.value[t1.apply(X)]], schema)
    t2 = tree_from_splits(X2, Y, (2, 1.5, (1, 0.5, None, None), (1, 0.5, None, None)))
    f2 = _forest(t2, mu0)
    m = CascadeModel(layers=[Layer([f1], LayerSchema.empty()), Layer([f2], schema)],
                     mu0=mu0, best_layer=2, growth_log=[1.0, 0.0], n_features=2,
                     task=REGRESSION, metric="mse", feature_names=("x1", "x2"),
                     train_rows=np.arange(4))
    return build_attribution(m, d, method)
