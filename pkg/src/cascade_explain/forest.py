"""Random forests: bagging, feature subspacing, OOB bookkeeping, MDI."""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from ._rng import derive_seed, stream_rng
from .errors import DataError
from .tree import Tree, TreeParams, _check_X, _cov_mdi, grow_tree, path_tables, tree_mdi_classic

BEST_SPLIT = "best_split"
FULLY_RANDOM = "fully_random"
THREADS_ENV = "CASCADE_EXPLAIN_THREADS"


def resolve_threads(threads=None):
    """Worker count: explicit value, else $CASCADE_EXPLAIN_THREADS, else 1."""
    if threads is None:
        env = os.environ.get(THREADS_ENV)
        threads = int(env) if env else 1
    return max(1, int(threads))


def parallel_map(fn, items, threads=None):
    items = list(items)
    n = resolve_threads(threads)
    if n == 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 50
    tree: TreeParams = field(default_factory=TreeParams)
    bootstrap: bool = False
    kind: str = BEST_SPLIT
    seed: int = 0

    def validate(self):
        if self.n_trees < 1:
            raise DataError("n_trees must be >= 1")
        if self.kind not in (BEST_SPLIT, FULLY_RANDOM):
            raise DataError(f"unknown forest kind {self.kind!r}")
        self.tree.validate()

    def tree_params(self, index):
        """Tree parameters for member ``index``; ``kind`` fixes the split rule."""
        if self.kind == BEST_SPLIT:
            mode = dict(split_mode="best", feature_mode="sqrt")
        else:
            mode = dict(split_mode="random_threshold", feature_mode="all")
        return replace(self.tree, seed_stream=derive_seed(self.seed, index, 0), **mode)


@dataclass
class Forest:
    trees: List[Tree]
    params: ForestParams
    mu0: np.ndarray
    n_features: int
    oob_masks: Optional[np.ndarray] = None

    @property
    def n_outputs(self):
        return self.mu0.shape[0]


def bootstrap_counts(n, seed, index):
    draws = stream_rng(seed, index, 1).integers(0, n, size=n)
    return np.bincount(draws, minlength=n).astype(np.float64)


def grow_forest(X, Y, params: ForestParams, threads=None) -> Forest:
    """Fit a forest on arrays ``X`` (n, p) and ``Y`` (n, C)."""
    params.validate()
    X = np.ascontiguousarray(X, dtype=np.float64)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    n = X.shape[0]
    if n == 0:
        raise DataError("cannot fit a forest on zero rows")
    Y = Y.reshape(n, -1)

    def fit_one(i):
        w = bootstrap_counts(n, params.seed, i) if params.bootstrap else None
        return grow_tree(X, Y, params.tree_params(i), w), w

    fitted = parallel_map(fit_one, range(params.n_trees), threads)
    trees = [t for t, _ in fitted]
    oob = np.array([w == 0 for _, w in fitted]) if params.bootstrap else None
    return Forest(trees=trees, params=params, mu0=Y.mean(axis=0),
                  n_features=X.shape[1], oob_masks=oob)


def fit_forest(d, params: ForestParams, threads=None) -> Forest:
    return grow_forest(d.features, d.response, params, threads)


def _as_batch(X, n_features):
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    return _check_X(X[None, :] if single else X, n_features), single


def predict_forest(f: Forest, X):
    """Mean of the member trees' leaf means."""
    Xb, single = _as_batch(X, f.n_features)
    out = np.zeros((Xb.shape[0], f.n_outputs))
    for t in f.trees:
        out += t.value[t.apply(Xb)]
    out /= len(f.trees)
    return out[0] if single else out


def forest_contributions(f: Forest, X):
    """Forest-averaged path decomposition ``(bias, contrib)``.

    ``contrib`` has shape ``(m, p, C)`` (``(p, C)`` for a single
    instance); ``bias`` is the mean root value over trees.
    """
    Xb, single = _as_batch(X, f.n_features)
    contrib = np.zeros((Xb.shape[0], f.n_features, f.n_outputs))
    bias = np.zeros(f.n_outputs)
    for t in f.trees:
        contrib += path_tables(t)[t.apply(Xb)]
        bias += t.value[0]
    contrib /= len(f.trees)
    bias /= len(f.trees)
    return bias, (contrib[0] if single else contrib)


def _check_XY(f: Forest, X, Y):
    X = _check_X(X, f.n_features)
    Y = np.asarray(Y, dtype=np.float64).reshape(X.shape[0], -1)
    if Y.shape[1] != f.n_outputs:
        raise DataError(f"expected {f.n_outputs} response columns, got {Y.shape[1]}")
    return X, Y


def forest_mdi(f: Forest, X, Y):
    """Covariance-form MDI of the forest on ``(X, Y)``: mean of the trees' values."""
    X, Y = _check_XY(f, X, Y)
    return sum(_cov_mdi(t, X, Y) for t in f.trees) / len(f.trees)


def forest_mdi_classic(f: Forest):
    """Node-sum MDI averaged over trees (each tree normalized by its in-bag size)."""
    return sum(tree_mdi_classic(t) for t in f.trees) / len(f.trees)


def forest_mdi_oob(f: Forest, X, Y):
    """Covariance-form MDI evaluated per tree on its out-of-bag rows only.

    Trees without OOB rows are left out of the average.
    """
    if not f.params.bootstrap or f.oob_masks is None:
        raise DataError("MDI-oob needs a forest trained with bootstrap=True")
    X, Y = _check_XY(f, X, Y)
    if f.oob_masks.shape[1] != X.shape[0]:
        raise DataError("OOB masks do not match the number of training rows")
    parts = [_cov_mdi(t, X[m], Y[m]) for t, m in zip(f.trees, f.oob_masks) if m.any()]
    if not parts:
        raise DataError("no tree has out-of-bag rows")
    return sum(parts) / len(parts)
