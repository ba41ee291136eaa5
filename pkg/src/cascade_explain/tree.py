"""CART regression/classification trees with variance impurity.

Classification responses are one-hot, so the summed per-component
variance is the Gini index. Every node keeps its weighted training
count and mean response, which is all the attribution code needs.
"""

from dataclasses import dataclass, field, replace
from math import ceil, sqrt
from typing import Optional, Union

import numpy as np

from . import _kernels
from .errors import DataError, InvariantViolation

FeatureMode = Union[str, int]


@dataclass(frozen=True)
class TreeParams:
    max_depth: Optional[int] = None
    min_samples_split: int = 2
    min_samples_leaf: int = 1
    feature_mode: FeatureMode = "all"
    split_mode: str = "best"
    seed_stream: int = 0

    def validate(self):
        if self.max_depth is not None and self.max_depth < 1:
            raise DataError(f"max_depth must be positive or None, got {self.max_depth}")
        if self.min_samples_split < 2:
            raise DataError("min_samples_split must be >= 2")
        if self.min_samples_leaf < 1:
            raise DataError("min_samples_leaf must be >= 1")
        if self.split_mode not in ("best", "random_threshold"):
            raise DataError(f"unknown split_mode {self.split_mode!r}")
        if isinstance(self.feature_mode, str):
            if self.feature_mode not in ("all", "sqrt"):
                raise DataError(f"unknown feature_mode {self.feature_mode!r}")
        elif int(self.feature_mode) < 1:
            raise DataError("fixed feature_mode must be >= 1")

    def max_features(self, n_features):
        mode = self.feature_mode
        if mode == "all":
            return n_features
        if mode == "sqrt":
            return max(1, ceil(sqrt(n_features)))
        m = int(mode)
        if not 1 <= m <= n_features:
            raise DataError(f"feature_mode={m} outside [1, {n_features}]")
        return m


@dataclass
class Tree:
    """Array-of-nodes binary tree.

    Node ``i`` is a leaf iff ``feature[i] == -1``. Children always have
    larger ids than their parent. ``leaf_contrib`` (one ``(K, C)`` table
    per leaf, in node-id order) is filled by the attribution code.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    n_node: np.ndarray
    value: np.ndarray
    depth: np.ndarray
    impurity_decrease: np.ndarray
    n_features: int
    leaf_contrib: Optional[np.ndarray] = None
    _leaf_slot: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    _path_table: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @property
    def n_nodes(self):
        return self.feature.shape[0]

    @property
    def n_outputs(self):
        return self.value.shape[1]

    @property
    def root_mean(self):
        return self.value[0]

    @property
    def is_leaf(self):
        return self.feature < 0

    @property
    def leaf_slot(self):
        """Map node id -> row of ``leaf_contrib`` (-1 for internal nodes)."""
        if self._leaf_slot is None:
            slot = np.cumsum(self.is_leaf) - 1
            slot[~self.is_leaf] = -1
            self._leaf_slot = slot
        return self._leaf_slot

    def with_leaf_contrib(self, table):
        return replace(self, leaf_contrib=table, _leaf_slot=None, _path_table=None)

    def apply(self, X):
        X = _check_X(X, self.n_features)
        return _kernels.apply(self.feature, self.threshold, self.left,
                              self.right, X)

    def check(self, atol=1e-9):
        """Raise ``InvariantViolation`` if the node arrays are inconsistent."""
        nn = self.n_nodes
        internal = np.flatnonzero(self.feature >= 0)
        leaves = np.flatnonzero(self.feature < 0)
        if np.any(self.left[leaves] != -1) or np.any(self.right[leaves] != -1):
            raise InvariantViolation("node: leaf has children")
        for arr, name in ((self.left, "left"), (self.right, "right")):
            ch = arr[internal]
            if np.any(ch <= internal) or np.any(ch >= nn):
                raise InvariantViolation(f"node: invalid {name} child id")
        if np.any(self.feature[internal] >= self.n_features):
            raise InvariantViolation("node: split feature out of range")
        lc, rc = self.left[internal], self.right[internal]
        n_t = self.n_node[internal]
        if not np.allclose(n_t, self.n_node[lc] + self.n_node[rc], rtol=0, atol=atol):
            raise InvariantViolation("node: n(t) != n(left) + n(right)")
        recomposed = (self.n_node[lc, None] * self.value[lc]
                      + self.n_node[rc, None] * self.value[rc]) / n_t[:, None]
        scale = 1.0 + np.abs(self.value[internal])
        if np.any(np.abs(recomposed - self.value[internal]) > atol * scale):
            raise InvariantViolation("node: mean(t) is not the weighted mean of its children")
        if np.any(self.impurity_decrease[internal] < 0):
            raise InvariantViolation("tree: negative impurity decrease")
        if self.leaf_contrib is not None:
            K = self.leaf_contrib.shape[1]
            if self.leaf_contrib.shape != (leaves.size, K, self.n_outputs):
                raise InvariantViolation("leaf table: shape does not match leaves")
            sums = self.leaf_contrib.sum(axis=1)
            target = self.value[leaves] - self.value[0]
            tol = 1e-10 * (1.0 + np.abs(self.leaf_contrib).sum(axis=1))
            if np.any(np.abs(sums - target) > tol):
                raise InvariantViolation("leaf table: contributions do not telescope "
                                         "to mu(leaf) - mu(root)")


def _check_X(X, n_features):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != n_features:
        raise DataError(f"expected {n_features} features, got shape {X.shape}")
    return X


def _finish(feature, threshold, left, right, count, value, depth, n_features):
    imp = np.zeros(feature.shape[0])
    internal = np.flatnonzero(feature >= 0)
    if internal.size:
        lc, rc = left[internal], right[internal]
        mu = value[internal]
        dl = ((value[lc] - mu) ** 2).sum(axis=1)
        dr = ((value[rc] - mu) ** 2).sum(axis=1)
        imp[internal] = (count[lc] * dl + count[rc] * dr) / count[internal]
    return Tree(feature=feature, threshold=threshold, left=left, right=right,
                n_node=count, value=value, depth=depth, impurity_decrease=imp,
                n_features=n_features)


def grow_tree(X, Y, params: TreeParams, weights=None) -> Tree:
    """Fit a tree on arrays ``X`` (n, p) and ``Y`` (n, C).

    ``weights`` are integer multiplicities (bootstrap counts); rows with
    weight 0 are out of bag and never enter a node.
    """
    params.validate()
    X = np.ascontiguousarray(X, dtype=np.float64)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    if X.ndim != 2:
        raise DataError(f"X must be 2-D, got shape {X.shape}")
    n, p = X.shape
    if n == 0 or Y.shape[0] != n:
        raise DataError("X and Y must have the same, nonzero number of rows")
    Y = Y.reshape(n, -1)
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (n,) or np.any(w < 0) or np.any(w != np.round(w)) or w.sum() <= 0:
            raise DataError("weights must be nonnegative integers with positive sum")
    max_depth = -1 if params.max_depth is None else params.max_depth
    arrays = _kernels.grow(X, Y, w, params.max_features(p),
                           params.split_mode == "random_threshold", max_depth,
                           params.min_samples_split, params.min_samples_leaf,
                           params.seed_stream)
    return _finish(*arrays, n_features=p)


def fit_tree(d, params: TreeParams, weights=None) -> Tree:
    """Fit a tree on a :class:`~cascade_explain.dataset.Dataset`."""
    return grow_tree(d.features, d.response, params, weights)


def tree_from_splits(X, Y, splits, weights=None) -> Tree:
    """Build a tree with a prescribed structure; node statistics come from data.

    ``splits`` is ``None`` for a leaf or ``(feature, threshold, left, right)``
    with nested ``left``/``right`` specs. Nodes are numbered like the
    grower numbers them (children allocated together, left first).
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    n, p = X.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    feature, threshold, left, right, count, value, depth = [], [], [], [], [], [], []

    def new(rows, dep):
        wr = w[rows]
        if wr.sum() <= 0:
            raise DataError("prescribed split leaves a node empty")
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        count.append(wr.sum())
        value.append((wr[:, None] * Y[rows]).sum(axis=0) / wr.sum())
        depth.append(dep)
        return len(feature) - 1

    pending = [(new(np.arange(n), 0), np.arange(n), splits)]
    while pending:
        nid, rows, spec = pending.pop()
        if spec is None:
            continue
        f, thr, lspec, rspec = spec
        go = X[rows, f] < thr
        lc = new(rows[go], depth[nid] + 1)
        rc = new(rows[~go], depth[nid] + 1)
        feature[nid], threshold[nid], left[nid], right[nid] = f, float(thr), lc, rc
        pending.append((rc, rows[~go], rspec))
        pending.append((lc, rows[go], lspec))
    tree = _finish(np.array(feature, np.int64), np.array(threshold),
                   np.array(left, np.int64), np.array(right, np.int64),
                   np.array(count, np.float64), np.array(value).reshape(len(value), -1),
                   np.array(depth, np.int64), n_features=p)
    tree.check()
    return tree


def predict_tree(t: Tree, X):
    """Leaf mean for each row of ``X``; a 1-D ``X`` is treated as one instance."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        return predict_tree(t, X[None, :])[0]
    return t.value[t.apply(X)]


def tree_contributions(t: Tree, x):
    """Path decomposition of one prediction: ``(bias, contrib)``.

    ``bias`` is the root mean; ``contrib[k]`` sums the mean changes of
    every split on feature ``k`` along the root-to-leaf path.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (t.n_features,):
        raise DataError(f"expected a {t.n_features}-vector, got shape {x.shape}")
    contrib = np.zeros((t.n_features, t.n_outputs))
    node = 0
    while t.feature[node] >= 0:
        f = t.feature[node]
        child = t.left[node] if x[f] < t.threshold[node] else t.right[node]
        contrib[f] += t.value[child] - t.value[node]
        node = child
    return t.value[0].copy(), contrib


def path_tables(t: Tree):
    """Per-node accumulated path contributions, shape ``(n_nodes, p, C)``.

    Cached on the tree after the first call.
    """
    if t._path_table is not None:
        return t._path_table
    p = t.n_features
    dummy = np.zeros((1, 1, 1, 1))
    src = np.full(p, -1, np.int64)
    acc, _ = _kernels.node_tables(t.feature, t.left, t.right, t.n_node, t.value,
                                  dummy, src, p, _kernels.PARTIAL, 1e-12, None)
    t._path_table = acc
    return acc


def path_contributions(t: Tree, X):
    """Batch version of :func:`tree_contributions`; returns ``(m, p, C)``."""
    return path_tables(t)[t.apply(X)]


def tree_mdi_classic(t: Tree, n_total=None):
    """Node-sum MDI: weighted impurity decrease of the splits on each feature."""
    if n_total is None:
        n_total = t.n_node[0]
    internal = np.flatnonzero(t.feature >= 0)
    mdi = np.zeros(t.n_features)
    np.add.at(mdi, t.feature[internal],
              t.n_node[internal] / n_total * t.impurity_decrease[internal])
    return mdi


def leaf_label_sums(leaf_of_row, Y, n_nodes, weights=None):
    """Per-node sums of (weighted) label vectors over the rows reaching it."""
    Yw = Y if weights is None else Y * np.asarray(weights, np.float64)[:, None]
    sums = np.zeros((n_nodes, Y.shape[1]))
    np.add.at(sums, leaf_of_row, Yw)
    return sums


def tree_mdi_cov(t: Tree, X, Y, weights=None):
    """Covariance-form MDI: mean over rows of <contribution_k(x_i), y_i>.

    With ``weights`` the mean is weighted; on the training rows with
    their bootstrap multiplicities it equals :func:`tree_mdi_classic`.
    """
    X = _check_X(X, t.n_features)
    Y = np.asarray(Y, dtype=np.float64).reshape(X.shape[0], -1)
    if Y.shape[1] != t.n_outputs:
        raise DataError(f"expected {t.n_outputs} response columns, got {Y.shape[1]}")
    return _cov_mdi(t, X, Y, weights)


def _cov_mdi(t: Tree, X, Y, weights=None):
    total = X.shape[0] if weights is None else float(np.sum(weights))
    ysum = leaf_label_sums(t.apply(X), Y, t.n_nodes, weights)
    return np.einsum("nkc,nc->k", path_tables(t), ysum) / total
