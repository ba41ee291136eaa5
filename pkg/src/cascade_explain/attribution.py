"""Feature contributions and MDI for cascades of forests.

Splits on a new feature (a previous-layer forest's prediction) are
attributed to the original features in two steps. The estimate is the
change, from parent to child node, of the mean previous-layer
contribution of the node's training rows. Calibration then adjusts the
estimate so the per-feature deltas add up to the node's true change in
mean response. Accumulated along every root-to-leaf path this yields
one ``(K, C)`` table per leaf; a query reads the table of the leaf it
reaches.
"""

import json
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Tuple

import numpy as np

from . import _kernels
from ._rng import stream_rng
from .cascade import CascadeModel, Layer, forward, _check_input
from .dataset import CLASSIFICATION, Dataset
from .errors import DataError, InvariantViolation
from .forest import Forest, forest_mdi, parallel_map, predict_forest
from .tree import Tree

_CODES = {
    "multiplicative": _kernels.MULTIPLICATIVE,
    "additive": _kernels.ADDITIVE,
    "partial": _kernels.PARTIAL,
    "partial_additive": _kernels.PARTIAL,
}


@dataclass(frozen=True)
class CalibrationMethod:
    name: str = "partial"
    epsilon: float = 1e-12

    def __post_init__(self):
        if self.name not in _CODES:
            raise DataError(f"unknown calibration method {self.name!r}; "
                            f"choose from {sorted(_CODES)}")
        if not self.epsilon > 0:
            raise DataError("calibration epsilon must be positive")

    @property
    def code(self):
        return _CODES[self.name]

    @property
    def canonical(self):
        return "partial" if self.name == "partial_additive" else self.name


def as_method(method, epsilon=1e-12) -> CalibrationMethod:
    if isinstance(method, CalibrationMethod):
        return method
    if isinstance(method, (int, np.integer)):
        method = {v: k for k, v in _CODES.items() if k != "partial_additive"}[int(method)]
    return CalibrationMethod(method, epsilon)


# --- estimation and calibration ------------------------------------------------

def estimate_node_delta(prev_contribs, child_rows, parent_rows, weights=None):
    """Mean previous-layer contribution over the child's rows minus the parent's.

    ``prev_contribs`` is ``(n, K, C)``, indexed by training row.
    """
    P = np.asarray(prev_contribs, dtype=np.float64)
    child_rows = np.asarray(child_rows, dtype=np.int64)
    parent_rows = np.asarray(parent_rows, dtype=np.int64)
    if child_rows.size == 0 or parent_rows.size == 0:
        raise DataError("node membership is empty")
    w = np.ones(P.shape[0]) if weights is None else np.asarray(weights, np.float64)

    def mean(rows):
        wr = w[rows]
        return np.tensordot(wr, P[rows], axes=1) / wr.sum()

    return mean(child_rows) - mean(parent_rows)


def _seqsum(a):
    # left-to-right, matching the compiled kernel bit for bit
    return float(np.cumsum(a)[-1])


def calibrate(deltas_hat, delta_true, method="partial", eps=1e-12):
    """Adjust estimated per-feature deltas so each class column sums to ``delta_true``.

    ``deltas_hat`` is ``(K, C)`` (or a ``K``-vector for one output);
    ``delta_true`` has ``C`` entries. Columns are calibrated
    independently. When the relevant denominator falls below ``eps``
    the residual is spread evenly over all ``K`` features, and a zero
    true change zeroes the column.
    """
    code = as_method(method, eps).code
    est = np.asarray(deltas_hat, dtype=np.float64)
    vector = est.ndim == 1
    if vector:
        est = est[:, None]
    K, C = est.shape
    dtrue = np.asarray(delta_true, dtype=np.float64).reshape(C)
    out = est.copy()
    for c in range(C):
        h, d = est[:, c], dtrue[c]
        if d == 0.0:
            out[:, c] = 0.0
            continue
        sh = _seqsum(h)
        resid = d - sh
        if code == _kernels.MULTIPLICATIVE:
            ok = abs(sh) >= eps
            if ok:
                out[:, c] = h * (d / sh)
        elif code == _kernels.ADDITIVE:
            sa = _seqsum(np.abs(h))
            ok = sa >= eps
            if ok:
                out[:, c] = h + np.abs(h) / sa * resid
        else:
            S = np.sign(h) == np.sign(d)
            S &= h != 0.0
            ss = _seqsum(h[S]) if S.any() else 0.0
            ok = S.any() and abs(ss) >= eps
            if ok:
                out[S, c] = h[S] * (1.0 + resid / ss)
        if not ok:
            out[:, c] = h + resid / K
    return out[:, 0] if vector else out


def _calibrate_code(est, dtrue, code, eps):
    return calibrate(est, dtrue, int(code), eps)


# --- leaf tables ------------------------------------------------------------------

def tree_deep_contributions(tree: Tree, X_train, prev_contribs, src_of_feature,
                            n_original, method="partial", eps=1e-12, weights=None,
                            leaf_of_row=None):
    """Leaf contribution table of one tree over the ``n_original`` features.

    ``X_train`` are the rows the tree was trained on (in its input
    space), ``prev_contribs`` the ``(L, n, K, C)`` training-row
    contributions of the previous layer's forests and
    ``src_of_feature[f]`` the forest behind input ``f`` (-1 for an
    original feature). Returns ``(table, max_residual)`` where the
    residual is the largest calibration-constraint violation seen.
    """
    code = as_method(method, eps).code
    K = int(n_original)
    src = np.asarray(src_of_feature, dtype=np.int64)
    if src.shape != (tree.n_features,):
        raise DataError("src_of_feature must have one entry per tree input")
    if np.any(src[:K] != -1) or np.any(src[K:] < 0):
        raise DataError("inputs below n_original must be original features")
    split_f = tree.feature[tree.feature >= 0]
    if leaf_of_row is None:
        leaf_of_row = tree.apply(X_train)
    n = leaf_of_row.shape[0]
    if np.any(split_f >= K):
        P = np.asarray(prev_contribs, dtype=np.float64)
        if P.ndim != 4 or P.shape[1] != n or P.shape[2] != K:
            raise DataError("prev_contribs must be (L, n, K, C) over the training rows")
        if src.max() >= P.shape[0]:
            raise DataError("a new feature refers to a forest missing from prev_contribs")
        L, _, _, C = P.shape
        flat = np.ascontiguousarray(P.transpose(1, 0, 2, 3).reshape(n, L * K * C))
        w = np.ones(n) if weights is None else np.asarray(weights, np.float64)
        sums = _kernels.node_sums(leaf_of_row, w, flat, tree.left, tree.right)
        sums = sums.reshape(tree.n_nodes, L, K, C)
    else:
        sums = np.zeros((1, 1, 1, 1))
    acc, res = _kernels.node_tables(tree.feature, tree.left, tree.right, tree.n_node,
                                    tree.value, sums, src, K, code, eps, _calibrate_code)
    return acc[tree.is_leaf], res


def _rows_contrib(tree: Tree, leaf_of_row):
    return tree.leaf_contrib[tree.leaf_slot[leaf_of_row]]


def build_attribution(m: CascadeModel, d: Dataset, method="partial", eps=1e-12,
                      threads=None) -> CascadeModel:
    """Return a copy of ``m`` whose trees carry leaf contribution tables.

    ``d`` must be the dataset ``m`` was fitted on; its training rows are
    recovered from ``m.train_rows`` and routed through every layer.
    """
    meth = as_method(method, eps)
    if m.train_rows is None:
        raise DataError("model does not record its training rows")
    if d.n_features != m.n_features or d.n_outputs != m.n_outputs:
        raise DataError("dataset does not match the model's feature/response shape")
    X = d.features[m.train_rows]
    K, C = m.n_features, m.n_outputs
    inputs, outputs = forward(m, X, m.n_layers)
    prev = None
    layers, residuals = [], []
    for j, layer in enumerate(m.layers):
        src = np.full(inputs[j].shape[1], -1, np.int64)
        src[K:] = layer.schema.new_feature_map[:, 0]
        contrib = np.zeros((len(layer.forests), X.shape[0], K, C))
        new_forests, res = [], 0.0

        def one(t):
            leaf = t.apply(inputs[j])
            table, r = tree_deep_contributions(t, inputs[j], prev, src, K, meth.code,
                                               meth.epsilon, leaf_of_row=leaf)
            return t.with_leaf_contrib(table), leaf, r

        for fi, F in enumerate(layer.forests):
            done = parallel_map(one, F.trees, threads)
            for t, leaf, r in done:
                contrib[fi] += _rows_contrib(t, leaf)
                res = max(res, r)
            contrib[fi] /= len(F.trees)
            new_forests.append(replace(F, trees=[t for t, _, _ in done]))
        layers.append(Layer(new_forests, layer.schema))
        residuals.append(res)
        prev = contrib
    return replace(m, layers=layers, calibration=meth.canonical,
                   calibration_residual=residuals)


# --- reports ----------------------------------------------------------------------

@dataclass
class ContributionReport:
    """Per-instance decomposition ``prediction = bias + contrib.sum(axis=1)``."""

    bias: np.ndarray
    contrib: np.ndarray
    prediction: np.ndarray
    layer: int
    feature_names: Tuple[str, ...] = ()
    class_labels: Optional[Tuple[str, ...]] = None

    def residual(self):
        """Largest relative gap between prediction and bias + contributions."""
        if self.contrib.shape[0] == 0:
            return 0.0
        recon = self.bias + self.contrib.sum(axis=1)
        return float(np.max(np.abs(self.prediction - recon) / (1.0 + np.abs(self.prediction))))

    def check(self, rtol=1e-8):
        r = self.residual()
        if r > rtol:
            raise InvariantViolation(f"decomposition identity violated: residual {r:.3g}")
        return r

    def _classes(self):
        C = self.bias.shape[0]
        return list(self.class_labels) if self.class_labels else (
            ["value"] if C == 1 else [str(c) for c in range(C)])

    def rows(self):
        """Long-format rows ``(instance, feature, name, class, value)``."""
        classes = self._classes()
        names = self.feature_names or tuple(f"x{k + 1}" for k in range(self.contrib.shape[1]))
        out = []
        for i in range(self.contrib.shape[0]):
            for c, cl in enumerate(classes):
                out.append((i, "bias", "bias", cl, float(self.bias[c])))
            for k, nm in enumerate(names):
                for c, cl in enumerate(classes):
                    out.append((i, k, nm, cl, float(self.contrib[i, k, c])))
            for c, cl in enumerate(classes):
                out.append((i, "prediction", "prediction", cl, float(self.prediction[i, c])))
        return out

    def to_json(self):
        classes = self._classes()
        names = self.feature_names or tuple(f"x{k + 1}" for k in range(self.contrib.shape[1]))
        return json.dumps({
            "layer": self.layer,
            "classes": classes,
            "instances": [{
                "bias": self.bias.tolist(),
                "prediction": self.prediction[i].tolist(),
                "contributions": {nm: self.contrib[i, k].tolist() for k, nm in enumerate(names)},
            } for i in range(self.contrib.shape[0])],
        }, indent=1)


@dataclass
class ImportanceReport:
    mdi: np.ndarray
    method: str
    per_class: Optional[np.ndarray] = None
    undefined_classes: List[int] = field(default_factory=list)
    dataset: str = "data"
    feature_names: Tuple[str, ...] = ()
    class_labels: Optional[Tuple[str, ...]] = None

    def normalized(self, total_variance):
        if not total_variance > 0:
            raise DataError("cannot normalize by a zero total response variance")
        pc = None if self.per_class is None else self.per_class / total_variance
        return replace(self, mdi=self.mdi / total_variance, per_class=pc,
                       method=self.method + "/normalized")

    def rows(self):
        """Rows ``(feature, name, class, value)``; class is "all" for global MDI."""
        names = self.feature_names or tuple(f"x{k + 1}" for k in range(self.mdi.shape[0]))
        out = [(k, nm, "all", float(v)) for k, (nm, v) in enumerate(zip(names, self.mdi))]
        if self.per_class is not None:
            labels = self.class_labels or tuple(str(c) for c in range(self.per_class.shape[0]))
            for c, cl in enumerate(labels):
                for k, nm in enumerate(names):
                    out.append((k, nm, cl, float(self.per_class[c, k])))
        return out

    def to_json(self):
        names = self.feature_names or tuple(f"x{k + 1}" for k in range(self.mdi.shape[0]))
        doc = {"method": self.method, "dataset": self.dataset,
               "importance": dict(zip(names, self.mdi.tolist()))}
        if self.per_class is not None:
            labels = self.class_labels or tuple(str(c) for c in range(self.per_class.shape[0]))
            doc["per_class"] = {
                cl: (None if c in self.undefined_classes
                     else dict(zip(names, self.per_class[c].tolist())))
                for c, cl in enumerate(labels)}
        return json.dumps(doc, indent=1)


# --- cascade-level queries -------------------------------------------------------

def _forest_contrib(F: Forest, X):
    out = np.zeros((X.shape[0],) + F.trees[0].leaf_contrib.shape[1:])
    for t in F.trees:
        out += _rows_contrib(t, t.apply(X))
    return out / len(F.trees)


def cascade_contributions(m: CascadeModel, X, layer=None) -> ContributionReport:
    """Decompose the layer-``layer`` prediction (default: best layer) of every row of ``X``."""
    Xb, _ = _check_input(m, X)
    j = m.layer_index(layer)
    if not all(t.leaf_contrib is not None for F in m.layers[j].forests for t in F.trees):
        raise DataError("model has no leaf contribution tables; run build_attribution")
    inputs, outputs = forward(m, Xb, j + 1)
    forests = m.layers[j].forests
    contrib = sum(_forest_contrib(F, inputs[j]) for F in forests) / len(forests)
    return ContributionReport(bias=m.mu0.copy(), contrib=contrib,
                              prediction=outputs[-1].mean(axis=0), layer=j + 1,
                              feature_names=m.feature_names, class_labels=m.class_labels)


def _check_data(m: CascadeModel, d: Dataset):
    if d.n_features != m.n_features:
        raise DataError(f"model expects {m.n_features} features, data has {d.n_features}")
    if d.n_outputs != m.n_outputs:
        raise DataError(f"model expects {m.n_outputs} response columns, data has {d.n_outputs}")


def cascade_mdi(m: CascadeModel, d: Dataset, layer=None) -> ImportanceReport:
    """Mean over rows of <contribution_k(x_i), y_i> for each original feature."""
    _check_data(m, d)
    rep = cascade_contributions(m, d.features, layer)
    mdi = np.einsum("ikc,ic->k", rep.contrib, d.response) / d.n
    return ImportanceReport(mdi=mdi, method=f"mdi[{m.calibration}]", dataset=d.name,
                            feature_names=m.feature_names, class_labels=m.class_labels)


def local_mdi(m: CascadeModel, d: Dataset, layer=None) -> ImportanceReport:
    """Per-class MDI: each class's rows, paired with that class's component.

    Classes absent from ``d`` get a NaN row and are listed in
    ``undefined_classes``.
    """
    if m.task != CLASSIFICATION:
        raise DataError("local MDI is defined for classification only")
    _check_data(m, d)
    rep = cascade_contributions(m, d.features, layer)
    C = m.n_outputs
    per_class = np.full((C, m.n_features), np.nan)
    undefined = []
    for c in range(C):
        rows = d.response[:, c] == 1
        if not rows.any():
            undefined.append(c)
            continue
        per_class[c] = rep.contrib[rows, :, c].mean(axis=0)
    mdi = np.einsum("ikc,ic->k", rep.contrib, d.response) / d.n
    return ImportanceReport(mdi=mdi, method=f"local-mdi[{m.calibration}]",
                            per_class=per_class, undefined_classes=undefined,
                            dataset=d.name, feature_names=m.feature_names,
                            class_labels=m.class_labels)


def last_layer_total_mdi(m: CascadeModel, d: Dataset, layer=None):
    """Average over the layer's forests of their summed MDI over all inputs.

    The covariance-form MDI runs over each forest's ``K + K'`` inputs,
    on the same rows as :func:`cascade_mdi`.
    """
    _check_data(m, d)
    j = m.layer_index(layer)
    inputs, _ = forward(m, d.features, j + 1)
    forests = m.layers[j].forests
    return float(sum(forest_mdi(F, inputs[j], d.response).sum() for F in forests)
                 / len(forests))


# --- permutation importance --------------------------------------------------------

def predictive_score(pred, Y, task):
    """Accuracy for classification, negative mean squared error otherwise."""
    Y = np.asarray(Y, dtype=np.float64).reshape(pred.shape)
    if task == CLASSIFICATION:
        return float(np.mean(pred.argmax(axis=1) == Y.argmax(axis=1)))
    return -float(np.mean(((pred - Y) ** 2).sum(axis=1)))


def mda(predictor: Callable, d: Dataset, n_repeats: int = 5, seed: int = 0):
    """Mean decrease of the predictive score after permuting each feature column.

    ``predictor`` maps an ``(n, K)`` array to ``(n, C)`` predictions.
    """
    if n_repeats < 1:
        raise DataError("n_repeats must be >= 1")
    X, Y = d.features, d.response
    base = predictive_score(np.asarray(predictor(X)), Y, d.task)
    out = np.zeros(d.n_features)
    Xp = X.copy()
    for k in range(d.n_features):
        scores = []
        for r in range(n_repeats):
            Xp[:, k] = X[stream_rng(seed, k, r).permutation(d.n), k]
            scores.append(predictive_score(np.asarray(predictor(Xp)), Y, d.task))
        Xp[:, k] = X[:, k]
        out[k] = base - np.mean(scores)
    return out
