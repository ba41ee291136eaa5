"""Cascade of random forests with validation-driven depth.

Each layer's forests see the original features followed by the
prediction vectors of the previous layer's forests. Layers are added
until the validation metric stops improving for ``patience`` layers;
the model is then cut back to the best layer.
"""

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ._rng import derive_seed, stream_rng
from .dataset import CLASSIFICATION, Dataset
from .errors import DataError
from .forest import (BEST_SPLIT, FULLY_RANDOM, Forest, ForestParams, grow_forest,
                     predict_forest)
from .tree import TreeParams

ACCURACY = "accuracy"
MSE = "mse"
IMPROVEMENT_TOL = 1e-12


def default_layer(n_trees=50, max_depth=5, n_best=2, n_random=2):
    """``n_best`` best-split forests followed by ``n_random`` fully random ones."""
    tp = TreeParams(max_depth=max_depth)
    return tuple([ForestParams(n_trees=n_trees, tree=tp, kind=BEST_SPLIT, seed=i)
                  for i in range(n_best)]
                 + [ForestParams(n_trees=n_trees, tree=tp, kind=FULLY_RANDOM,
                                 seed=n_best + i) for i in range(n_random)])


@dataclass(frozen=True)
class CascadeConfig:
    forests_per_layer: Tuple[ForestParams, ...] = field(default_factory=default_layer)
    max_layers: int = 10
    patience: int = 2
    valid_fraction: float = 0.2
    metric: Optional[str] = None
    seed: int = 0
    calibration: str = "partial"
    epsilon: float = 1e-12
    attribution: bool = True
    threads: Optional[int] = None

    def validate(self):
        if not self.forests_per_layer:
            raise DataError("a layer needs at least one forest")
        if self.max_layers < 1:
            raise DataError("max_layers must be >= 1")
        if self.patience < 1:
            raise DataError("patience must be >= 1")
        if not 0.0 < self.valid_fraction < 1.0:
            raise DataError("valid_fraction must lie in (0, 1)")
        if self.metric not in (None, ACCURACY, MSE):
            raise DataError(f"unknown metric {self.metric!r}")
        for fp in self.forests_per_layer:
            fp.validate()
            if fp.bootstrap:
                raise DataError("cascade forests are trained without bootstrap so "
                                "every tree's root mean equals mu0")

    def metric_for(self, task):
        if self.metric is not None:
            return self.metric
        return ACCURACY if task == CLASSIFICATION else MSE


def paper_small_config(seed=0, **overrides):
    """4 forests x 50 trees of depth 5."""
    return replace(CascadeConfig(forests_per_layer=default_layer(50, 5), seed=seed),
                   **overrides)


def paper_bench_config(seed=0, **overrides):
    """4 forests x 50 trees of depth 8."""
    return replace(CascadeConfig(forests_per_layer=default_layer(50, 8), seed=seed),
                   **overrides)


@dataclass(frozen=True)
class LayerSchema:
    """``new_feature_map[i] = (forest, class)`` for augmented input ``K + i``."""

    new_feature_map: np.ndarray

    @classmethod
    def build(cls, n_forests, n_outputs):
        grid = [(f, c) for f in range(n_forests) for c in range(n_outputs)]
        return cls(np.array(grid, dtype=np.int64).reshape(-1, 2))

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 2), dtype=np.int64))

    @property
    def n_new(self):
        return self.new_feature_map.shape[0]

    def check(self, n_forests, n_outputs):
        pairs = {tuple(r) for r in self.new_feature_map.tolist()}
        expected = {(f, c) for f in range(n_forests) for c in range(n_outputs)}
        if len(pairs) != self.n_new or pairs != expected:
            raise DataError("layer schema is not a bijection onto "
                            "(previous-layer forest, class) pairs")


@dataclass
class Layer:
    forests: List[Forest]
    schema: LayerSchema


@dataclass
class CascadeModel:
    layers: List[Layer]
    mu0: np.ndarray
    best_layer: int
    growth_log: List[float]
    n_features: int
    task: str
    metric: str
    feature_names: Tuple[str, ...]
    class_labels: Optional[Tuple[str, ...]] = None
    train_rows: Optional[np.ndarray] = None
    calibration: Optional[str] = None
    calibration_residual: List[float] = field(default_factory=list)
    seed: int = 0

    @property
    def n_outputs(self):
        return self.mu0.shape[0]

    @property
    def n_layers(self):
        return len(self.layers)

    def layer_index(self, layer=None):
        """0-based index for a 1-based ``layer`` (default: best layer)."""
        j = self.best_layer if layer is None else int(layer)
        if not 1 <= j <= self.n_layers:
            raise DataError(f"layer {j} outside 1..{self.n_layers}")
        return j - 1

    @property
    def has_attribution(self):
        return all(t.leaf_contrib is not None
                   for L in self.layers for F in L.forests for t in F.trees)


def augment_features(x, prev_outputs: Sequence[np.ndarray], schema: LayerSchema):
    """Original features followed by the new features in schema order.

    ``x`` is ``(m, K)`` (or a single ``K``-vector) and ``prev_outputs``
    holds one ``(m, C)`` (or ``C``) prediction per previous-layer forest.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    outs = [np.atleast_2d(np.asarray(o, dtype=np.float64)) for o in prev_outputs]
    if any(o.ndim != 2 or o.shape[0] != xb.shape[0] for o in outs):
        raise DataError("previous-layer outputs do not match the number of rows")
    fm = schema.new_feature_map
    if fm.size and (fm[:, 0].max() >= len(outs)
                    or any(fm[:, 1].max() >= o.shape[1] for o in outs)):
        raise DataError("schema does not match the previous layer's outputs")
    if len(outs) * (outs[0].shape[1] if outs else 0) != schema.n_new:
        raise DataError(f"schema expects {schema.n_new} new features, previous layer "
                        f"provides {sum(o.shape[1] for o in outs)}")
    new = np.empty((xb.shape[0], schema.n_new))
    for i, (f, c) in enumerate(fm):
        new[:, i] = outs[f][:, c]
    res = np.hstack([xb, new])
    return res[0] if single else res


def _check_input(m: CascadeModel, X):
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    Xb = X[None, :] if single else X
    if Xb.ndim != 2 or Xb.shape[1] != m.n_features:
        raise DataError(f"expected {m.n_features} features, got shape {X.shape}")
    return Xb, single


def forward(m: CascadeModel, X, upto=None):
    """Per-layer ``(inputs, outputs)`` for layers ``1..upto``.

    ``outputs[j]`` has shape ``(n_forests, m, C)``.
    """
    X, _ = _check_input(m, X)
    last = m.layer_index(upto)
    inputs, outputs = [], []
    cur = X
    for j in range(last + 1):
        layer = m.layers[j]
        if j > 0:
            cur = augment_features(X, outputs[-1], layer.schema)
        inputs.append(cur)
        outputs.append(np.stack([predict_forest(F, cur) for F in layer.forests]))
    return inputs, outputs


def predict_cascade(m: CascadeModel, X, layer=None):
    """Average of the forests of ``layer`` (default: the best layer)."""
    Xb, single = _check_input(m, X)
    _, outputs = forward(m, Xb, layer)
    pred = outputs[-1].mean(axis=0)
    return pred[0] if single else pred


def score(pred, Y, metric):
    Y = np.asarray(Y, dtype=np.float64).reshape(pred.shape)
    if metric == ACCURACY:
        return float(np.mean(pred.argmax(axis=1) == Y.argmax(axis=1)))
    return float(np.mean(((pred - Y) ** 2).sum(axis=1)))


def improves(new, best, metric):
    if best is None:
        return True
    if metric == ACCURACY:
        return new > best + IMPROVEMENT_TOL
    return new < best - IMPROVEMENT_TOL


def internal_split(n, valid_fraction, seed):
    n_valid = int(np.floor(n * valid_fraction + 0.5))
    if n_valid < 1 or n - n_valid < 1:
        raise DataError(f"validation split too small: n={n}, valid_fraction={valid_fraction}")
    perm = stream_rng(seed, 0xC0FFEE).permutation(n)
    return np.sort(perm[n_valid:]), np.sort(perm[:n_valid])


def fit_cascade(d: Dataset, cfg: CascadeConfig = CascadeConfig()) -> CascadeModel:
    """Grow layers until validation stops improving; keep layers up to the best one.

    Builds the leaf contribution tables with ``cfg.calibration`` unless
    ``cfg.attribution`` is false.
    """
    cfg.validate()
    metric = cfg.metric_for(d.task)
    train_rows, valid_rows = internal_split(d.n, cfg.valid_fraction, cfg.seed)
    X_tr, Y_tr = d.features[train_rows], d.response[train_rows]
    X_va, Y_va = d.features[valid_rows], d.response[valid_rows]
    C = d.n_outputs
    n_forests = len(cfg.forests_per_layer)

    layers, log = [], []
    best, best_score, stale = 0, None, 0
    cur_tr, cur_va = X_tr, X_va
    for j in range(cfg.max_layers):
        schema = LayerSchema.empty() if j == 0 else LayerSchema.build(n_forests, C)
        if j > 0:
            cur_tr = augment_features(X_tr, out_tr, schema)
            cur_va = augment_features(X_va, out_va, schema)
        forests = []
        for i, fp in enumerate(cfg.forests_per_layer):
            fp = replace(fp, seed=derive_seed(cfg.seed, j + 1, i, fp.seed))
            forests.append(grow_forest(cur_tr, Y_tr, fp, cfg.threads))
        layers.append(Layer(forests, schema))
        out_tr = [predict_forest(F, cur_tr) for F in forests]
        out_va = [predict_forest(F, cur_va) for F in forests]
        s = score(np.mean(out_va, axis=0), Y_va, metric)
        log.append(s)
        if improves(s, best_score, metric):
            best, best_score, stale = j, s, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    model = CascadeModel(layers=layers[:best + 1], mu0=Y_tr.mean(axis=0),
                         best_layer=best + 1, growth_log=log, n_features=d.n_features,
                         task=d.task, metric=metric, feature_names=d.feature_names,
                         class_labels=d.class_labels, train_rows=train_rows,
                         seed=cfg.seed)
    if cfg.attribution:
        from .attribution import build_attribution

        model = build_attribution(model, d, cfg.calibration, cfg.epsilon, cfg.threads)
    return model


def truncate(m: CascadeModel, layer: int) -> CascadeModel:
    """A copy of ``m`` that stops at ``layer`` (1-based)."""
    j = m.layer_index(layer)
    return replace(m, layers=m.layers[:j + 1], best_layer=j + 1,
                   calibration_residual=m.calibration_residual[:j + 1])


def split_features_used(m: CascadeModel, layer=None):
    """Boolean mask of original features split on anywhere up to ``layer``."""
    used = np.zeros(m.n_features, bool)
    for L in m.layers[:m.layer_index(layer) + 1]:
        for F in L.forests:
            for t in F.trees:
                f = t.feature[t.feature >= 0]
                used[f[f < m.n_features]] = True
    return used
