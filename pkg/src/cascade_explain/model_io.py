"""JSON persistence for forests and cascades, leaf contribution tables included.

Floats are written with Python's shortest round-trip representation, so
a save/load cycle reproduces every array bit for bit. Paths ending in
``.gz`` are gzip-compressed. The layout is documented in
``docs/MODEL_FORMAT.md``.
"""

import gzip
import json
import zlib
from typing import Union

import numpy as np

from .cascade import CascadeModel, Layer, LayerSchema
from .errors import InvariantViolation, ModelFormatError
from .forest import Forest, ForestParams
from .tree import Tree, TreeParams

FORMAT_NAME = "cascade-explain-model"
FORMAT_VERSION = 1


# --- encoding ---------------------------------------------------------------------

def _flat(a, dtype=float):
    return [dtype(v) for v in np.asarray(a).ravel().tolist()]


def _tree_doc(t: Tree):
    doc = {
        "n_features": int(t.n_features),
        "n_outputs": int(t.n_outputs),
        "feature": _flat(t.feature, int),
        "threshold": _flat(t.threshold),
        "left": _flat(t.left, int),
        "right": _flat(t.right, int),
        "n_node": _flat(t.n_node),
        "value": _flat(t.value),
        "depth": _flat(t.depth, int),
        "impurity_decrease": _flat(t.impurity_decrease),
        "leaf_contrib": None,
    }
    if t.leaf_contrib is not None:
        doc["leaf_contrib"] = {"n_original": int(t.leaf_contrib.shape[1]),
                               "data": _flat(t.leaf_contrib)}
    return doc


def _params_doc(p: ForestParams):
    tp = p.tree
    return {
        "n_trees": p.n_trees, "bootstrap": p.bootstrap, "kind": p.kind, "seed": int(p.seed),
        "tree": {"max_depth": tp.max_depth, "min_samples_split": tp.min_samples_split,
                 "min_samples_leaf": tp.min_samples_leaf,
                 "feature_mode": tp.feature_mode, "split_mode": tp.split_mode,
                 "seed_stream": int(tp.seed_stream)},
    }


def _forest_doc(f: Forest):
    doc = {"params": _params_doc(f.params), "n_features": int(f.n_features),
           "mu0": _flat(f.mu0), "trees": [_tree_doc(t) for t in f.trees],
           "oob_rows": None}
    if f.oob_masks is not None:
        doc["oob_rows"] = {"n_rows": int(f.oob_masks.shape[1]),
                           "rows": [np.flatnonzero(m).tolist() for m in f.oob_masks]}
    return doc


def _cascade_doc(m: CascadeModel):
    return {
        "task": m.task, "n_features": m.n_features, "n_outputs": m.n_outputs,
        "feature_names": list(m.feature_names),
        "class_labels": None if m.class_labels is None else list(m.class_labels),
        "mu0": _flat(m.mu0), "best_layer": m.best_layer, "metric": m.metric,
        "growth_log": [float(v) for v in m.growth_log], "seed": int(m.seed),
        "calibration": m.calibration,
        "calibration_residual": [float(v) for v in m.calibration_residual],
        "train_rows": None if m.train_rows is None else _flat(m.train_rows, int),
        "layers": [{"schema": L.schema.new_feature_map.tolist(),
                    "forests": [_forest_doc(F) for F in L.forests]} for L in m.layers],
    }


def model_to_json(m: Union[CascadeModel, Forest]) -> str:
    if isinstance(m, CascadeModel):
        kind, body = "cascade", _cascade_doc(m)
    elif isinstance(m, Forest):
        kind, body = "forest", _forest_doc(m)
    else:
        raise TypeError(f"cannot serialize {type(m).__name__}")
    doc = {"format": FORMAT_NAME, "format_version": FORMAT_VERSION, "kind": kind,
           "model": body}
    return json.dumps(doc, separators=(",", ":"), allow_nan=False)


def save_model(m: Union[CascadeModel, Forest], path) -> None:
    """Write ``m`` to ``path`` (gzip when the name ends with ``.gz``)."""
    text = model_to_json(m)
    path = str(path)
    if path.endswith(".gz"):
        # no name or mtime in the header keeps the bytes reproducible
        with open(path, "wb") as fh, gzip.GzipFile(filename="", fileobj=fh, mode="wb", mtime=0) as gz:
            gz.write(text.encode("utf-8"))
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


# --- decoding ---------------------------------------------------------------------

def _get(doc, key, where, kind=None):
    if not isinstance(doc, dict) or key not in doc:
        raise ModelFormatError(f"{where}: missing key {key!r}")
    v = doc[key]
    if kind is not None and v is not None and not isinstance(v, kind):
        raise ModelFormatError(f"{where}.{key}: expected {kind}, got {type(v).__name__}")
    return v


def _arr(doc, key, where, dtype, size=None):
    raw = _get(doc, key, where, list)
    try:
        a = np.array(raw, dtype=dtype)
    except (TypeError, ValueError):
        raise ModelFormatError(f"{where}.{key}: not a numeric array") from None
    if a.ndim != 1 or (size is not None and a.size != size):
        raise ModelFormatError(f"{where}.{key}: expected {size} flat entries, got shape {a.shape}")
    return a


def _tree_from(doc, where) -> Tree:
    p = _get(doc, "n_features", where, int)
    C = _get(doc, "n_outputs", where, int)
    feature = _arr(doc, "feature", where, np.int64)
    nn = feature.size
    if nn < 1 or C < 1 or p < 1:
        raise ModelFormatError(f"{where}: empty tree or bad dimensions")
    lc = _get(doc, "leaf_contrib", where, dict)
    table = None
    if lc is not None:
        K = _get(lc, "n_original", where + ".leaf_contrib", int)
        n_leaves = int((feature < 0).sum())
        table = _arr(lc, "data", where + ".leaf_contrib", np.float64,
                     n_leaves * K * C).reshape(n_leaves, K, C)
    t = Tree(feature=feature,
             threshold=_arr(doc, "threshold", where, np.float64, nn),
             left=_arr(doc, "left", where, np.int64, nn),
             right=_arr(doc, "right", where, np.int64, nn),
             n_node=_arr(doc, "n_node", where, np.float64, nn),
             value=_arr(doc, "value", where, np.float64, nn * C).reshape(nn, C),
             depth=_arr(doc, "depth", where, np.int64, nn),
             impurity_decrease=_arr(doc, "impurity_decrease", where, np.float64, nn),
             n_features=p, leaf_contrib=table)
    try:
        t.check()
    except InvariantViolation as exc:
        raise InvariantViolation(f"{where}: {exc}") from None
    return t


def _params_from(doc, where) -> ForestParams:
    td = _get(doc, "tree", where, dict)
    try:
        tp = TreeParams(max_depth=td["max_depth"], min_samples_split=td["min_samples_split"],
                        min_samples_leaf=td["min_samples_leaf"],
                        feature_mode=td["feature_mode"], split_mode=td["split_mode"],
                        seed_stream=td["seed_stream"])
        fp = ForestParams(n_trees=doc["n_trees"], tree=tp, bootstrap=doc["bootstrap"],
                          kind=doc["kind"], seed=doc["seed"])
    except KeyError as exc:
        raise ModelFormatError(f"{where}: missing key {exc.args[0]!r}") from None
    fp.validate()
    return fp


def _forest_from(doc, where) -> Forest:
    params = _params_from(_get(doc, "params", where, dict), where + ".params")
    p = _get(doc, "n_features", where, int)
    trees_doc = _get(doc, "trees", where, list)
    trees = [_tree_from(td, f"{where}.trees[{i}]") for i, td in enumerate(trees_doc)]
    if len(trees) != params.n_trees:
        raise InvariantViolation(f"{where}: {len(trees)} trees but n_trees={params.n_trees}")
    mu0 = _arr(doc, "mu0", where, np.float64)
    for i, t in enumerate(trees):
        if t.n_features != p or t.n_outputs != mu0.size:
            raise InvariantViolation(f"{where}.trees[{i}]: dimensions differ from the forest's")
    oob = _get(doc, "oob_rows", where, dict)
    masks = None
    if oob is not None:
        n_rows = _get(oob, "n_rows", where + ".oob_rows", int)
        rows = _get(oob, "rows", where + ".oob_rows", list)
        if len(rows) != len(trees):
            raise ModelFormatError(f"{where}.oob_rows: one row list per tree expected")
        masks = np.zeros((len(trees), n_rows), bool)
        for i, r in enumerate(rows):
            masks[i, np.asarray(r, dtype=np.int64)] = True
    if params.bootstrap != (masks is not None):
        raise InvariantViolation(f"{where}: OOB rows must be present iff bootstrap")
    if not params.bootstrap:
        for i, t in enumerate(trees):
            if not np.allclose(t.root_mean, mu0, rtol=0, atol=1e-9 * (1 + np.abs(mu0).max())):
                raise InvariantViolation(f"{where}.trees[{i}]: root mean differs from mu0 "
                                         "without bootstrap")
    return Forest(trees=trees, params=params, mu0=mu0, n_features=p, oob_masks=masks)


def _cascade_from(doc) -> CascadeModel:
    w = "model"
    K = _get(doc, "n_features", w, int)
    C = _get(doc, "n_outputs", w, int)
    mu0 = _arr(doc, "mu0", w, np.float64, C)
    layers = []
    prev_forests = 0
    for j, ld in enumerate(_get(doc, "layers", w, list)):
        lw = f"{w}.layers[{j}]"
        fmap = np.array(_get(ld, "schema", lw, list), dtype=np.int64).reshape(-1, 2)
        schema = LayerSchema(fmap)
        if j == 0 and schema.n_new:
            raise InvariantViolation(f"{lw}: layer 1 cannot have new features")
        if j > 0:
            try:
                schema.check(prev_forests, C)
            except Exception as exc:
                raise InvariantViolation(f"{lw}: {exc}") from None
        forests = [_forest_from(fd, f"{lw}.forests[{i}]")
                   for i, fd in enumerate(_get(ld, "forests", lw, list))]
        if not forests:
            raise InvariantViolation(f"{lw}: layer has no forests")
        for i, F in enumerate(forests):
            if F.n_features != K + schema.n_new or F.n_outputs != C:
                raise InvariantViolation(f"{lw}.forests[{i}]: expects {F.n_features} inputs, "
                                         f"layer provides {K + schema.n_new}")
            for t in F.trees:
                if t.leaf_contrib is not None and t.leaf_contrib.shape[1] != K:
                    raise InvariantViolation(f"{lw}.forests[{i}]: leaf table is not over "
                                             f"the {K} original features")
        layers.append(Layer(forests, schema))
        prev_forests = len(forests)
    best = _get(doc, "best_layer", w, int)
    if not 1 <= best <= len(layers):
        raise InvariantViolation(f"{w}: best_layer {best} outside 1..{len(layers)}")
    labels = _get(doc, "class_labels", w, list)
    rows = _get(doc, "train_rows", w, list)
    return CascadeModel(
        layers=layers, mu0=mu0, best_layer=best,
        growth_log=[float(v) for v in _get(doc, "growth_log", w, list)],
        n_features=K, task=_get(doc, "task", w, str), metric=_get(doc, "metric", w, str),
        feature_names=tuple(_get(doc, "feature_names", w, list)),
        class_labels=None if labels is None else tuple(labels),
        train_rows=None if rows is None else np.array(rows, dtype=np.int64),
        calibration=_get(doc, "calibration", w, str),
        calibration_residual=[float(v) for v in _get(doc, "calibration_residual", w, list)],
        seed=_get(doc, "seed", w, int))


def model_from_json(text: str) -> Union[CascadeModel, Forest]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[:exc.pos].encode("utf-8"))
        raise ModelFormatError(f"model file is not valid JSON at byte offset {offset}: "
                               f"{exc.msg}") from None
    if _get(doc, "format", "file") != FORMAT_NAME:
        raise ModelFormatError(f"not a {FORMAT_NAME} file")
    version = _get(doc, "format_version", "file", int)
    if version > FORMAT_VERSION:
        raise ModelFormatError(f"format_version {version} is newer than the supported "
                               f"version {FORMAT_VERSION}")
    if version < 1:
        raise ModelFormatError(f"invalid format_version {version}")
    kind = _get(doc, "kind", "file", str)
    body = _get(doc, "model", "file", dict)
    if kind == "cascade":
        return _cascade_from(body)
    if kind == "forest":
        return _forest_from(body, "model")
    raise ModelFormatError(f"unknown model kind {kind!r}")


def load_model(path) -> Union[CascadeModel, Forest]:
    """Read a model written by :func:`save_model` and validate every invariant."""
    path = str(path)
    try:
        if path.endswith(".gz"):
            with gzip.open(path, "rb") as fh:
                raw = fh.read()
        else:
            with open(path, "rb") as fh:
                raw = fh.read()
    except (EOFError, zlib.error, gzip.BadGzipFile) as exc:
        raise ModelFormatError(f"corrupt or truncated compressed model file: {exc}") from None
    except OSError as exc:
        raise ModelFormatError(f"cannot read model file {path}: {exc}") from None
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ModelFormatError(f"model file is not UTF-8 at byte offset {exc.start}") from None
    return model_from_json(text)
