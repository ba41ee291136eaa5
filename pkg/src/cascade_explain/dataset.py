"""Datasets: CSV ingestion, synthetic generators and benchmark manipulations."""

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from ._rng import stream_rng
from .errors import DataError

REGRESSION = "regression"
CLASSIFICATION = "classification"
TASKS = (REGRESSION, CLASSIFICATION)


@dataclass(frozen=True)
class Dataset:
    """Feature matrix ``(n, K)`` plus response matrix ``(n, C)``.

    For classification the response is one-hot, columns in the order of
    ``class_labels``. Arrays are made read-only on construction.
    """

    features: np.ndarray
    response: np.ndarray
    task: str
    feature_names: Tuple[str, ...]
    relevant_mask: Optional[np.ndarray] = None
    class_labels: Optional[Tuple[str, ...]] = None
    name: str = field(default="data", compare=False)

    def __post_init__(self):
        X = np.array(self.features, dtype=np.float64, ndmin=2)
        Y = np.array(self.response, dtype=np.float64)
        if Y.ndim == 1:
            Y = Y[:, None]
        if self.task not in TASKS:
            raise DataError(f"unknown task {self.task!r}")
        n, K = X.shape
        if n < 1 or K < 1 or Y.shape[1] < 1:
            raise DataError("dataset needs n >= 1 rows and K >= 1 features")
        if Y.shape[0] != n:
            raise DataError(f"{n} feature rows but {Y.shape[0]} response rows")
        if self.task == REGRESSION and Y.shape[1] != 1:
            raise DataError("regression requires a single response column")
        if self.task == CLASSIFICATION:
            if not (np.all((Y == 0) | (Y == 1)) and np.all(Y.sum(axis=1) == 1)):
                raise DataError("classification response rows must be one-hot")
            labels = self.class_labels or tuple(str(c) for c in range(Y.shape[1]))
            if len(labels) != Y.shape[1]:
                raise DataError("class_labels length does not match response columns")
            object.__setattr__(self, "class_labels", tuple(labels))
        names = tuple(self.feature_names) if self.feature_names else tuple(
            f"x{k + 1}" for k in range(K))
        if len(names) != K:
            raise DataError(f"{len(names)} feature names for {K} features")
        object.__setattr__(self, "feature_names", names)
        if self.relevant_mask is not None:
            mask = np.asarray(self.relevant_mask, dtype=bool)
            if mask.shape != (K,):
                raise DataError("relevant_mask must have one entry per feature")
            mask.setflags(write=False)
            object.__setattr__(self, "relevant_mask", mask)
        X.setflags(write=False)
        Y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "response", Y)

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def n_features(self):
        return self.features.shape[1]

    @property
    def n_outputs(self):
        return self.response.shape[1]

    def take(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.features[rows], self.response[rows], self.task,
                       self.feature_names, self.relevant_mask, self.class_labels,
                       self.name)

    def total_variance(self):
        """Mean squared distance of the responses to their mean."""
        Y = self.response
        return float(((Y - Y.mean(axis=0)) ** 2).sum(axis=1).mean())


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 1.0
    valid_fraction: float = 0.0
    test_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        fr = (self.train_fraction, self.valid_fraction, self.test_fraction)
        if any(not 0.0 <= f <= 1.0 for f in fr):
            raise DataError(f"split fractions must lie in [0, 1], got {fr}")
        if abs(sum(fr) - 1.0) > 1e-12:
            raise DataError(f"split fractions must sum to 1, got {sum(fr)!r}")


# --- CSV ----------------------------------------------------------------------

def _parse_float(cell, line, col):
    text = cell.strip()
    if not text:
        raise DataError(f"row {line}, column {col!r}: empty cell")
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"row {line}, column {col!r}: not a number: {text!r}") from None
    if not math.isfinite(v):
        raise DataError(f"row {line}, column {col!r}: non-finite value {text!r}")
    return v


def load_csv(path, label_column: str, task: str = REGRESSION,
             classes: Optional[Sequence[str]] = None) -> Dataset:
    """Read a comma-separated file with a header row.

    Classification labels are one-hot encoded in first-seen order unless
    ``classes`` fixes the order. Row numbers in errors are file lines
    (the header is line 1).
    """
    if task not in TASKS:
        raise DataError(f"unknown task {task!r}")
    try:
        fh = open(path, newline="", encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file, no header row") from None
        if label_column not in header:
            raise DataError(f"{path}: label column {label_column!r} not in header {header}")
        li = header.index(label_column)
        names = [h for i, h in enumerate(header) if i != li]
        if not names:
            raise DataError(f"{path}: no feature columns")
        rows, labels = [], []
        for line, rec in enumerate(reader, start=2):
            if not rec or (len(rec) == 1 and not rec[0].strip()):
                continue
            if len(rec) != len(header):
                raise DataError(f"row {line}: expected {len(header)} cells, got {len(rec)}")
            rows.append([_parse_float(c, line, header[i])
                         for i, c in enumerate(rec) if i != li])
            lab = rec[li].strip()
            if not lab:
                raise DataError(f"row {line}, column {label_column!r}: empty label")
            labels.append(lab if task == CLASSIFICATION
                          else _parse_float(lab, line, label_column))
    if not rows:
        raise DataError(f"{path}: no data rows")
    X = np.array(rows, dtype=np.float64)
    if task == REGRESSION:
        return Dataset(X, np.array(labels), task, tuple(names), name=str(path))
    order = list(classes) if classes is not None else list(dict.fromkeys(labels))
    index = {c: i for i, c in enumerate(order)}
    Y = np.zeros((len(rows), len(order)))
    for r, lab in enumerate(labels):
        if lab not in index:
            raise DataError(f"row {r + 2}: unknown class label {lab!r}")
        Y[r, index[lab]] = 1.0
    return Dataset(X, Y, task, tuple(names), class_labels=tuple(order), name=str(path))


def _column_order(header, wanted, path):
    missing = [c for c in wanted if c not in header]
    if missing:
        raise DataError(f"{path}: columns {header} do not match the model's features "
                        f"{list(wanted)}; missing {missing}")
    return [header.index(c) for c in wanted]


def load_instances(path, feature_names: Sequence[str], label_column: Optional[str] = None):
    """Read the feature columns named ``feature_names`` (in that order) as ``(m, K)``.

    Columns are matched by header name. ``label_column``, if present, is
    ignored; any other extra column is a schema error. A file with no
    data rows, or no bytes at all, gives an empty ``(0, K)`` array.
    """
    K = len(feature_names)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            return np.zeros((0, K))
        extra = [h for h in header if h not in feature_names and h != label_column]
        if extra or len(header) - (label_column in header) != K:
            raise DataError(f"{path}: expected columns {list(feature_names)}, got {header}")
        cols = _column_order(header, feature_names, path)
        rows = []
        for line, rec in enumerate(reader, start=2):
            if not rec or (len(rec) == 1 and not rec[0].strip()):
                continue
            if len(rec) != len(header):
                raise DataError(f"row {line}: expected {len(header)} cells, got {len(rec)}")
            rows.append([_parse_float(rec[i], line, header[i]) for i in cols])
    return np.array(rows, dtype=np.float64).reshape(len(rows), K)


def reorder_features(d: Dataset, feature_names: Sequence[str]) -> Dataset:
    """Columns of ``d`` rearranged to ``feature_names``; extra columns are an error."""
    names = list(d.feature_names)
    if sorted(names) != sorted(feature_names) or len(set(names)) != len(names):
        raise DataError(f"{d.name}: columns {names} do not match the model's features "
                        f"{list(feature_names)}")
    cols = _column_order(names, feature_names, d.name)
    mask = None if d.relevant_mask is None else d.relevant_mask[cols]
    return Dataset(d.features[:, cols], d.response, d.task, tuple(feature_names), mask,
                   d.class_labels, d.name)


def write_csv(d: Dataset, path, label_column="y"):
    """Write ``d`` in the format :func:`load_csv` reads (full float precision)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(d.feature_names) + [label_column])
        if d.task == CLASSIFICATION:
            labels = [d.class_labels[i] for i in d.response.argmax(axis=1)]
        else:
            labels = [repr(float(v)) for v in d.response[:, 0]]
        for row, lab in zip(d.features, labels):
            w.writerow([repr(float(v)) for v in row] + [lab])


# --- generators ---------------------------------------------------------------

def sincos_response(X):
    X = np.asarray(X, dtype=np.float64)
    return np.sin(2 * np.pi * X[..., 0]) + np.cos(2 * np.pi * X[..., 1])


def linear_response(X):
    X = np.asarray(X, dtype=np.float64)
    return X @ np.arange(1, X.shape[-1] + 1, dtype=np.float64)


def threeclass_index(X):
    """Class index 0, 1, 2 (labels "1", "2", "3") from the first two features."""
    X = np.asarray(X, dtype=np.float64)
    x1, x2 = X[..., 0], X[..., 1]
    return np.where(x1 < 0.5, 0, np.where(x2 >= 0.5, 1, 2))


def logistic(z):
    return 1.0 / (1.0 + np.exp(-z))


def sim_probability(X, relevant):
    """P(Y=1 | X) for the sim data; ``relevant`` holds 0-based feature indices."""
    X = np.asarray(X, dtype=np.float64)
    idx = np.asarray(relevant, dtype=np.int64)
    return logistic(0.4 * (X[..., idx] / (idx + 1)).sum(axis=-1) - 1.0)


def sim_labels(X, relevant, seed: int = 0):
    """Bernoulli draws of Y=1 with the sim probability; ``(n,)`` booleans."""
    p = sim_probability(X, relevant)
    return stream_rng(seed, 3).uniform(size=p.shape[0]) < p


def _names(K):
    return tuple(f"x{k + 1}" for k in range(K))


def gen_sincos(n: int, seed: int = 0) -> Dataset:
    if n < 1:
        raise DataError("n must be >= 1")
    X = stream_rng(seed, 1).uniform(size=(n, 2))
    return Dataset(X, sincos_response(X), REGRESSION, _names(2),
                   relevant_mask=np.ones(2, bool), name="sincos")


def gen_linear(n: int, K: int, seed: int = 0) -> Dataset:
    if n < 1 or K < 1:
        raise DataError("n and K must be >= 1")
    X = stream_rng(seed, 1).uniform(size=(n, K))
    return Dataset(X, linear_response(X), REGRESSION, _names(K),
                   relevant_mask=np.ones(K, bool), name="linear")


def gen_threeclass(n: int, noise_dims: int = 100, seed: int = 0) -> Dataset:
    if n < 3 or noise_dims < 0:
        raise DataError("need n >= 3 and noise_dims >= 0")
    X = stream_rng(seed, 1).uniform(size=(n, 2 + noise_dims))
    Y = np.eye(3)[threeclass_index(X)]
    mask = np.zeros(2 + noise_dims, bool)
    mask[:2] = True
    return Dataset(X, Y, CLASSIFICATION, _names(2 + noise_dims), relevant_mask=mask,
                   class_labels=("1", "2", "3"), name="threeclass")


SIM_FEATURES = 50


def gen_sim(n: int, seed: int = 0, relevant: Optional[Sequence[int]] = None) -> Dataset:
    """Binary logistic data with 50 discrete features of growing cardinality.

    Feature ``j`` (1-based) is uniform on ``{0, ..., j}``. Five relevant
    features are drawn from the first ten unless ``relevant`` (0-based)
    is given.
    """
    if n < 1:
        raise DataError("n must be >= 1")
    K = SIM_FEATURES
    rng = stream_rng(seed, 1)
    X = np.column_stack([rng.integers(0, j + 1, size=n) for j in range(1, K + 1)])
    X = X.astype(np.float64)
    if relevant is None:
        relevant = np.sort(stream_rng(seed, 2).choice(10, size=5, replace=False))
    relevant = np.asarray(relevant, dtype=np.int64)
    y = sim_labels(X, relevant, seed)
    mask = np.zeros(K, bool)
    mask[relevant] = True
    return Dataset(X, np.eye(2)[y.astype(np.int64)], CLASSIFICATION, _names(K),
                   relevant_mask=mask, class_labels=("0", "1"), name="sim")


GENERATORS = {
    "sincos": gen_sincos,
    "linear": gen_linear,
    "threeclass": gen_threeclass,
    "sim": gen_sim,
}


# --- manipulations ------------------------------------------------------------

def permute_augment(d: Dataset, seed: int = 0) -> Dataset:
    """Append an independently shuffled copy of every feature column."""
    K = d.n_features
    copies = np.column_stack([stream_rng(seed, k).permutation(d.features[:, k])
                              for k in range(K)])
    mask = np.concatenate([np.ones(K, bool), np.zeros(K, bool)])
    names = d.feature_names + tuple(f"{nm}_perm" for nm in d.feature_names)
    return Dataset(np.hstack([d.features, copies]), d.response, d.task, names,
                   relevant_mask=mask, class_labels=d.class_labels, name=d.name)


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def split(d: Dataset, spec: SplitSpec):
    """Seeded disjoint (train, valid, test) row partition.

    Valid and test sizes are rounded to nearest; train takes the rest.
    Rows keep their original relative order inside each part. An empty
    part is returned as ``None``.
    """
    n = d.n
    n_valid = _round_half_up(n * spec.valid_fraction)
    n_test = _round_half_up(n * spec.test_fraction)
    n_train = n - n_valid - n_test
    for size, frac, nm in ((n_train, spec.train_fraction, "train"),
                           (n_valid, spec.valid_fraction, "valid"),
                           (n_test, spec.test_fraction, "test")):
        if frac > 0 and size < 1:
            raise DataError(f"{nm} partition would be empty (n={n}, fraction={frac})")
    perm = stream_rng(spec.seed, 0).permutation(n)
    parts = np.split(perm, [n_train, n_train + n_valid])
    return tuple(d.take(np.sort(p)) if p.size else None for p in parts)


def subsample(d: Dataset, fraction: float, seed: int = 0) -> Dataset:
    """Keep a seeded random ``fraction`` of the rows (at least one)."""
    if not 0 < fraction <= 1:
        raise DataError("fraction must lie in (0, 1]")
    k = max(1, _round_half_up(d.n * fraction))
    rows = np.sort(stream_rng(seed, 0).choice(d.n, size=k, replace=False))
    return d.take(rows)
