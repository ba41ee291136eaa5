"""Importance-quality metrics and the relevant-feature benchmark harness."""

import csv
import json
import re
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.stats import rankdata

from ._rng import derive_seed, stream_rng
from .attribution import build_attribution, cascade_mdi, mda
from .cascade import fit_cascade, paper_bench_config, paper_small_config, predict_cascade
from .dataset import GENERATORS, Dataset, load_csv, permute_augment
from .errors import CascadeError, DataError
from .forest import (ForestParams, forest_mdi_classic, forest_mdi_oob, grow_forest,
                     predict_forest)
from .tree import TreeParams

METHODS = ("MDI_RF", "MDIoob_RF", "MDA_RF", "MDA_DF", "MDI_DF")
CALIBRATIONS = ("partial", "additive", "multiplicative")
RESULT_COLUMNS = ("dataset", "method", "run", "seed", "metric", "value",
                  "train_ms", "importance_ms")
_METHOD_RE = re.compile(r"^(MDI_RF|MDIoob_RF|MDA_RF|MDA_DF|MDI_DF)(?:\((\w+)\))?$")


def relevant_feature_auc(scores, relevant_mask):
    """ROC AUC of ``scores`` for separating relevant from irrelevant features.

    Ties get midranks, so the value is P(s_rel > s_irr) + P(s_rel = s_irr) / 2.
    """
    s = np.asarray(scores, dtype=np.float64)
    mask = np.asarray(relevant_mask, dtype=bool)
    if s.shape != mask.shape or s.ndim != 1:
        raise DataError("scores and relevant_mask must be vectors of equal length")
    n_pos = int(mask.sum())
    n_neg = mask.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("relevant_mask needs both relevant and irrelevant features")
    if np.isnan(s).any():
        raise DataError("scores contain NaN")
    ranks = rankdata(s)
    return float((ranks[mask].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def ranked_pair_score(scores):
    """Fraction of pairs ``i < j`` with ``scores[i] < scores[j]``; ties count 1/2.

    The true importance is assumed to increase with the feature index.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size < 2:
        raise DataError("ranked_pair_score needs at least two scores")
    i, j = np.triu_indices(s.size, k=1)
    hits = (s[i] < s[j]) + 0.5 * (s[i] == s[j])
    return float(hits.mean())


def _parse_method(name):
    m = _METHOD_RE.match(name)
    if not m:
        raise DataError(f"unknown benchmark method {name!r}; expected one of {METHODS}, "
                        "with MDI_DF optionally suffixed by (partial|additive|multiplicative)")
    base, cal = m.groups()
    if cal is not None and (base != "MDI_DF" or cal not in CALIBRATIONS):
        raise DataError(f"bad calibration suffix in {name!r}")
    return base, (cal or "partial") if base == "MDI_DF" else None


@dataclass(frozen=True)
class BenchmarkSpec:
    """One benchmark: a data source, a set of methods and a run count.

    With ``generator`` set, every run draws ``n_train + n_valid`` fresh
    rows. With ``csv_path`` set, the file is optionally widened by
    permuted copies (``augment``), then ``train_fraction`` of the rows
    are kept for training and an equally sized disjoint set for
    validation. Validation rows are used by the MDA methods only.
    """

    generator: Optional[str] = "sim"
    generator_args: Dict[str, int] = field(default_factory=dict)
    csv_path: Optional[str] = None
    label_column: str = "y"
    task: str = "classification"
    augment: bool = False
    train_fraction: float = 0.5
    n_train: int = 1000
    n_valid: int = 1000
    methods: Tuple[str, ...] = ("MDI_RF", "MDIoob_RF", "MDA_RF", "MDA_DF", "MDI_DF")
    n_runs: int = 20
    seed: int = 0
    metric: str = "auc"
    rf_trees: int = 200
    rf_max_depth: Optional[int] = None
    df_preset: str = "paper-bench"
    df_max_layers: int = 10
    mda_repeats: int = 5
    threads: Optional[int] = None

    def validate(self):
        if self.n_runs < 1:
            raise DataError("n_runs must be >= 1")
        if (self.generator is None) == (self.csv_path is None):
            raise DataError("give exactly one of generator or csv_path")
        if self.generator is not None and self.generator not in GENERATORS:
            raise DataError(f"unknown generator {self.generator!r}")
        if not self.methods:
            raise DataError("no methods requested")
        for mth in self.methods:
            _parse_method(mth)
        if self.metric not in ("auc", "ranked_pairs"):
            raise DataError(f"unknown metric {self.metric!r}")
        if self.df_preset not in ("paper-small", "paper-bench"):
            raise DataError(f"unknown preset {self.df_preset!r}")
        if self.n_train < 1 or self.n_valid < 0 or self.mda_repeats < 1:
            raise DataError("n_train >= 1, n_valid >= 0 and mda_repeats >= 1 required")
        if not 0 < self.train_fraction <= 0.5:
            raise DataError("train_fraction must lie in (0, 0.5] so validation fits")

    @classmethod
    def from_dict(cls, doc):
        known = set(cls.__dataclass_fields__)
        bad = set(doc) - known
        if bad:
            raise DataError(f"unknown benchmark spec keys: {sorted(bad)}")
        doc = dict(doc)
        if "methods" in doc:
            doc["methods"] = tuple(doc["methods"])
        spec = cls(**doc)
        spec.validate()
        return spec


@dataclass
class BenchmarkResult:
    rows: List[dict]
    failures: List[dict]
    spec: BenchmarkSpec

    def values(self, method):
        return np.array([r["value"] for r in self.rows
                         if r["method"] == method and np.isfinite(r["value"])])

    def summary(self):
        out = {}
        for mth in dict.fromkeys(r["method"] for r in self.rows):
            v = self.values(mth)
            sel = [r for r in self.rows if r["method"] == mth]
            out[mth] = {
                "n": int(v.size),
                "mean": float(v.mean()) if v.size else None,
                "stderr": float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0,
                "train_ms": float(np.mean([r["train_ms"] for r in sel])),
                "importance_ms": float(np.mean([r["importance_ms"] for r in sel])),
            }
        return {"metric": self.spec.metric, "n_runs": self.spec.n_runs,
                "methods": out, "failures": self.failures}

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k])
                            for k in RESULT_COLUMNS})

    def write_summary(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=1)

    def format_summary(self):
        lines = [f"{'method':<26}{'n':>4}{'mean':>9}{'stderr':>9}{'train ms':>11}{'imp ms':>10}"]
        for mth, s in self.summary()["methods"].items():
            mean = "nan" if s["mean"] is None else f"{s['mean']:.4f}"
            lines.append(f"{mth:<26}{s['n']:>4}{mean:>9}{s['stderr']:>9.4f}"
                         f"{s['train_ms']:>11.1f}{s['importance_ms']:>10.1f}")
        return "\n".join(lines)


def run_data(spec: BenchmarkSpec, run: int, base: Optional[Dataset] = None):
    """Training and validation data of run ``run``."""
    seed = derive_seed(spec.seed, run)
    if spec.generator is not None:
        gen = GENERATORS[spec.generator]
        d = gen(spec.n_train + spec.n_valid, seed=seed, **spec.generator_args)
        n_tr = spec.n_train
    else:
        d = base if base is not None else load_csv(spec.csv_path, spec.label_column, spec.task)
        if spec.augment:
            d = permute_augment(d, seed)
        n_tr = max(1, int(np.floor(d.n * spec.train_fraction + 0.5)))
    perm = stream_rng(seed, 7).permutation(d.n)
    tr = np.sort(perm[:n_tr])
    va = np.sort(perm[n_tr:2 * n_tr]) if spec.generator is None else np.sort(perm[n_tr:])
    return seed, d.take(tr), (d.take(va) if va.size else None)


def _metric(spec, scores, d):
    if spec.metric == "auc":
        if d.relevant_mask is None:
            raise DataError("AUC needs a relevant-feature mask")
        return relevant_feature_auc(scores, d.relevant_mask)
    return ranked_pair_score(scores)


def rf_params(spec: BenchmarkSpec, seed):
    tp = TreeParams(max_depth=spec.rf_max_depth)
    return ForestParams(n_trees=spec.rf_trees, tree=tp, bootstrap=True, seed=seed)


def df_config(spec: BenchmarkSpec, seed):
    make = paper_bench_config if spec.df_preset == "paper-bench" else paper_small_config
    return make(seed=seed, max_layers=spec.df_max_layers, attribution=False,
                threads=spec.threads)


def _ms(t0):
    return (time.perf_counter() - t0) * 1e3


def run_single(spec: BenchmarkSpec, run: int, base: Optional[Dataset] = None):
    """Rows and failures of one run: one row per requested method."""
    seed, tr, va = run_data(spec, run, base)
    rows, failures = [], []
    cache = {}

    def rf():
        if "rf" not in cache:
            t0 = time.perf_counter()
            cache["rf"] = (grow_forest(tr.features, tr.response, rf_params(spec, seed),
                                       spec.threads), _ms(t0))
        return cache["rf"]

    def df():
        if "df" not in cache:
            t0 = time.perf_counter()
            cache["df"] = (fit_cascade(tr, df_config(spec, seed)), _ms(t0))
        return cache["df"]

    def need_valid():
        if va is None:
            raise DataError("MDA needs validation rows")
        return va

    for name in spec.methods:
        base_m, cal = _parse_method(name)
        label = f"MDI_DF({cal})" if base_m == "MDI_DF" else base_m
        try:
            if base_m.endswith("_RF"):
                model, train_ms = rf()
            else:
                model, train_ms = df()
            t0 = time.perf_counter()
            if base_m == "MDI_RF":
                scores = forest_mdi_classic(model)
            elif base_m == "MDIoob_RF":
                scores = forest_mdi_oob(model, tr.features, tr.response)
            elif base_m == "MDA_RF":
                scores = mda(lambda X: predict_forest(model, X), need_valid(),
                             spec.mda_repeats, seed)
            elif base_m == "MDA_DF":
                scores = mda(lambda X: predict_cascade(model, X), need_valid(),
                             spec.mda_repeats, seed)
            else:
                # layer-training rows only; the cascade's internal validation rows are held out
                explained = build_attribution(model, tr, cal, threads=spec.threads)
                scores = cascade_mdi(explained, tr.take(model.train_rows)).mdi
            imp_ms = _ms(t0)
            value = _metric(spec, scores, tr)
        except CascadeError as exc:
            failures.append({"run": run, "method": label, "error": str(exc)})
            value, train_ms, imp_ms = float("nan"), 0.0, 0.0
        rows.append({"dataset": spec.generator or spec.csv_path, "method": label,
                     "run": run, "seed": seed, "metric": spec.metric,
                     "value": float(value), "train_ms": float(train_ms),
                     "importance_ms": float(imp_ms)})
    return rows, failures


def run_benchmark(spec: BenchmarkSpec, progress=None) -> BenchmarkResult:
    """Run ``spec.n_runs`` independent runs; deterministic given ``spec``.

    ``progress``, if given, is called with each finished run index.
    """
    spec.validate()
    base = None
    if spec.csv_path is not None:
        base = load_csv(spec.csv_path, spec.label_column, spec.task)
    rows, failures = [], []
    for r in range(spec.n_runs):
        rr, ff = run_single(spec, r, base)
        rows.extend(rr)
        failures.extend(ff)
        if progress is not None:
            progress(r)
    return BenchmarkResult(rows, failures, spec)
