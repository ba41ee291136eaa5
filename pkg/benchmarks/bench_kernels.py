"""Time the numba kernels against their numpy fallbacks.

Each kernel runs once to warm up (compiling on first use), then the
best of ``--repeat`` timings is reported per backend. Outputs of the
two backends are compared before timing.

    python benchmarks/bench_kernels.py --n 2000 --repeat 3
"""

import argparse
import time

import numpy as np

from cascade_explain import _kernels
from cascade_explain.attribution import build_attribution
from cascade_explain.cascade import fit_cascade, paper_small_config
from cascade_explain.dataset import gen_sim, gen_sincos
from cascade_explain.forest import ForestParams, grow_forest
from cascade_explain.tree import TreeParams


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(n):
    sim = gen_sim(n, seed=0)
    sincos = gen_sincos(n, seed=0)
    rf = ForestParams(n_trees=20, tree=TreeParams(), bootstrap=True, seed=1)
    cfg = paper_small_config(seed=0, max_layers=3, attribution=False)
    cascade = fit_cascade(sincos, cfg)
    return {
        "grow 20 full trees (sim, K=50)":
            lambda: grow_forest(sim.features, sim.response, rf),
        "apply 20 trees": _apply_case(sim, rf),
        "leaf tables, 3 layers x 200 trees":
            lambda: build_attribution(cascade, sincos, "partial"),
    }


def _apply_case(d, params):
    forest = grow_forest(d.features, d.response, params)

    def run():
        for t in forest.trees:
            t.apply(d.features)
    return run


def check_agreement(n):
    d = gen_sim(n, seed=3)
    fp = ForestParams(n_trees=3, tree=TreeParams(max_depth=8), seed=2)
    out = {}
    for name in ("numba", "numpy"):
        _kernels.set_backend(name)
        f = grow_forest(d.features, d.response, fp)
        out[name] = [(t.feature, t.threshold) for t in f.trees]
    same = all(np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
               for a, b in zip(out["numba"], out["numpy"]))
    print(f"backends grow identical trees: {same}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=1000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if not _kernels.HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    check_agreement(min(args.n, 500))
    _kernels.set_backend("numba")
    work = cases(args.n)
    print(f"{'kernel':<36}{'numba s':>10}{'numpy s':>10}{'speedup':>9}")
    for label, fn in work.items():
        timings = {}
        for name in ("numba", "numpy"):
            _kernels.set_backend(name)
            timings[name] = best_of(fn, args.repeat)
        print(f"{label:<36}{timings['numba']:>10.3f}{timings['numpy']:>10.3f}"
              f"{timings['numpy'] / timings['numba']:>8.1f}x")
    _kernels.set_backend("numba")


if __name__ == "__main__":
    main()
