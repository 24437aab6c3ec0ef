"""Compare the numba kernels with their pure-numpy fallbacks.

Kernel timings run both backends in one process.  The end-to-end timing
runs a Gibbs fit in two subprocesses, one with ``SANMISS_DISABLE_NUMBA=1``.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--n 5000] [--iters 300]
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from sanmiss import _kernels

GIBBS_SNIPPET = """
import json, time
import numpy as np
from sanmiss import _kernels
from sanmiss.inference import AuxInfo, GibbsConfig, InferenceModelSpec, gibbs_fit
from sanmiss.san import FullDataModel, SanSpec, make_rng, random_joint, simulate
from sanmiss.tables import build_space
space = build_space([("x", 2), ("y1", 3), ("y2", 2)], ["y1", "y2"])
rng = make_rng(1)
san = SanSpec(space, "logit", 3)
san = san.with_coefficients(rng.normal(0.0, 0.8, size=san.n_coef))
model = FullDataModel(random_joint(space, rng), san)
ds = simulate(model, {n}, 2)
kappa = model.joint.transpose(["x", "y1", "y2"]).mass.sum(axis=0).ravel()
spec = InferenceModelSpec(SanSpec(space, "logit", 3), AuxInfo.known(kappa))
gibbs_fit(spec, ds, GibbsConfig(n_iter=20, burn_in=5))   # warm-up / compile
t0 = time.perf_counter()
gibbs_fit(spec, ds, GibbsConfig(n_iter={iters}, burn_in=0, seed=3))
print(json.dumps({{"backend": _kernels.backend(), "seconds": time.perf_counter() - t0}}))
"""


def best_of(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def kernel_rows(repeat):
    rng = np.random.default_rng(0)
    rows = []

    psi = rng.normal(scale=2.0, size=2000)
    ones = np.ones(psi.size, dtype=np.int64)
    _kernels._pg_sum_numba(ones, psi, 1)
    rows.append(("PG(1, z) x 2000",
                 best_of(lambda: _kernels._pg_sum_numba(ones, psi, 1), repeat, 5),
                 best_of(lambda: _kernels.pg1_numpy(psi, rng), repeat, 5)))

    counts = rng.integers(0, 400, size=24).astype(np.int64)
    psi24 = rng.normal(size=24)
    _kernels._pg_sum_numba(counts, psi24, 1)

    def numpy_sum():
        draws = _kernels.pg1_numpy(np.repeat(psi24, counts), rng)
        return np.bincount(np.repeat(np.arange(24), counts), weights=draws, minlength=24)

    rows.append((f"PG sums, {int(counts.sum())} draws in 24 cells",
                 best_of(lambda: _kernels._pg_sum_numba(counts, psi24, 1), repeat, 5),
                 best_of(numpy_sum, repeat, 5)))

    feats = rng.integers(-1, 40, size=(5000, 4))
    w = rng.random(5000)
    _kernels._onehot_gram_numba(feats, w, 40)
    rows.append(("one-hot Gram 5000 x 4 -> 40 x 40",
                 best_of(lambda: _kernels._onehot_gram_numba(feats, w, 40), repeat, 20),
                 best_of(lambda: _kernels._onehot_gram_numpy(feats, w, 40), repeat, 20)))

    A = rng.normal(size=(30, 30))
    prec = A @ A.T + 30 * np.eye(30)
    rhs, z = rng.normal(size=30), rng.normal(size=30)
    _kernels._precision_draw_numba(prec, rhs, z)
    rows.append(("Gaussian draw from 30 x 30 precision",
                 best_of(lambda: _kernels._precision_draw_numba(prec, rhs, z), repeat, 200),
                 best_of(lambda: _kernels._precision_draw_numpy(prec, rhs, z), repeat, 200)))
    return rows


def gibbs_row(n, iters):
    code = GIBBS_SNIPPET.format(n=n, iters=iters)
    out = {}
    for flag in ("0", "1"):
        env = dict(os.environ, SANMISS_DISABLE_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True,
                             text=True, check=True)
        rec = json.loads(res.stdout.strip().splitlines()[-1])
        out[rec["backend"]] = rec["seconds"]
    return (f"Gibbs fit, n={n}, {iters} iterations", out.get("numba"), out.get("numpy"))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--n", type=int, default=5000)
    ap.add_argument("--iters", type=int, default=300)
    ap.add_argument("--skip-gibbs", action="store_true")
    args = ap.parse_args(argv)

    if not _kernels.HAVE_NUMBA:
        sys.exit("numba is unavailable or disabled; nothing to compare")
    rows = kernel_rows(args.repeat)
    if not args.skip_gibbs:
        rows.append(gibbs_row(args.n, args.iters))
    width = max(len(r[0]) for r in rows)
    print(f"{'case':<{width}}  {'numba':>11}  {'numpy':>11}  {'speedup':>8}")
    for name, a, b in rows:
        print(f"{name:<{width}}  {a * 1e3:>9.3f}ms  {b * 1e3:>9.3f}ms  {b / a:>7.1f}x")


if __name__ == "__main__":
    main()
