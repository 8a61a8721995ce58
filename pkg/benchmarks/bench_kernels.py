"""Compare the numba and pure-numpy kernel paths.

Each kernel is timed in a fresh interpreter per path so the environment
flag is honoured at import time.  Usage::

    python3 benchmarks/bench_kernels.py [--repeat 5] [--end-to-end]
"""
import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, timeit
import numpy as np
from mbdecay import _kernels as K

repeat = int(sys.argv[1])
rng = np.random.default_rng(0)
N, m = 128, 2
blocks = rng.standard_normal((N, m, m))
dmat = rng.standard_normal((N, N))
paths = rng.standard_normal((40, 2000, 3))
x = np.sort(rng.uniform(0, 1, 200_000))
y = rng.standard_normal(x.size)
n = 2 * 64
band = np.zeros((4 * n, 201 * n))
blk = rng.standard_normal((n, n))

cases = {
    "pointwise_to_dense N=128": lambda: K.pointwise_to_dense(blocks),
    "pointwise_times_diff N=128": lambda: K.pointwise_times_diff(blocks, dmat),
    "sup_distance_matrix 40x2000": lambda: K.sup_distance_matrix(paths),
    "cumulative_trapezoid 2e5": lambda: K.cumulative_trapezoid(y, x),
    "fill_banded 200 blocks": lambda: [K.fill_banded(band, blk, k * n, k * n, 2 * n - 1) for k in range(200)],
}
out = {"numba": K.HAS_NUMBA}
for name, fn in cases.items():
    fn()  # warm-up (JIT compile or cache load)
    out[name] = min(timeit.repeat(fn, number=1, repeat=repeat))
print(json.dumps(out))
"""

E2E = r"""
import json, time
from mbdecay import floerlab as fl
_, chart, _, split = fl.radial_setup(64)
seed = fl.floer_seed(split, 1e-3)
fl.nonlinear_floer_solve(chart, split, seed, 1.0, 20)
t0 = time.perf_counter()
fl.nonlinear_floer_solve(chart, split, seed, 1.0, 200)
print(json.dumps({"newton N=64 M=200": time.perf_counter() - t0}))
"""


def run(code, pure, *args):
    env = dict(os.environ, MBDECAY_PURE_NUMPY="1" if pure else "0")
    out = subprocess.run([sys.executable, "-c", code, *args], env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--end-to-end", action="store_true", help="also time a full Newton solve")
    args = ap.parse_args()
    nb = run(WORKER, False, str(args.repeat))
    npy = run(WORKER, True, str(args.repeat))
    if args.end_to_end:
        nb.update(run(E2E, False))
        npy.update(run(E2E, True))
    if not nb.pop("numba"):
        print("numba unavailable: both columns use numpy", file=sys.stderr)
    npy.pop("numba")
    print(f"{'kernel':32s} {'numba [ms]':>11s} {'numpy [ms]':>11s} {'speedup':>8s}")
    for name in nb:
        a, b = nb[name] * 1e3, npy[name] * 1e3
        print(f"{name:32s} {a:11.3f} {b:11.3f} {b / a:8.2f}")


if __name__ == "__main__":
    main()
