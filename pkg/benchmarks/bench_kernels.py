"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N] [--simulate]

``--simulate`` also times a short end-to-end run in a subprocess once per
backend, toggling NPP_FEDSIM_PURE_NUMPY.
"""

import argparse
import os
import subprocess
import sys
import tempfile
import time

import numpy as np

from npp_fedsim import kernels
from npp_fedsim._jit import NUMBA_AVAILABLE


def best_of(fn, args, repeat):
    fn(*args)  # warm up (and compile)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    key = rng.integers(0, 2**32, 8, dtype=np.uint64).astype(np.uint32)
    nonce = rng.integers(0, 2**32, 3, dtype=np.uint64).astype(np.uint32)
    W, b = rng.normal(size=(5, 7)), rng.normal(size=5)
    X, y = rng.normal(size=(32, 7)), rng.integers(0, 5, 32)
    Xb, yb = rng.normal(size=(4000, 7)), rng.integers(0, 5, 4000)
    centers = rng.uniform(0, 80, (16, 2))
    amps = rng.uniform(0, 5000, (16, 3))
    radii = rng.uniform(3, 6, 16)
    active = np.ones(16, dtype=bool)
    verts = rng.uniform(0, 40, (20, 2))
    return [
        ("chacha20 1 block", "chacha20_blocks", (key, nonce, 1, 1)),
        ("chacha20 64 blocks", "chacha20_blocks", (key, nonce, 1, 64)),
        ("softmax grad batch 32", "softmax_xent_grad", (W, b, X, y)),
        ("softmax grad n=4000", "softmax_xent_grad", (W, b, Xb, yb)),
        ("plume 1 point", "plume_sum", (rng.uniform(0, 80, (1, 2)), centers, amps, radii, active)),
        ("plume 10k points", "plume_sum", (rng.uniform(0, 80, (10_000, 2)), centers, amps, radii, active)),
        ("polyline 10k points", "polyline_distance", (rng.uniform(0, 40, (10_000, 2)), verts)),
    ]


def time_simulation(pure_numpy, sessions):
    env = dict(os.environ, NPP_FEDSIM_PURE_NUMPY="1" if pure_numpy else "0")
    with tempfile.TemporaryDirectory() as out:
        cmd = [sys.executable, "-m", "npp_fedsim", "simulate", "--sessions", str(sessions), "--out", out]
        t0 = time.perf_counter()
        subprocess.run(cmd, env=env, check=True, capture_output=True)
        return time.perf_counter() - t0


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--simulate", action="store_true")
    ap.add_argument("--sessions", type=int, default=3)
    args = ap.parse_args()

    if not NUMBA_AVAILABLE:
        print("numba is not installed; the *_numba variants run as plain python")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}{'numba (us)':>12}{'numpy (us)':>12}{'speedup':>10}")
    for label, name, fargs in cases(rng):
        t_nb = best_of(getattr(kernels, name + "_numba"), fargs, args.repeat)
        t_np = best_of(getattr(kernels, name + "_numpy"), fargs, args.repeat)
        print(f"{label:<24}{t_nb * 1e6:>12.1f}{t_np * 1e6:>12.1f}{t_np / t_nb:>9.1f}x")

    if args.simulate:
        print()
        for pure in (False, True):
            t = time_simulation(pure, args.sessions)
            print(f"simulate {args.sessions} sessions, {'numpy' if pure else 'numba'} backend: {t:.2f} s")


if __name__ == "__main__":
    main()
