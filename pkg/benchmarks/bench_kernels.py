"""Time the numba kernels against their pure-numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat N]

Both paths are imported from :mod:`lrc.kernels` directly, so the env flag does
not matter here. Results go to stdout as a small table.
"""
import argparse
import time

import numpy as np

from lrc import kernels
from lrc._accel import USE_NUMBA
from lrc.data import markov_transitions
from lrc.matcore import RngState


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases():
    rng = RngState(0)
    a = rng.normal((64, 32))
    yield ("jacobi_sweeps 64x32",
           lambda: kernels.jacobi_sweeps_np(a.copy(), 1e-12, 100),
           lambda: kernels.jacobi_sweeps_jit(a.copy(), 1e-12, 100))
    cum = np.cumsum(markov_transitions(7, 1, 64), axis=1)
    cum[:, -1] = 1.0
    u = rng.uniform(100_000)
    start = np.zeros(1, dtype=np.int64)
    yield ("markov_sample 1e5 tokens",
           lambda: kernels.markov_sample_np(cum, u, start, 1, 64),
           lambda: kernels.markov_sample_jit(cum, u, start, 1, 64))
    x = rng.normal((32, 16, 128))
    g = rng.normal(x.shape)
    _, t = kernels.gelu_fwd_np(x)
    yield ("gelu_fwd 32x16x128", lambda: kernels.gelu_fwd_np(x), lambda: kernels.gelu_fwd_jit(x))
    yield ("gelu_bwd 32x16x128", lambda: kernels.gelu_bwd_np(g, x, t), lambda: kernels.gelu_bwd_jit(g, x, t))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not USE_NUMBA:
        print("note: numba disabled for the library; the jit column still compiles its kernels")
    print(f"{'kernel':28s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, f_np, f_jit in cases():
        f_jit()  # compile / load from cache
        t_np = best_of(f_np, args.repeat)
        t_jit = best_of(f_jit, args.repeat)
        print(f"{name:28s} {t_np * 1e3:10.3f} {t_jit * 1e3:10.3f} {t_np / t_jit:8.1f}x")


if __name__ == "__main__":
    main()
