"""Time the numba kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--sizes 10000 100000 1000000] [--repeat 5]

Both implementations are checked for identical output before timing. The
numba column excludes JIT compilation (one warm-up call per kernel).
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from dlpgate import _kernels as K


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[10_000, 100_000, 1_000_000])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("-k", type=int, default=8)
    ap.add_argument("-w", type=int, default=4)
    args = ap.parse_args(argv)
    if K.numba_impl is None:
        raise SystemExit("numba is not importable; nothing to compare")

    rng = np.random.default_rng(0)
    print(f"{'kernel':<14}{'bytes':>10}{'numpy ms':>12}{'numba ms':>12}{'speedup':>9}")
    for n in args.sizes:
        buf = rng.integers(97, 123, size=n, dtype=np.uint8)
        offsets = np.arange(n + 1, dtype=np.int64)
        hashes = K.numpy_impl.kgram_hashes(buf, offsets, args.k)
        cases = {
            "kgram_hashes": lambda impl: impl.kgram_hashes(buf, offsets, args.k),
            "winnow": lambda impl: impl.winnow(hashes, args.w),
            "histogram": lambda impl: impl.byte_histogram(buf),
        }
        for name, call in cases.items():
            ref, got = call(K.numpy_impl), call(K.numba_impl)  # also warms the JIT
            assert np.array_equal(ref, got), name
            t_np = best_of(lambda: call(K.numpy_impl), args.repeat)
            t_nb = best_of(lambda: call(K.numba_impl), args.repeat)
            print(f"{name:<14}{n:>10}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
