"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeats 20]

Each kernel is checked for identical output before it is timed.  The numba
column is measured after one warm-up call, so JIT compilation is excluded.
"""
import argparse
import time

import numpy as np

from lsfa import _kernels


def best_ms(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1000.0 * min(times)


def cases(rng):
    cur = rng.integers(0, 256, (3, 128, 128)).astype(np.int16)
    ref = np.roll(cur, (2, -3), axis=(1, 2))
    feat = rng.normal(size=(32, 8, 8))
    flow8 = rng.normal(0, 2, size=(2, 8, 8))
    big = rng.normal(size=(2, 32, 128, 128))
    flow128 = rng.normal(0, 4, size=(2, 2, 128, 128))
    return [
        ("block_match 128x128 r=8", lambda: _kernels.block_match(cur, ref, 16, 8)),
        ("gather 32x8x8", lambda: _kernels.gather(feat, flow8)),
        ("scatter 32x8x8", lambda: _kernels.scatter(feat, flow8)),
        ("gather 2x32x128x128", lambda: _kernels.gather(big, flow128)),
        ("scatter 2x32x128x128", lambda: _kernels.scatter(big, flow128)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()
    if not _kernels.NUMBA_AVAILABLE:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<26}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, fn in cases(rng):
        with _kernels.use_backend("numpy"):
            a = fn()
            t_np = best_ms(fn, args.repeats)
        with _kernels.use_backend("numba"):
            b = fn()
            t_nb = best_ms(fn, args.repeats)
        if not np.allclose(a, b, rtol=0, atol=1e-12):
            raise SystemExit(f"{name}: backends disagree")
        print(f"{name:<26}{t_np:>10.3f}{t_nb:>10.3f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
