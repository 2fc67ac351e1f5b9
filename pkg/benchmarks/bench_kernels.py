"""Compare the compiled and pure-Python kernel backends.

    python benchmarks/bench_kernels.py [--repeat 5]

Times batched assignment (the shape used by the permutation-invariant loss)
and silhouette values (the shape used at evaluation), checks that both
backends agree, and prints one row per workload.
"""

import argparse
import time

import numpy as np

from carl.kernels import _slow

try:
    from carl.kernels import _fast
except ImportError:
    _fast = None


def _time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def workloads(rng):
    yield "match_batch B=64 R<=3 K=4", "match_batch", (rng.random((64, 3, 4)), rng.integers(0, 4, 64))
    yield "match_batch B=256 R<=4 K=6", "match_batch", (rng.random((256, 4, 6)), rng.integers(0, 5, 256))
    yield "match_batch B=1024 R<=8 K=8", "match_batch", (rng.random((1024, 8, 8)), rng.integers(0, 9, 1024))
    for n in (1000, 4000):
        x = rng.normal(size=(n, 64))
        yield f"silhouette N={n} d=64 C=10", "silhouette_samples", (x, rng.integers(0, 10, n))


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, atol=1e-9)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if _fast is None:
        print("compiled backend not built; only the Python fallback is available")
    rng = np.random.default_rng(args.seed)
    print(f"{'workload':32s} {'python (s)':>11s} {'cython (s)':>11s} {'speedup':>8s}  agree")
    for name, fn_name, call_args in workloads(rng):
        t_slow, out_slow = _time(lambda: getattr(_slow, fn_name)(*call_args), args.repeat)
        if _fast is None:
            print(f"{name:32s} {t_slow:11.4f} {'--':>11s} {'--':>8s}  --")
            continue
        t_fast, out_fast = _time(lambda: getattr(_fast, fn_name)(*call_args), args.repeat)
        print(f"{name:32s} {t_slow:11.4f} {t_fast:11.4f} {t_slow / t_fast:7.1f}x  {_same(out_slow, out_fast)}")


if __name__ == "__main__":
    main()
