"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--rows 512]

Both backends are imported directly, so the environment switch is not
needed. Prints one line per kernel with the median time of each backend
and the speed ratio, after checking that the outputs agree.
"""
import argparse
import statistics
import time

import numpy as np

from ltfsl import kernels


def cases(rows, classes, dim, rng):
    z = rng.standard_normal((rows, classes)) * 3
    y = rng.integers(0, classes, size=rows)
    alpha = rng.uniform(0.5, 2.0, size=classes)
    a = rng.standard_normal((rows, dim))
    b = rng.standard_normal((classes, dim))
    return {
        "logsumexp_rows": (z,),
        "log_softmax_rows": (z,),
        "softmax_xent": (z, y, alpha),
        "focal_xent": (z, y, alpha, 2.0),
        "sq_euclidean_matrix": (a, b),
        "cosine_matrix": (a, b),
    }


def median_time(fn, args, repeat):
    fn(*args)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def max_diff(x, y):
    if isinstance(x, tuple):
        return max(max_diff(a, b) for a, b in zip(x, y))
    return float(np.max(np.abs(np.asarray(x) - np.asarray(y))))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--rows", type=int, default=512)
    ap.add_argument("--classes", type=int, default=64)
    ap.add_argument("--dim", type=int, default=32)
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the python backend is available")
    data = cases(args.rows, args.classes, args.dim, np.random.default_rng(0))
    print(f"{'kernel':22s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, fargs in data.items():
        py = getattr(backends["python"], name)
        t_py = median_time(py, fargs, args.repeat) * 1e3
        if "cython" in backends:
            cy = getattr(backends["cython"], name)
            t_cy = median_time(cy, fargs, args.repeat) * 1e3
            diff = max_diff(py(*fargs), cy(*fargs))
            print(f"{name:22s} {t_py:10.3f} {t_cy:10.3f} {t_py / t_cy:8.2f} {diff:11.2e}")
        else:
            print(f"{name:22s} {t_py:10.3f} {'-':>10s} {'-':>8s} {'-':>11s}")


if __name__ == "__main__":
    main()
