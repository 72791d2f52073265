"""Time the compiled post-processing kernels against the pure-Python ones.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one row per kernel with the median wall time of each backend and the
speed-up. Results are checked for equality before timing.
"""

import argparse
import statistics
import time

import numpy as np

from repurpose_loc import _pykernels

try:
    from repurpose_loc import _ckernels
except ImportError:
    _ckernels = None


def _candidates(rng, n, duration=3600.0):
    start = rng.uniform(0, duration - 150, n)
    end = start + rng.uniform(20, 150, n)
    return start, end, rng.uniform(0.5, 1.0, n), np.arange(n, dtype=np.int64)


def _pooled(rng, videos=200, preds_per_video=12, gt_per_video=4):
    pv = np.repeat(np.arange(videos, dtype=np.int64), preds_per_video)
    ps, pe, _, _ = _candidates(rng, len(pv))
    gt_ptr = np.arange(0, (videos + 1) * gt_per_video, gt_per_video, dtype=np.int64)
    gs, ge, _, _ = _candidates(rng, videos * gt_per_video)
    return pv, ps, pe, gt_ptr, gs, ge, 0.5


def _median_time(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=7)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    if _ckernels is None:
        raise SystemExit("compiled kernels not built; run `pip install --no-build-isolation -e .` first")

    rng = np.random.default_rng(args.seed)
    s, e, sc, src = _candidates(rng, 600)
    cases = {
        "tiou_matrix 600x600": (s, e, s, e),
        "soft_nms 600 candidates": (s, e, sc, src, 0.5, 1e-3),
        "greedy_match 2400 preds": _pooled(rng),
    }
    print(f"{'kernel':<26}{'python ms':>12}{'cython ms':>12}{'speed-up':>10}")
    for name, call_args in cases.items():
        kernel = name.split()[0]
        py_fn, c_fn = getattr(_pykernels, kernel), getattr(_ckernels, kernel)
        for a, b in zip(np.atleast_1d(py_fn(*call_args)), np.atleast_1d(c_fn(*call_args))):
            np.testing.assert_array_equal(a, b)
        t_py = _median_time(py_fn, call_args, args.repeat)
        t_c = _median_time(c_fn, call_args, args.repeat)
        print(f"{name:<26}{1e3 * t_py:>12.2f}{1e3 * t_c:>12.2f}{t_py / t_c:>9.1f}x")


if __name__ == "__main__":
    main()
