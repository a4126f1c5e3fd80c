"""Benchmark the selective-scan kernels: numba against the pure-numpy path.

Run:  python3 benchmarks/bench_scan.py
The active path at import follows PHASEFLOW_NUMBA; both implementations are
called explicitly here regardless, so one process covers the comparison.
"""

import time

import numpy as np

from phaseflow import kernels


def make_inputs(rng, bsz, t_len, d, n, dtype):
    return (
        (10.0 ** rng.uniform(-3, -0.5, (bsz, t_len, d))).astype(dtype),
        (-np.exp(rng.uniform(-1, 1, (d, n)))).astype(dtype),
        rng.standard_normal((bsz, t_len, n)).astype(dtype),
        rng.standard_normal((bsz, t_len, n)).astype(dtype),
        rng.standard_normal((bsz, t_len, d)).astype(dtype),
    )


def timeit(fn, reps):
    fn()  # warm up / compile
    t0 = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - t0) / reps


def main():
    rng = np.random.default_rng(0)
    print(f"numba path active: {kernels.USE_NUMBA}")
    header = (f"{'shape':>24s} {'dtype':>8s} "
              f"{'np fwd':>9s} {'nb fwd':>9s} {'np bwd':>9s} {'nb bwd':>9s} "
              f"{'fwd x':>6s} {'bwd x':>6s}")
    print(header)
    for bsz, t_len, d, n in ((4, 32, 64, 16), (16, 50, 128, 16),
                             (16, 50, 512, 16)):
        for dtype in (np.float64, np.float32):
            delta, a, bm, cm, w = make_inputs(rng, bsz, t_len, d, n, dtype)
            reps = max(2, int(2e7 / (bsz * t_len * d * n)))

            _, h = kernels._scan_forward_np(delta, a, bm, cm, w)
            gy = rng.standard_normal((bsz, t_len, d)).astype(dtype)

            t_np_f = timeit(lambda: kernels._scan_forward_np(delta, a, bm, cm, w),
                            reps)
            t_np_b = timeit(
                lambda: kernels._scan_backward_np(gy, delta, a, bm, cm, w, h),
                reps)
            if kernels.USE_NUMBA:
                t_nb_f = timeit(lambda: kernels.scan_forward(delta, a, bm, cm, w),
                                reps)
                t_nb_b = timeit(
                    lambda: kernels.scan_backward(gy, delta, a, bm, cm, w, h),
                    reps)
            else:
                t_nb_f = t_nb_b = float("nan")
            print(f"{str((bsz, t_len, d, n)):>24s} {np.dtype(dtype).name:>8s} "
                  f"{t_np_f * 1e3:8.2f}m {t_nb_f * 1e3:8.2f}m "
                  f"{t_np_b * 1e3:8.2f}m {t_nb_b * 1e3:8.2f}m "
                  f"{t_np_f / t_nb_f:6.2f} {t_np_b / t_nb_b:6.2f}")


if __name__ == "__main__":
    main()
