"""Compare the numba kernels with their pure-numpy fallbacks.

Run with ``python benchmarks/bench_kernels.py``.  Prints a comma-delimited
table of best-of-``repeat`` wall times and checks the two backends agree
bit for bit.
"""

import argparse
import time

import numpy as np

from dronpe import _kernels
from dronpe.simulators import LV_DT, LV_N_OBS, LV_T_END, LV_X0, LV_Y0, sample_prior


def best_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def bench_lv(rows, repeat):
    theta = sample_prior("lotka_volterra", rows, np.random.default_rng(0))
    n_steps = int(round(LV_T_END / LV_DT))
    stride = n_steps // LV_N_OBS
    args = (theta, LV_X0, LV_Y0, LV_DT, n_steps, stride)
    _kernels.lv_observe_numba(*args)  # compile outside the timing
    t_nb, a = best_time(lambda: _kernels.lv_observe_numba(*args), repeat)
    t_np, b = best_time(lambda: _kernels.lv_observe_numpy(*args), repeat)
    same = np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    return t_nb, t_np, same


def bench_counts(rows, m, repeat):
    rng = np.random.default_rng(1)
    samples = rng.normal(size=(rows, m))
    ref = rng.normal(size=rows)
    _kernels.count_less_numba(samples, ref)
    t_nb, a = best_time(lambda: _kernels.count_less_numba(samples, ref), repeat)
    t_np, b = best_time(lambda: _kernels.count_less_numpy(samples, ref), repeat)
    return t_nb, t_np, np.array_equal(a, b)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--rows", type=int, default=2048)
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args(argv)
    print("kernel,rows,numba_s,numpy_s,speedup,identical")
    for name, (t_nb, t_np, same) in [
        ("lv_observe", bench_lv(args.rows, args.repeat)),
        ("count_less_M1000", bench_counts(args.rows, 1000, args.repeat)),
    ]:
        print(f"{name},{args.rows},{t_nb:.4f},{t_np:.4f},{t_np / t_nb:.2f},{same}")


if __name__ == "__main__":
    main()
