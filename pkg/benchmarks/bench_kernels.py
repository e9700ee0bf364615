"""Time each hot kernel under both backends.

    python3 benchmarks/bench_kernels.py [--repeat N]

Both variants are called directly, so ASTSPOOF_NO_NUMBA does not matter
here. The first numba call is made before timing to exclude compilation.
Outputs are compared so a fast but wrong kernel shows up immediately.
"""

import argparse
import time

import numpy as np
from scipy import signal

from astspoof import kernels


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def cases(rng):
    fs = 16000
    x = rng.standard_normal(10 * fs)
    sos = signal.butter(4, [300, 3400], btype="bandpass", fs=fs, output="sos")
    rir = ([6.0, 4.5, 3.0], [1.5, 2.0, 1.2], [4.0, 2.5, 1.6], 0.8, 12, fs, 343.0, 8000)
    spec = rng.standard_normal((1000, 128)).astype(np.float32)
    return [
        ("sosfilt 4th-order, 10 s",
         lambda: kernels.sosfilt_numba(sos, x), lambda: kernels.sosfilt_numpy(sos, x)),
        ("image-source rir, order 12",
         lambda: kernels.rir_numba(*rir), lambda: kernels.rir_numpy(*rir)),
        ("sinc resample x1.06, 10 s",
         lambda: kernels.sinc_resample_numba(x, 1.06, int(len(x) / 1.06)),
         lambda: kernels.sinc_resample_numpy(x, 1.06, int(len(x) / 1.06))),
        ("patches 1000x128",
         lambda: kernels.patches_numba(spec, 99, 12, 16, 10),
         lambda: kernels.patches_numpy(spec, 99, 12, 16, 10)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print(f"{'kernel':<30s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}  max|diff|")
    for name, fast, slow in cases(np.random.default_rng(0)):
        fast()
        t_fast, a = best_of(fast, args.repeat)
        t_slow, b = best_of(slow, args.repeat)
        diff = float(np.max(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64))))
        print(f"{name:<30s} {1e3 * t_fast:10.2f} {1e3 * t_slow:10.2f} "
              f"{t_slow / t_fast:7.1f}x  {diff:.1e}")


if __name__ == "__main__":
    main()
