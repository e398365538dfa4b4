"""Compiled extension vs numpy fallback on the three hot kernels.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints the best-of-N wall time per call for each backend and the speed-up.
"""

import argparse
import timeit

import numpy as np

from nltrack import _kernels

try:
    from nltrack import _ext
except ImportError:
    _ext = None


def cases():
    rng = np.random.default_rng(0)
    search = rng.normal(size=(24, 32, 32))
    kernel = rng.normal(size=(24, 16, 16))
    prev = rng.uniform(0, 255, (240, 320, 3))
    cur = np.ascontiguousarray(np.roll(prev, (3, -5), axis=(0, 1)))
    img = rng.integers(0, 256, (256, 256, 3), dtype=np.uint8)
    return {
        "depthwise_xcorr 24x32x32 * 24x16x16": lambda m: m.depthwise_xcorr(search, kernel),
        "sad_costs 16px block, radius 16": lambda m: m.sad_costs(prev, cur, 150, 110, 16, 16),
        "cell_stats 256x256 crop": lambda m: m.cell_stats(img, 8, 4.0),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _ext is None:
        print("compiled extension not built; only the numpy backend is timed")
    print(f"{'kernel':40s} {'numpy ms':>10s} {'compiled ms':>12s} {'speed-up':>9s}")
    for name, fn in cases().items():
        times = {}
        for label, mod in (("numpy", _kernels), ("compiled", _ext)):
            if mod is None:
                continue
            fn(mod)
            number = 3
            times[label] = min(timeit.repeat(lambda: fn(mod), number=number, repeat=args.repeat)) / number
        if "compiled" in times:
            a, b = fn(_kernels), fn(_ext)
            assert np.allclose(a, b, atol=1e-9, equal_nan=True), name
            print(f"{name:40s} {1e3 * times['numpy']:10.2f} {1e3 * times['compiled']:12.2f} "
                  f"{times['numpy'] / times['compiled']:8.1f}x")
        else:
            print(f"{name:40s} {1e3 * times['numpy']:10.2f} {'-':>12s} {'-':>9s}")


if __name__ == "__main__":
    main()
