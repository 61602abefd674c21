"""Compiled vs fallback evaluation kernels.

    python3 benchmarks/bench_kernels.py [--size 512] [--repeat 20]

Prints the median wall time per call for each kernel and backend, and checks
that both backends agree on the outputs.
"""

import argparse
import statistics
import time

import numpy as np

from waterlog._kernels import _pykernels

try:
    from waterlog._kernels import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def timeit(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times), out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=int, default=512)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--thresholds", type=int, default=99)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    n = args.size
    probs = rng.random(n * n)
    gt = (rng.random(n * n) < 0.3).astype(np.uint8)
    pred = (probs >= 0.5).astype(np.uint8)
    thr = np.arange(1, args.thresholds + 1, dtype=np.float64) / (args.thresholds + 1)
    blobs = np.ascontiguousarray((rng.random((n, n)) < 0.45).astype(np.uint8))

    cases = {
        "confusion_counts": lambda m: m.confusion_counts(pred, gt),
        "threshold_histogram": lambda m: m.threshold_histogram(probs, gt, thr),
        "label_components": lambda m: m.label_components(blobs),
    }
    backends = {"python": _pykernels}
    if _ckernels is not None:
        backends["cython"] = _ckernels
    else:
        print("compiled extension not available; timing the fallback only")

    print(f"{n}x{n} pixels, {args.thresholds} thresholds, median of {args.repeat}")
    print(f"{'kernel':<22}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    for name, call in cases.items():
        row, outs = [], {}
        for b, mod in backends.items():
            t, outs[b] = timeit(lambda: call(mod), args.repeat)
            row.append(t)
        if len(outs) == 2:
            a, c = outs["python"], outs["cython"]
            if name == "label_components":
                same = a[1] == c[1] and np.array_equal(a[0], c[0])
            elif name == "threshold_histogram":
                same = all(np.array_equal(x, y) for x, y in zip(a, c))
            else:
                same = tuple(a) == tuple(c)
            assert same, f"{name}: backends disagree"
        speed = f"{row[0] / row[1]:>9.1f}x" if len(row) == 2 else ""
        print(f"{name:<22}" + "".join(f"{t * 1e3:>10.2f}ms" for t in row) + speed)


if __name__ == "__main__":
    main()
