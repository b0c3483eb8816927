"""Compare the compiled and pure-numpy box-linking kernels.

    python3 benchmarks/bench_kernels.py --frames 100 300 --boxes 4 8
"""

import argparse
import time

import numpy as np

from nightadapt import _linking_py

try:
    from nightadapt import _linking as _linking_c
except ImportError:
    _linking_c = None


def instance(rng, n_frames, n_boxes):
    counts = np.full(n_frames, n_boxes, dtype=np.int64)
    m = int(counts.sum())
    boxes = np.column_stack([rng.uniform(0, 500, (m, 2)), rng.uniform(5, 80, (m, 2))])
    return boxes, counts


def best_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--frames", type=int, nargs="+", default=[50, 150, 300])
    ap.add_argument("--boxes", type=int, nargs="+", default=[4, 8])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    print(f"{'frames':>6} {'boxes':>5} {'python s':>10} {'cython s':>10} {'speedup':>8} same")
    for t in args.frames:
        for k in args.boxes:
            boxes, counts = instance(rng, t, k)
            tp, (cp, op) = best_time(lambda: _linking_py.link_boxes(boxes, counts, 1.0), args.repeat)
            if _linking_c is None:
                print(f"{t:>6} {k:>5} {tp:>10.4f} {'n/a':>10} {'n/a':>8} -")
                continue
            tc, (cc, oc) = best_time(lambda: _linking_c.link_boxes(boxes, counts, 1.0), args.repeat)
            same = bool(np.array_equal(cp, cc)) and abs(op - oc) <= 1e-12 * max(1.0, abs(op))
            print(f"{t:>6} {k:>5} {tp:>10.4f} {tc:>10.4f} {tp / tc:>8.1f} {same}")


if __name__ == "__main__":
    main()
