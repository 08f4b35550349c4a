"""Compare the numba and pure-numpy box kernels.

    python benchmarks/bench_kernels.py [--boxes 50 200 1000] [--repeat 20]

Each kernel runs on identical random boxes through both paths; outputs are
checked for equality before timings are reported.  The first numba call is
made before timing so compilation is excluded.
"""

import argparse
import time

import numpy as np

from synthzsd import _kernels as K


def random_boxes(rng, n, size=200.0):
    xy = rng.uniform(0, size * 0.8, (n, 2))
    wh = rng.uniform(size * 0.05, size * 0.3, (n, 2))
    return np.hstack([xy, xy + wh])


def best_time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench(n, repeat, rng):
    boxes = random_boxes(rng, n)
    gts = random_boxes(rng, max(1, n // 10))
    cases = {
        "iou_matrix": lambda jit: K.iou_matrix(boxes, boxes, use_numba=jit),
        "nms_sorted": lambda jit: K.nms_sorted(boxes, 0.5, use_numba=jit),
        "greedy_match": lambda jit: K.greedy_match(boxes, gts, 0.5, use_numba=jit),
    }
    rows = []
    for name, run in cases.items():
        a, b = run(True), run(False)
        for x, y in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
            np.testing.assert_array_equal(x, y)
        t_jit = best_time(lambda: run(True), repeat)
        t_np = best_time(lambda: run(False), repeat)
        rows.append((name, n, t_jit, t_np))
    return rows


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--boxes", type=int, nargs="+", default=[50, 200, 1000])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not installed")
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<14}{'boxes':>7}{'numba ms':>11}{'numpy ms':>11}{'speedup':>9}")
    for n in args.boxes:
        for name, n_, t_jit, t_np in bench(n, args.repeat, rng):
            print(f"{name:<14}{n_:>7}{t_jit * 1e3:>11.3f}{t_np * 1e3:>11.3f}{t_np / t_jit:>8.1f}x")


if __name__ == "__main__":
    main()
