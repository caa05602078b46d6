"""Time the compiled tracing kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--rays N] [--repeat R]

Both backends run on identical inputs and their results are compared
bit for bit before any timing is reported.
"""

from __future__ import annotations

import argparse
import sys
import timeit

import numpy as np

from raysurrogate import kernels
from raysurrogate.augmentation import fibonacci_sphere
from raysurrogate.scenes import generate_room


def inputs(n_rays: int, seed: int = 0):
    scene = generate_room(seed=seed, n_walls=4)
    axes, planes = scene.packed
    rng = np.random.default_rng(seed)
    origins = rng.uniform(scene.bounds_min + 0.5, scene.bounds_max - 0.5, size=(n_rays, 3))
    dirs = fibonacci_sphere(n_rays)
    ends = origins + 3.0 * dirs
    p = (scene.bounds_min + scene.bounds_max) / 2.0
    return origins, dirs, axes, planes, ends, p


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rays", type=int, default=16384)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if kernels.BACKEND != "cython":
        print("compiled extension not available; only the numpy fallback can run", file=sys.stderr)
        return 1
    origins, dirs, axes, planes, ends, p = inputs(args.rays)

    cases = {
        "first_hits": lambda b: kernels.first_hits(origins, dirs, axes, planes, backend=b),
        "segment_point_distances": lambda b: kernels.segment_point_distances(origins, ends, p, backend=b),
    }
    print(f"{'kernel':<26}{'numpy ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, fn in cases.items():
        for a, b in zip(fn("python"), fn(None)):
            if not np.array_equal(a, b):
                print(f"{name}: backends disagree", file=sys.stderr)
                return 2
        t_py = min(timeit.repeat(lambda: fn("python"), number=1, repeat=args.repeat)) * 1e3
        t_c = min(timeit.repeat(lambda: fn(None), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<26}{t_py:>12.3f}{t_c:>12.3f}{t_py / t_c:>9.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
