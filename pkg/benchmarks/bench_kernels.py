#!/usr/bin/env python3
"""Benchmark the accelerated kernels against the numpy reference path.

Run:  python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel is timed on workloads shaped like real fitting/simulation
use.  The accelerated path is warmed once before timing so one-off JIT
compilation is not counted.
"""

import argparse
import time

import numpy as np

from pimg.kernels import _numpy as knp

try:
    from pimg.kernels import _numba as knb
except ImportError:
    knb = None


def timeit(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def workloads():
    rng = np.random.default_rng(0)

    q = rng.uniform(0, 1, (200_000, 2))
    p = rng.uniform(0, 1, (600, 2))
    yield "nearest_neighbor (200k x 600)", lambda k: k.nearest_neighbor(q, p)

    poly = _star(64)
    pts = rng.uniform(-1.2, 1.2, (100_000, 2))
    yield "point_in_polygon (64-gon, 100k pts)", \
        lambda k: k.point_in_polygon(poly, pts)

    from scipy.spatial import Delaunay
    from pimg import meshing
    verts = rng.uniform(0, 1, (2_000, 2))
    tris = Delaunay(verts).simplices.astype(np.int64)
    g = meshing.build_bucket_grid(verts, tris)
    qq = rng.uniform(0, 1, (250_000, 2))
    yield "locate_in_triangles (4k tris, 250k pts)", \
        lambda k: k.locate_in_triangles(verts, tris, qq, g.start, g.items,
                                        g.nx, g.ny, g.x0, g.y0, g.bw, g.bh)

    n = 400
    pos0 = rng.uniform(0, 1, (n, 2))
    inv_mass = np.ones(n)
    edges = np.array([[i, (i + 1) % n] for i in range(n)], np.int64)
    rest = rng.uniform(0.01, 0.05, n)
    tris2 = np.array([[i, (i + 1) % n, (i + 2) % n]
                      for i in range(0, n - 2, 3)], np.int64)
    areas = rng.uniform(1e-4, 1e-3, len(tris2))

    def run_pbd(k):
        pos = pos0.copy()
        for _ in range(50):
            k.pbd_project(pos, inv_mass, edges, rest, 0.9,
                          tris2, areas, 0.8, 20)
        return pos

    yield "pbd_project (400 particles, 50 steps x 20 iters)", run_pbd


def _star(n):
    ang = np.arange(n) * 2 * np.pi / n
    r = np.where(np.arange(n) % 2 == 0, 1.0, 0.5)
    return np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    if knb is None:
        print("accelerated backend unavailable; timing reference path only")

    print(f"{'workload':<45} {'numpy':>9} {'numba':>9} {'speedup':>8}")
    for name, fn in workloads():
        t_np = timeit(lambda: fn(knp), args.repeat)
        if knb is not None:
            fn(knb)                        # warm-up: compile outside timing
            t_nb = timeit(lambda: fn(knb), args.repeat)
            print(f"{name:<45} {t_np * 1e3:>7.1f}ms {t_nb * 1e3:>7.1f}ms "
                  f"{t_np / t_nb:>7.1f}x")
        else:
            print(f"{name:<45} {t_np * 1e3:>7.1f}ms {'-':>9} {'-':>8}")


if __name__ == "__main__":
    main()
