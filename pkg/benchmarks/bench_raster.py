"""Compare the compiled and numpy blend kernels on random clouds.

    python benchmarks/bench_raster.py --sizes 64 512 4096 --image 32 64 --repeat 5

Reports the best-of-N wall time for a forward render and for forward plus
backward, per backend, and the speedup of the compiled kernel.
"""
from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from gsdiff.camera import look_at
from gsdiff.gaussians import GaussianCloud
from gsdiff.raster import RenderConfig, available_backends, render, render_backward


def make_cloud(rng, n):
    return GaussianCloud(rng.uniform(-0.8, 0.8, (n, 3)), rng.standard_normal((n, 4)),
                         rng.uniform(0.01, 0.12, (n, 3)), rng.uniform(0.05, 0.99, n), rng.uniform(0, 1, (n, 3)))


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def run(sizes, images, repeat, threads, seed=0):
    rows = []
    cfg = RenderConfig(num_threads=threads)
    for size in images:
        pose = look_at([0.4, -3.0, 1.0], [0, 0, 0], width=size, height=size)
        grad = np.random.default_rng(seed).standard_normal((size, size, 3))
        for n in sizes:
            cloud = make_cloud(np.random.default_rng(seed), n)
            row = {"gaussians": n, "image": size}
            for backend in available_backends():
                render(cloud, pose, cfg, backend=backend)  # warm caches
                row[f"{backend}_fwd"] = best_of(lambda: render(cloud, pose, cfg, backend=backend), repeat)
                row[f"{backend}_fwd_bwd"] = best_of(
                    lambda: render_backward(render(cloud, pose, cfg, backend=backend), grad), repeat)
            rows.append(row)
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[64, 512, 4096])
    ap.add_argument("--image", type=int, nargs="+", default=[32, 64])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--threads", type=int, default=0, help="0 lets OpenMP decide")
    ap.add_argument("--json", action="store_true", help="print rows as JSON")
    args = ap.parse_args(argv)
    rows = run(args.sizes, args.image, args.repeat, args.threads)
    if args.json:
        json.dump(rows, sys.stdout, indent=2)
        print()
        return
    both = "cython" in available_backends()
    print(f"{'N':>6} {'img':>4} {'py fwd':>9} {'py f+b':>9}" + (f" {'cy fwd':>9} {'cy f+b':>9} {'speedup':>8}" if both else ""))
    for r in rows:
        line = f"{r['gaussians']:>6} {r['image']:>4} {r['python_fwd'] * 1e3:>7.2f}ms {r['python_fwd_bwd'] * 1e3:>7.2f}ms"
        if both:
            line += (f" {r['cython_fwd'] * 1e3:>7.2f}ms {r['cython_fwd_bwd'] * 1e3:>7.2f}ms"
                     f" {r['python_fwd_bwd'] / r['cython_fwd_bwd']:>7.1f}x")
        print(line)
    if not both:
        print("compiled kernel not available; only the numpy backend was timed")


if __name__ == "__main__":
    main()
