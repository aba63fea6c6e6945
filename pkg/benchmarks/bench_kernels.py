"""Numba vs numpy timings for the hot kernels.

    python benchmarks/bench_kernels.py [--repeats 5] [--csv out.csv]

Each kernel runs once untimed (numba compiles or loads its cache), then
``--repeats`` times per path; the best time is reported along with the
largest difference between the two outputs.
"""

import argparse
import csv
import sys
import time

import numpy as np

from sfcorr import kernels


def best_of(fn, args, repeats):
    fn(*args)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times), out


def cases(rng):
    # conv2d adjoint at FC-small's first layer: batch 8, 64x64 input, 32 channels, 3x3
    dcols = rng.standard_normal((8, 32, 32, 3, 3, 3))
    yield "col2im", (kernels.col2im_nb, kernels.col2im_np), (dcols, (8, 3, 66, 66), 2)

    centers = rng.uniform(0, 64, (256, 2))
    yield "radius_mask", (kernels.radius_mask_nb, kernels.radius_mask_np), (centers, centers[::-1].copy(), 16.0)

    # one propagation step at desk scale: 16x16 grid, 64 channels, 21 context frames
    def unit(x):
        return x / np.linalg.norm(x, axis=-1, keepdims=True)
    q = unit(rng.standard_normal((256, 64)))
    ctx = unit(rng.standard_normal((21, 256, 64)))
    for radius in (2, 5):
        yield f"restricted_affinity_r{radius}", (kernels.restricted_affinity_nb, kernels.restricted_affinity_np), \
            (q, ctx, 16, 16, radius, 1 / 0.07)

    values, index = kernels.restricted_affinity_np(q, ctx, 16, 16, 5, 1 / 0.07)
    labels = rng.dirichlet(np.ones(4), size=21 * 256)
    yield "topk_transfer", (kernels.topk_transfer_nb, kernels.topk_transfer_np), (values, index, labels, 10)


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", help="also write the table here")
    args = p.parse_args(argv)

    rows = []
    for name, (nb_fn, np_fn), fargs in cases(np.random.default_rng(args.seed)):
        t_nb, out_nb = best_of(nb_fn, fargs, args.repeats)
        t_np, out_np = best_of(np_fn, fargs, args.repeats)
        rows.append((name, t_nb * 1e3, t_np * 1e3, t_np / t_nb, max_diff(out_nb, out_np)))

    print(f"{'kernel':20s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s} {'max diff':>10s}")
    for name, a, b, s, d in rows:
        print(f"{name:20s} {a:10.3f} {b:10.3f} {s:8.2f} {d:10.2e}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("kernel", "numba_ms", "numpy_ms", "speedup", "max_diff"))
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
