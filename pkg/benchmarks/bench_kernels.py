"""Time the numba kernels against their pure-numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel runs once untimed (JIT warm-up), then ``repeat`` times; the
best wall time is reported. Outputs of both variants are cross-checked.
"""

from __future__ import annotations

import argparse
import json
import time

import numpy as np

from deepi2t import _kernels as K
from deepi2t.graph import build_graph
from deepi2t.grid import GridSpec


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def case_haversine(rng):
    lon = -8.6 + np.cumsum(rng.normal(0, 1e-4, 200_000))
    lat = 41.1 + np.cumsum(rng.normal(0, 1e-4, 200_000))
    return (
        "haversine_path_km (200k points)",
        lambda: K.haversine_path_km_numpy(lon, lat),
        lambda: K.haversine_path_km_numba(lon, lat),
        lambda a, b: abs(a - b) <= 1e-9 * max(1.0, abs(a)),
    )


def case_bresenham(rng):
    pts = rng.integers(0, 200, size=(5000, 4))

    def run(f):
        return [f(*map(int, p)) for p in pts]

    return (
        "bresenham (5k segments)",
        lambda: run(K.bresenham_numpy),
        lambda: run(K.bresenham_numba),
        lambda a, b: all(np.array_equal(x, y) for x, y in zip(a, b)),
    )


def case_line(rng):
    g = build_graph(GridSpec(-8.6, 41.1, 200.0, 20, 20))
    n, dim, m, k = g.n_nodes, 100, 40_000, 5
    src = rng.integers(0, n, m)
    dst = rng.integers(0, n, m)
    negs = rng.integers(0, n, (m, k))
    lrs = np.linspace(0.025, 0.0025, m)
    emb0 = (rng.random((n, dim)) - 0.5) / dim

    def run(f):
        emb, ctx = emb0.copy(), np.zeros_like(emb0)
        loss = f(emb, ctx, src, dst, negs, lrs, False)
        return loss, emb

    return (
        "line_sgd_epoch (40k edges x 5 negatives, dim 100)",
        lambda: run(K.line_sgd_epoch_numpy),
        lambda: run(K.line_sgd_epoch_numba),
        lambda a, b: np.allclose(a[1], b[1], rtol=1e-9, atol=1e-12),
    )


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':52s} {'numpy s':>10s} {'numba s':>10s} {'speedup':>8s}  agree")
    for case in (case_haversine, case_bresenham, case_line):
        name, f_np, f_nb, agree = case(rng)
        t_np, o_np = best_of(f_np, args.repeat)
        t_nb, o_nb = best_of(f_nb, args.repeat)
        ok = bool(agree(o_np, o_nb))
        rows.append({"kernel": name, "numpy_s": t_np, "numba_s": t_nb, "speedup": t_np / t_nb, "agree": ok})
        print(f"{name:52s} {t_np:10.4f} {t_nb:10.4f} {t_np / t_nb:8.1f}x  {ok}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()
