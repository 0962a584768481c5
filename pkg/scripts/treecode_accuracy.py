"""Treecode error and timing against direct summation on a Rankine lattice."""

from __future__ import annotations

import argparse
import time

import numpy as np

from vortexsim.biot_savart import build_tree, velocity_direct, velocity_tree
from vortexsim.core import ParticleEnsemble, lattice


def rankine(n_target: int, factor: float = 2.0) -> ParticleEnsemble:
    xs, ys, h = lattice((-1.0, -1.0, 1.0, 1.0), n_target)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    inside = X**2 + Y**2 <= 1.0
    return ParticleEnsemble(np.column_stack([X[inside], Y[inside]]), np.full(int(inside.sum()), h * h), factor * h)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=12_732, help="lattice target over [-1, 1]^2")
    ap.add_argument("--theta", type=float, nargs="+", default=[0.9, 0.7, 0.5, 0.3])
    ap.add_argument("--leaf", type=int, nargs="+", default=[16])
    ap.add_argument("--workers", type=int, default=None)
    args = ap.parse_args()

    e = rankine(args.n)
    t0 = time.perf_counter()
    direct = velocity_direct(e.positions, e, workers=args.workers)
    t_direct = time.perf_counter() - t0
    print(f"N = {len(e)}, delta = {e.blob_radius:.4g}, direct {t_direct:.3f} s")
    print(f"{'leaf':>5} {'theta':>6} {'rel_L2':>10} {'build_s':>8} {'eval_s':>8} {'nodes':>7} {'depth':>5}")
    for leaf in args.leaf:
        t0 = time.perf_counter()
        tree = build_tree(e, leaf)
        t_build = time.perf_counter() - t0
        for th in args.theta:
            velocity_tree(e.positions, tree, th, workers=args.workers)  # warm-up / JIT
            t0 = time.perf_counter()
            v = velocity_tree(e.positions, tree, th, workers=args.workers)
            t_eval = time.perf_counter() - t0
            err = np.linalg.norm(v - direct) / np.linalg.norm(direct)
            print(f"{leaf:5d} {th:6.2f} {err:10.3e} {t_build:8.3f} {t_eval:8.3f} {tree.node_count:7d} {tree.max_depth:5d}")


if __name__ == "__main__":
    main()
