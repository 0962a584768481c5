"""Refinement studies on the Rankine patch.

``weak``: normalized weak residual at t = T while dt and the snapshot spacing
are halved together (direct summation), with observed orders.
``drift``: deposited-vorticity L2 drift at t = T for increasing particle counts.
"""

from __future__ import annotations

import argparse
import time

from vortexsim.scenario import InitialCondition, Scenario
from vortexsim.transport import integrate
from vortexsim.verification import conservation_report, default_test_functions, observed_order, weak_residual_detail


def rankine(n: int, T: float, **kw) -> Scenario:
    return Scenario(InitialCondition("rankine"), box=(-1.0, -1.0, 1.0, 1.0), n_target=n, end_time=T, **kw)


def weak_study(n: int, T: float, dts: list[float]) -> None:
    phis = default_test_functions(5)
    table = []
    for dt in dts:
        t0 = time.perf_counter()
        b = integrate(rankine(n, T, dt=dt, snapshot_interval=10 * dt, summation_mode="direct"))
        res = [weak_residual_detail(b, phi, T, warn_tol=None).value for phi in phis]
        table.append(res)
        print(f"dt={dt:.2e}  N={len(b.circulations)}  residuals " + " ".join(f"{r:.3e}" for r in res)
              + f"  ({time.perf_counter() - t0:.1f} s)")
    for j in range(len(phis)):
        orders = observed_order([row[j] for row in table])
        print(f"phi{j}: orders " + " ".join(f"{o:.4f}" for o in orders))


def drift_study(ns: list[int], T: float, dt: float) -> None:
    for n in ns:
        t0 = time.perf_counter()
        b = integrate(rankine(n, T, dt=dt, snapshot_interval=T))
        row = conservation_report(b, [T], qs=(1.0, 2.0, 4.0))[0]
        print(f"n_target={n}  N={len(b.circulations)}  delta={b.blob_radius:.4g}  L2 drift={row.l2_field_drift:.3e}  "
              + " ".join(f"L{int(q)}={v:.2e}" for q, v in row.lq_drift.items())
              + f"  ({time.perf_counter() - t0:.1f} s)")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="study", required=True)
    w = sub.add_parser("weak")
    w.add_argument("--n", type=int, default=1000)
    w.add_argument("--T", type=float, default=1.0)
    w.add_argument("--dt", type=float, nargs="+", default=[4e-3, 2e-3, 1e-3])
    d = sub.add_parser("drift")
    d.add_argument("--n", type=int, nargs="+", default=[2500, 10_000, 40_000])
    d.add_argument("--T", type=float, default=1.0)
    d.add_argument("--dt", type=float, default=1e-3)
    args = ap.parse_args()
    if args.study == "weak":
        weak_study(args.n, args.T, args.dt)
    else:
        drift_study(args.n, args.T, args.dt)


if __name__ == "__main__":
    main()
