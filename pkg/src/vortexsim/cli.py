"""Command-line front end: run, verify, resume, sweep.

Run directory layout::

    manifest.json          scenario fingerprint, versions, lineage, snapshot index
    scenario.scn           canonical echo of the scenario
    snapshots/snap_<step>.vxf (+ .vel.npy velocity sidecar)
    progress.csv           step, time, wall clock
    diagnostics.csv        field diagnostics (versioned header)
    report.csv, report.txt written by ``verify``

Exit codes: 0 success, 1 check failure or runtime error, 2 usage or
scenario parse error, 3 integration blow-up, 4 inconclusive verification,
5 configuration drift or fingerprint mismatch.  The worker count for
velocity evaluation comes from ``VORTEXSIM_WORKERS``.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import itertools
import json
import logging
import math
import platform
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .biot_savart import worker_count
from .core import ParticleEnsemble, ScenarioError, TrajectoryBundle, build_initial_ensemble
from .fields import DIAGNOSTICS_HEADER, DIAGNOSTICS_VERSION, diagnostics_row, drift_integrability, grid_for, sample_pairs
from .scenario import Scenario, load_scenario, parse_scenario
from .snapshot import SnapshotFormatError, read_snapshot, read_velocities, write_snapshot
from .transport import ConfigMismatchError, IntegrationBlowUp, integrate, resume
from .verification import (
    CheckResult,
    VerificationReport,
    bundle_grid,
    conservation_report,
    default_test_functions,
    marginal_identity_check,
    weak_residual_detail,
)
from .yudovich import KNOT, check_concavity, osgood_scan, phi_theta

log = logging.getLogger("vortexsim")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_BLOWUP, EXIT_INCONCLUSIVE, EXIT_CONFIG = 0, 1, 2, 3, 4, 5
MANIFEST_VERSION = 1

TOLERANCES = {
    "conservation.lq_drift": 0.02,
    "weak_residual": 1e-4,
}


def _versions() -> dict:
    import numba
    import scipy

    return {"vortexsim": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class RunDir:
    def __init__(self, path: str | Path):
        self.path = Path(path)

    @property
    def manifest_path(self) -> Path:
        return self.path / "manifest.json"

    @property
    def snapshot_dir(self) -> Path:
        return self.path / "snapshots"

    def snapshot_path(self, step: int) -> Path:
        return self.snapshot_dir / f"snap_{step:09d}.vxf"

    def read_manifest(self) -> dict:
        return json.loads(self.manifest_path.read_text())

    def write_manifest(self, manifest: dict) -> None:
        tmp = self.manifest_path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        tmp.replace(self.manifest_path)

    def scenario(self) -> Scenario:
        m = self.read_manifest()
        return parse_scenario(m["scenario_text"], source=str(self.manifest_path)).with_(end_time=m["end_time"])


class _Recorder:
    """Snapshot hook: writes snapshots, diagnostics rows and the manifest as the run proceeds."""

    def __init__(self, rd: RunDir, scenario: Scenario, manifest: dict, initial: ParticleEnsemble, skip_step: int | None = None):
        self.rd = rd
        self.scenario = scenario
        self.manifest = manifest
        self.fp = scenario.fingerprint()
        self.skip_step = skip_step
        self.count = len(manifest["snapshots"])
        self.grid = grid_for(initial, scenario.deposit_spacing, scenario.deposit_margin)
        self.pairs = sample_pairs(initial, scenario.modulus_pairs)
        self.diag_path = rd.path / "diagnostics.csv"
        if not self.diag_path.exists():
            with self.diag_path.open("w", newline="") as fh:
                fh.write(f"# vortexsim diagnostics v{DIAGNOSTICS_VERSION}\n")
                csv.writer(fh).writerow(DIAGNOSTICS_HEADER)

    def __call__(self, step: int, ens: ParticleEnsemble, vel) -> None:
        if step == self.skip_step:
            return
        path = write_snapshot(self.rd.snapshot_path(step), ens, self.fp, vel)
        self.manifest["snapshots"].append(
            {"step": step, "time": ens.time, "file": str(path.relative_to(self.rd.path)), "fingerprint": ens.fingerprint()}
        )
        self.manifest["last_time"] = ens.time
        every = self.scenario.diagnostics_every
        is_last = step == self.scenario.integrator.steps_to(self.scenario.end_time)
        if every and (self.count % every == 0 or is_last):
            s = self.scenario
            row = diagnostics_row(step, ens, vel, grid=self.grid, profile=s.profile, pairs=self.pairs,
                                  p_grid=s.p_grid, uloc_p=s.uloc_p, leaf_capacity=s.leaf_capacity)
            with self.diag_path.open("a", newline="") as fh:
                csv.writer(fh).writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in DIAGNOSTICS_HEADER])
        self.count += 1
        self.rd.write_manifest(self.manifest)


def cmd_run(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL
    except ScenarioError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    rd = RunDir(args.out_dir)
    if rd.manifest_path.exists() and not args.force:
        print(f"error: {rd.path} already holds a run (use --force to overwrite)", file=sys.stderr)
        return EXIT_FAIL
    rd.snapshot_dir.mkdir(parents=True, exist_ok=True)
    for old in list(rd.snapshot_dir.glob("snap_*")) + [rd.path / n for n in ("diagnostics.csv", "progress.csv")]:
        old.unlink(missing_ok=True)
    try:
        initial = build_initial_ensemble(scenario)
    except ScenarioError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    (rd.path / "scenario.scn").write_text(scenario.to_text())
    manifest = {
        "format": MANIFEST_VERSION,
        "name": scenario.name,
        "scenario_fingerprint": scenario.fingerprint().hex(),
        "scenario_text": scenario.to_text(),
        "end_time": scenario.end_time,
        "n_particles": len(initial),
        "blob_radius": initial.blob_radius,
        "versions": _versions(),
        "workers": worker_count(),
        "status": "running",
        "lineage": [{"command": "run", "from_time": 0.0, "end_time": scenario.end_time, "started": _now()}],
        "snapshots": [],
    }
    rd.write_manifest(manifest)
    rec = _Recorder(rd, scenario, manifest, initial)
    t0 = time.perf_counter()
    try:
        integrate(scenario, initial=initial, on_snapshot=rec, progress_csv=rd.path / "progress.csv")
    except IntegrationBlowUp as e:
        manifest.update(status="blowup", error=str(e), wall_clock_s=time.perf_counter() - t0)
        rd.write_manifest(manifest)
        print(f"error: {e}; last good snapshot t={manifest.get('last_time')}", file=sys.stderr)
        return EXIT_BLOWUP
    manifest.update(status="complete", wall_clock_s=time.perf_counter() - t0)
    manifest["lineage"][-1]["finished"] = _now()
    rd.write_manifest(manifest)
    print(f"run complete: {len(manifest['snapshots'])} snapshots in {rd.path} ({manifest['wall_clock_s']:.1f} s)")
    return EXIT_OK


def load_bundle(rd: RunDir, manifest: dict) -> tuple[TrajectoryBundle, list[str]]:
    """Read every snapshot listed in the manifest; returns the bundle and format problems found."""
    problems = []
    positions, times, vels, prints, steps = [], [], [], [], []
    circ = delta = None
    expected_fp = bytes.fromhex(manifest["scenario_fingerprint"])
    for entry in manifest["snapshots"]:
        path = rd.path / entry["file"]
        snap = read_snapshot(path)
        if snap.fingerprint != expected_fp:
            problems.append(f"{entry['file']}: snapshot fingerprint does not match the run's scenario")
        e = snap.ensemble
        if circ is None:
            circ, delta = e.circulations, e.blob_radius
        elif not np.array_equal(e.circulations, circ) or e.blob_radius != delta:
            problems.append(f"{entry['file']}: circulations or blob radius changed")
        positions.append(e.positions)
        times.append(e.time)
        vels.append(read_velocities(path))
        prints.append(entry.get("fingerprint"))
        steps.append(entry["step"])
    velocities = None if any(v is None for v in vels) else tuple(vels)
    fps = None if any(p is None for p in prints) else tuple(prints)
    bundle = TrajectoryBundle(tuple(times), tuple(positions), circ, delta, velocities=velocities,
                              fingerprints=fps, step_indices=tuple(steps))
    return bundle, problems


ALL_CLI_CHECKS = ("marginal_identity", "conservation", "weak_residual", "flow_property", "drift_integrability", "yudovich")


def run_checks(rd: RunDir, checks: list[str]) -> VerificationReport:
    report = VerificationReport()
    try:
        manifest = rd.read_manifest()
        scenario = rd.scenario()
    except (FileNotFoundError, KeyError, json.JSONDecodeError) as e:
        for c in checks:
            report.add(CheckResult(c, math.nan, math.nan, "inconclusive", f"run artifacts missing: {e}"))
        return report
    name = manifest.get("name", "")
    try:
        bundle, problems = load_bundle(rd, manifest)
    except FileNotFoundError as e:
        for c in checks:
            report.add(CheckResult(c, math.nan, math.nan, "inconclusive", f"snapshot missing: {e.filename}", name))
        return report
    except SnapshotFormatError as e:
        report.add(CheckResult("snapshot_format", 1.0, 0.0, "fail", str(e), name))
        return report
    if problems:
        report.add(CheckResult("snapshot_format", float(len(problems)), 0.0, "fail", "; ".join(problems), name))

    for check in checks:
        fn = _CHECKS[check]
        try:
            for res in fn(rd, scenario, bundle):
                res.scenario = name
                report.add(res)
        except ConfigMismatchError as e:
            report.add(CheckResult(check, math.nan, 0.0, "fail", str(e).replace("\n", " "), name))
    return report


def _check_marginal(rd, scenario, bundle):
    worst = CheckResult("marginal_identity", 0.0, 0.0, "pass", f"{len(bundle.snapshot_times)} snapshots")
    initial = build_initial_ensemble(scenario)
    for k, t in enumerate(bundle.snapshot_times):
        rep = marginal_identity_check(bundle, t, reference=initial if k == 0 else None)
        if rep.status != "pass":
            where = f"t={t}" + (f" particle {rep.index}" if rep.index is not None else "")
            mag = rep.magnitude if rep.magnitude is not None else 1.0
            return [CheckResult("marginal_identity", mag, 0.0, rep.status, f"{where}: {rep.detail}")]
    return [worst]


def _diag_times(bundle: TrajectoryBundle, count: int = 11) -> list[float]:
    n = len(bundle.snapshot_times)
    idx = sorted(set(np.linspace(0, n - 1, min(count, n)).round().astype(int).tolist()))
    return [bundle.snapshot_times[i] for i in idx]


def _check_conservation(rd, scenario, bundle):
    rows = conservation_report(bundle, _diag_times(bundle), grid=bundle_grid(bundle, scenario.deposit_spacing))
    mass = max(abs(r.mass_defect) for r in rows)
    signs = max(r.sign_violations for r in rows)
    drift = max(max(r.lq_drift.values()) for r in rows)
    tol = TOLERANCES["conservation.lq_drift"]
    return [
        CheckResult("conservation.mass", mass, 0.0, "pass" if mass == 0.0 else "fail", "exact"),
        CheckResult("conservation.sign", float(signs), 0.0, "pass" if signs == 0 else "fail"),
        CheckResult("conservation.lq_drift", drift, tol, "pass" if drift <= tol else "fail", "max over q in {1,2,4}"),
    ]


def _check_weak(rd, scenario, bundle):
    if bundle.velocities is None:
        return [CheckResult("weak_residual", math.nan, TOLERANCES["weak_residual"], "inconclusive", "velocity sidecars missing")]
    t = bundle.snapshot_times[-1]
    out = []
    for j, phi in enumerate(default_test_functions(scenario.test_functions)):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            r = weak_residual_detail(bundle, phi, t)
        tol = TOLERANCES["weak_residual"]
        note = "; ".join(str(w.message) for w in caught)
        out.append(CheckResult(f"weak_residual.phi{j}", r.value, tol, "pass" if r.value <= tol else "fail", note))
    return out


def _check_flow(rd, scenario, bundle):
    """Resume from the stored snapshot nearest the midpoint and compare the later stored snapshots."""
    cfg = scenario.integrator
    steps = bundle.step_indices
    stride = cfg.snapshot_stride
    mids = [i for i, k in enumerate(steps) if k % stride == 0 and 0 < k < steps[-1]]
    if not mids:
        return [CheckResult("flow_property", math.nan, 0.0, "inconclusive", "no interior snapshot to split at")]
    i = min(mids, key=lambda j: abs(steps[j] - steps[-1] / 2))
    tail = resume(bundle.ensemble_at(i), cfg, bundle.snapshot_times[-1], source=cfg)
    worst = 0.0
    for t, p in zip(tail.snapshot_times, tail.positions):
        q = bundle.positions[bundle.index_of(t)]
        if not np.array_equal(p, q):
            worst = max(worst, float(np.max(np.abs(p - q))))
    return [CheckResult("flow_property", worst, 0.0, "pass" if worst == 0.0 else "fail",
                        f"split at t={bundle.snapshot_times[i]}, workers={worker_count()}")]


def _check_drift(rd, scenario, bundle):
    vals = []
    for k in range(len(bundle.snapshot_times)):
        v = bundle.velocities[k] if bundle.velocities is not None else None
        vals.append(drift_integrability(bundle.ensemble_at(k), v))
    ok = all(math.isfinite(v) for v in vals)
    return [CheckResult("drift_integrability", max(vals), math.inf, "pass" if ok else "fail", "finite at every snapshot")]


def _check_yudovich(rd, scenario, bundle):
    prof = scenario.profile
    out = []
    knot = float(phi_theta(KNOT, prof))
    exact = KNOT * 3.0 * float(prof(3.0))
    err = abs(knot - exact) / exact
    out.append(CheckResult("yudovich.phi_knot", err, 1e-12, "pass" if err <= 1e-12 else "fail"))
    scan = osgood_scan(prof)
    agree = scan.divergent == prof.satisfies_osgood
    out.append(CheckResult("yudovich.osgood_scan", float(scan.values[-1]), math.nan, "pass" if agree else "fail",
                           f"divergent={scan.divergent}, expected {prof.satisfies_osgood}"))
    conc = check_concavity(prof)
    out.append(CheckResult("yudovich.concavity", float(conc), 1.0, "pass", "reported, not enforced"))
    return out


_CHECKS = {
    "marginal_identity": _check_marginal,
    "conservation": _check_conservation,
    "weak_residual": _check_weak,
    "flow_property": _check_flow,
    "drift_integrability": _check_drift,
    "yudovich": _check_yudovich,
}


def cmd_verify(args) -> int:
    rd = RunDir(args.run_dir)
    checks = args.checks
    if checks is None:
        try:
            checks = list(rd.scenario().checks)
        except (FileNotFoundError, KeyError, json.JSONDecodeError, ScenarioError):
            checks = list(ALL_CLI_CHECKS)
    unknown = [c for c in checks if c not in _CHECKS]
    if unknown:
        print(f"error: unknown checks {unknown}; known: {list(_CHECKS)}", file=sys.stderr)
        return EXIT_USAGE
    if not checks:
        print("warning: empty check list; nothing verified", file=sys.stderr)
    report = run_checks(rd, checks)
    if rd.path.is_dir():
        report.write_csv(rd.path / "report.csv")
        (rd.path / "report.txt").write_text(report.summary() + "\n")
    print(report.summary())
    return {"pass": EXIT_OK, "fail": EXIT_FAIL, "inconclusive": EXIT_INCONCLUSIVE}[report.status]


def cmd_resume(args) -> int:
    rd = RunDir(args.run_dir)
    try:
        manifest = rd.read_manifest()
        source = rd.scenario()
    except FileNotFoundError:
        print(f"error: no run found in {rd.path}", file=sys.stderr)
        return EXIT_FAIL
    target = source
    if args.scenario is not None:
        try:
            target = load_scenario(args.scenario)
        except (FileNotFoundError, ScenarioError) as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_USAGE
    last = manifest["snapshots"][-1]
    snap = read_snapshot(rd.path / last["file"])
    if snap.fingerprint.hex() != manifest["scenario_fingerprint"]:
        print("error: last snapshot does not belong to this run's scenario", file=sys.stderr)
        return EXIT_CONFIG
    if not args.extend_to > snap.ensemble.time:
        print(f"error: extend-to {args.extend_to} must exceed the last snapshot time {snap.ensemble.time}", file=sys.stderr)
        return EXIT_USAGE
    delta = build_initial_ensemble(target).blob_radius if args.scenario is not None else None
    try:
        new_scenario = source.with_(end_time=args.extend_to)
        if args.scenario is not None:
            diff = source.integrator.diff(target.integrator)
            if delta != snap.ensemble.blob_radius:
                diff.append(("blob_radius", snap.ensemble.blob_radius, delta))
            if diff:
                raise ConfigMismatchError(diff)
        manifest["lineage"].append({"command": "resume", "from_time": snap.ensemble.time, "end_time": args.extend_to, "started": _now()})
        manifest["end_time"] = args.extend_to
        manifest["status"] = "running"
        rec = _Recorder(rd, new_scenario, manifest, read_snapshot(rd.path / manifest["snapshots"][0]["file"]).ensemble, skip_step=last["step"])
        resume(snap.ensemble, source.integrator, args.extend_to, source=source.integrator,
               on_snapshot=rec, progress_csv=rd.path / "progress.csv")
    except ConfigMismatchError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except IntegrationBlowUp as e:
        manifest.update(status="blowup", error=str(e))
        rd.write_manifest(manifest)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BLOWUP
    manifest["status"] = "complete"
    manifest["lineage"][-1]["finished"] = _now()
    rd.write_manifest(manifest)
    print(f"resumed to t={args.extend_to}: {len(manifest['snapshots'])} snapshots")
    return EXIT_OK


SWEEP_HEADER = ("dt", "n_target", "theta_mac", "n_particles", "wall_clock_s", "weak_residual_max", "l2_field_drift", "mass_defect")


def cmd_sweep(args) -> int:
    try:
        base = load_scenario(args.scenario)
    except (FileNotFoundError, ScenarioError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dts = args.dt or [base.dt]
    ns = args.n or [base.n_target]
    thetas = args.theta or [base.theta_mac]
    rows = []
    for dt, n, th in itertools.product(dts, ns, thetas):
        ratio = base.snapshot_interval / base.dt
        try:
            sc = base.with_(dt=dt, n_target=n, theta_mac=th, snapshot_interval=dt * round(ratio))
        except ScenarioError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_USAGE
        t0 = time.perf_counter()
        b = integrate(sc)
        wall = time.perf_counter() - t0
        T = b.snapshot_times[-1]
        wr = max((weak_residual_detail(b, phi, T, warn_tol=None).value for phi in default_test_functions(sc.test_functions)), default=0.0)
        cons = conservation_report(b, [T], qs=(2.0,), grid=bundle_grid(b, sc.deposit_spacing))[0]
        rows.append((dt, n, th, len(b.circulations), wall, wr, cons.l2_field_drift, cons.mass_defect))
        log.info("sweep dt=%g n=%d theta=%g done in %.1fs", dt, n, th, wall)
    with (out / "sweep.csv").open("w", newline="") as fh:
        fh.write("# vortexsim sweep v1\n")
        w = csv.writer(fh)
        w.writerow(SWEEP_HEADER)
        w.writerows(rows)
    for r in rows:
        print("  ".join(f"{h}={v:.4g}" if isinstance(v, float) else f"{h}={v}" for h, v in zip(SWEEP_HEADER, r)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vortexsim", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="integrate a scenario and write a run directory")
    r.add_argument("scenario")
    r.add_argument("out_dir")
    r.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    r.set_defaults(fn=cmd_run)

    v = sub.add_parser("verify", help="run verification checks on a run directory")
    v.add_argument("run_dir")
    v.add_argument("--checks", nargs="*", default=None, help=f"subset of {', '.join(ALL_CLI_CHECKS)} (default: the scenario's checks)")
    v.set_defaults(fn=cmd_verify)

    c = sub.add_parser("resume", help="extend a run from its last snapshot")
    c.add_argument("run_dir")
    c.add_argument("--extend-to", type=float, required=True)
    c.add_argument("--scenario", default=None, help="scenario to check against the run's configuration")
    c.set_defaults(fn=cmd_resume)

    s = sub.add_parser("sweep", help="Cartesian sweep over dt / particle count / theta_mac")
    s.add_argument("scenario")
    s.add_argument("out_dir")
    s.add_argument("--dt", type=float, nargs="+")
    s.add_argument("--n", type=int, nargs="+")
    s.add_argument("--theta", type=float, nargs="+")
    s.set_defaults(fn=cmd_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
