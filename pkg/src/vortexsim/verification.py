"""Checks run against recorded trajectories, and closed-form oracles."""

from __future__ import annotations

import csv
import math
import warnings
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import FloatArray, GridSpec, ParticleEnsemble, TrajectoryBundle, build_initial_ensemble, marginal
from .fields import default_spacing, deposit, lp_norm
from .transport import integrate, resume

REPORT_HEADER = ("check_id", "scenario", "value", "tolerance", "pass", "status", "detail")
REPORT_VERSION = 1


def _bump_profile(r2):
    # exp(1 - 1/(1 - r^2)) on the open unit disk, 0 outside; peak 1 at 0
    inside = r2 < 1.0
    q = np.where(inside, 1.0 - r2, 1.0)
    return np.where(inside, np.exp(1.0 - 1.0 / q), 0.0), q, inside


def _smoothstep(z):
    # C-infinity step: 0 for z <= 0, 1 for z >= 1; returns value and derivative
    z = np.asarray(z, dtype=np.float64)
    zc = np.clip(z, 1e-300, None)
    wc = np.clip(1.0 - z, 1e-300, None)
    f = np.where(z > 0, np.exp(-1.0 / zc), 0.0)
    g = np.where(z < 1, np.exp(-1.0 / wc), 0.0)
    # f / z^2 in log form so tiny z gives 0 rather than 0 / 0
    fp = np.where(z > 0, np.exp(-1.0 / zc - 2.0 * np.log(zc)), 0.0)
    gp = np.where(z < 1, np.exp(-1.0 / wc - 2.0 * np.log(wc)), 0.0)
    s = f + g
    return f / s, (fp * g + f * gp) / s**2


@dataclass(frozen=True)
class TestFunction:
    """Smooth test function with a closed-form gradient.

    gaussian: ``exp(-|u|^2)``.  poly_bump: ``(1 + u1 + u1 u2) B(|u|)`` with
    ``B`` the standard compact bump.  cutoff: a product of smooth plateaus,
    1 on the square ``|u_i| <= 1`` and 0 beyond ``|u_i| >= 1.5``.  Here
    ``u = (x - center) / scale``.
    """

    __test__ = False  # not a pytest class

    kind: str
    center: tuple[float, float] = (0.0, 0.0)
    scale: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("gaussian", "poly_bump", "cutoff"):
            raise ValueError(f"unknown test function kind {self.kind!r}")
        if not self.scale > 0:
            raise ValueError("test function scale must be positive")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))

    def _u(self, x) -> FloatArray:
        return (np.asarray(x, dtype=np.float64).reshape(-1, 2) - self.center) / self.scale

    def __call__(self, x) -> FloatArray:
        u = self._u(x)
        if self.kind == "gaussian":
            return np.exp(-(u * u).sum(axis=1))
        if self.kind == "poly_bump":
            b, _, _ = _bump_profile((u * u).sum(axis=1))
            return (1.0 + u[:, 0] + u[:, 0] * u[:, 1]) * b
        sx, _ = _smoothstep((1.5 - np.abs(u[:, 0])) / 0.5)
        sy, _ = _smoothstep((1.5 - np.abs(u[:, 1])) / 0.5)
        return sx * sy

    def gradient(self, x) -> FloatArray:
        u = self._u(x)
        s = self.scale
        if self.kind == "gaussian":
            return (-2.0 / s) * u * np.exp(-(u * u).sum(axis=1))[:, None]
        if self.kind == "poly_bump":
            b, q, inside = _bump_profile((u * u).sum(axis=1))
            p = 1.0 + u[:, 0] + u[:, 0] * u[:, 1]
            dp = np.column_stack([1.0 + u[:, 1], u[:, 0]])
            db = np.where(inside, -2.0 * b / (q * q), 0.0)[:, None] * u
            return (dp * b[:, None] + p[:, None] * db) / s
        sx, dsx = _smoothstep((1.5 - np.abs(u[:, 0])) / 0.5)
        sy, dsy = _smoothstep((1.5 - np.abs(u[:, 1])) / 0.5)
        gx = -2.0 * np.sign(u[:, 0]) * dsx * sy
        gy = -2.0 * np.sign(u[:, 1]) * dsy * sx
        return np.column_stack([gx, gy]) / s

    @property
    def sup_abs(self) -> float:
        if self.kind in ("gaussian", "cutoff"):
            return 1.0
        return _poly_bump_sup()


_POLY_BUMP_SUP: list[float] = []


def _poly_bump_sup() -> float:
    # max of |(1 + u1 + u1 u2) B(u)| by dense search plus local refinement
    if not _POLY_BUMP_SUP:
        from scipy.optimize import minimize

        g = np.linspace(-1, 1, 801)
        U = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
        tf = TestFunction("poly_bump")
        v = np.abs(tf(U))
        u0 = U[int(np.argmax(v))]
        res = minimize(lambda u: -abs(float(tf(u)[0])), u0, method="Nelder-Mead", options={"xatol": 1e-12, "fatol": 1e-15})
        _POLY_BUMP_SUP.append(max(float(v.max()), -float(res.fun)))
    return _POLY_BUMP_SUP[0]


def default_test_functions(n: int = 5, *, radius: float = 0.6, scale: float = 0.5) -> list[TestFunction]:
    """``n`` off-centre Gaussians on a circle (radial test functions give trivially zero residual on radial flows)."""
    return [
        TestFunction("gaussian", (radius * math.cos(2 * math.pi * k / n + 0.3), radius * math.sin(2 * math.pi * k / n + 0.3)), scale)
        for k in range(n)
    ]


def _trapezoid(times: Sequence[float], values: Sequence[float]) -> float:
    t = np.asarray(times)
    f = np.asarray(values)
    return math.fsum((0.5 * (t[1:] - t[:-1]) * (f[1:] + f[:-1])).tolist())


@dataclass(frozen=True)
class WeakResidual:
    value: float
    raw: float
    richardson_error: float | None


def weak_residual_detail(
    bundle: TrajectoryBundle, phi: TestFunction, t: float, *, warn_tol: float | None = 1e-4
) -> WeakResidual:
    k = bundle.index_of(t)
    circ = bundle.circulations
    scale = math.fsum(np.abs(circ).tolist()) * phi.sup_abs
    if k == 0:
        return WeakResidual(0.0, 0.0, None)
    if bundle.velocities is None:
        raise ValueError("bundle has no stored velocities; re-run with velocity recording")
    end = math.fsum((circ * phi(bundle.positions[k])).tolist())
    start = math.fsum((circ * phi(bundle.positions[0])).tolist())
    flux = [math.fsum((circ * (phi.gradient(bundle.positions[j]) * bundle.velocities[j]).sum(axis=1)).tolist()) for j in range(k + 1)]
    times = bundle.snapshot_times[: k + 1]
    integral = _trapezoid(times, flux)
    raw = end - start - integral
    rich = None
    if k >= 2 and k % 2 == 0:
        coarse = _trapezoid(times[::2], flux[::2])
        rich = abs(coarse - integral) / 3.0 / scale
        if warn_tol is not None and rich > warn_tol:
            warnings.warn(
                f"snapshot spacing too coarse for the trapezoid rule: Richardson error estimate {rich:.2e} > {warn_tol:.1e}",
                stacklevel=2,
            )
    return WeakResidual(abs(raw) / scale, raw, rich)


def weak_residual(bundle: TrajectoryBundle, phi: TestFunction, t: float, *, warn_tol: float | None = 1e-4) -> float:
    """Normalized particle-quadrature residual of the weak formulation at snapshot ``t``.

    ``R = sum Gamma phi(x(t)) - sum Gamma phi(x(0)) - int_0^t sum Gamma grad phi(x(s)) . v(s, x(s)) ds``
    with the time integral by the trapezoid rule over snapshots and the
    integrator's stored velocities; returns ``|R| / (sum |Gamma| sup |phi|)``.
    """
    return weak_residual_detail(bundle, phi, t, warn_tol=warn_tol).value


def observed_order(errors: Sequence[float], ratio: float = 2.0) -> list[float]:
    """Convergence orders between successive refinements by ``ratio``."""
    return [math.log(a / b) / math.log(ratio) for a, b in zip(errors, errors[1:])]


def bundle_grid(bundle: TrajectoryBundle, spacing: float | None = None, margin: float = 0.2) -> GridSpec:
    """One fixed grid covering every snapshot, so norms at different times are comparable."""
    lo = np.min([p.min(axis=0) for p in bundle.positions], axis=0) - margin
    hi = np.max([p.max(axis=0) for p in bundle.positions], axis=0) + margin
    return GridSpec.covering(lo, hi, spacing if spacing is not None else default_spacing(lo, hi, bundle.blob_radius))


@dataclass(frozen=True)
class ConservationRow:
    time: float
    mass: float
    mass_defect: float
    sign_violations: int
    lq_drift: dict[float, float]
    l2_field_drift: float


def conservation_report(
    bundle: TrajectoryBundle,
    times: Iterable[float] | None = None,
    *,
    qs: Sequence[float] = (1.0, 2.0, 4.0),
    grid: GridSpec | None = None,
    initial: ParticleEnsemble | None = None,
) -> list[ConservationRow]:
    """Mass, sign and deposited L^q drift per requested snapshot time.

    ``lq_drift[q]`` is ``| ||w(t)||_q - ||w(0)||_q | / ||w(0)||_q`` and
    ``l2_field_drift`` the relative L^2 distance of the deposited fields.
    Sign violations count circulations whose sign differs from ``initial``
    (default: the bundle's own t = 0 state) or, for nonnegative initial data,
    negative circulations.
    """
    times = bundle.snapshot_times if times is None else tuple(times)
    grid = grid if grid is not None else bundle_grid(bundle)
    ref_circ = bundle.circulations if initial is None else initial.circulations
    nonneg = bool(np.all(ref_circ >= 0))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        w0 = deposit(bundle.initial, grid)
    n0 = {q: lp_norm(w0, q) for q in qs}
    l2_0 = lp_norm(w0, 2.0)
    mass0 = math.fsum(bundle.circulations.tolist())
    rows = []
    for t in times:
        ens = marginal(bundle, t)
        mass = math.fsum(ens.circulations.tolist())
        flips = int(np.count_nonzero(np.sign(ens.circulations) != np.sign(ref_circ)))
        if nonneg:
            flips = max(flips, int(np.count_nonzero(ens.circulations < 0)))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            w = deposit(ens, grid)
        drift = {q: abs(lp_norm(w, q) - n0[q]) / n0[q] for q in qs}
        diff = grid.with_values(w.values - w0.values)
        rows.append(ConservationRow(float(t), mass, mass - mass0, flips, drift, lp_norm(diff, 2.0) / l2_0))
    return rows


@dataclass(frozen=True)
class FlowPropertyReport:
    s: float
    t: float
    workers: tuple[int, ...]
    discrepancy: float
    passed: bool
    detail: str = ""


def _max_discrepancy(a: TrajectoryBundle, b: TrajectoryBundle) -> float:
    worst = 0.0
    for t, p in zip(b.snapshot_times, b.positions):
        q = a.positions[a.index_of(t)]
        if not np.array_equal(p, q):
            worst = max(worst, float(np.max(np.abs(p - q))) if np.isfinite(p - q).all() else math.inf)
    return worst


def flow_property_check(scenario, s: float, t: float, *, workers: Sequence[int] = (1,)) -> FlowPropertyReport:
    """Compare an uninterrupted run 0 -> s+t with a run to s resumed to s+t.

    Every overlapping snapshot must agree bit for bit, for every worker
    count, against the single-worker uninterrupted reference.
    """
    if s < 0 or t < 0:
        raise ValueError("s and t must be nonnegative")
    cfg = scenario.integrator
    stride = cfg.snapshot_stride
    for name, v in (("s", s), ("t", t)):
        if cfg.steps_to(v) % stride:
            raise ValueError(f"{name} = {v} is not a multiple of snapshot_interval")
    total = s + t
    init = build_initial_ensemble(scenario)
    whole = scenario.with_(end_time=total)
    first = scenario.with_(end_time=s)
    ref = integrate(whole, workers=workers[0], initial=init)
    worst = 0.0
    details = []
    for w in workers:
        full = ref if w == workers[0] else integrate(whole, workers=w, initial=init)
        head = integrate(first, workers=w, initial=init)
        tail = resume(head.last, cfg, total, source=cfg, workers=w)
        split = head.concat(tail)
        d = max(_max_discrepancy(ref, full), _max_discrepancy(ref, split))
        details.append(f"workers={w}: {d:.3e}")
        worst = max(worst, d)
    return FlowPropertyReport(s, t, tuple(workers), worst, worst == 0.0, "; ".join(details))


@dataclass(frozen=True)
class MarginalReport:
    time: float
    status: str  # pass | fail | inconclusive
    index: int | None = None
    magnitude: float | None = None
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.status == "pass"


def _first_difference(a: ParticleEnsemble, b: ParticleEnsemble) -> tuple[int | None, float, str]:
    if len(a) != len(b):
        return None, math.inf, f"particle counts differ ({len(a)} vs {len(b)})"
    if a.blob_radius != b.blob_radius:
        return None, abs(a.blob_radius - b.blob_radius), "blob radius differs"
    dp = np.abs(a.positions - b.positions).max(axis=1)
    dg = np.abs(a.circulations - b.circulations)
    bad = np.flatnonzero((dp != 0) | (dg != 0) | np.isnan(dp) | np.isnan(dg))
    if bad.size == 0:
        return None, 0.0, ""
    i = int(bad[0])
    return i, float(max(dp[i], dg[i])), f"particle {i} differs by {max(dp[i], dg[i]):.3e}"


def marginal_identity_check(
    bundle: TrajectoryBundle, t: float, *, reference: ParticleEnsemble | None = None, grid: GridSpec | None = None
) -> MarginalReport:
    """Check that the stored time-``t`` marginal is the ensemble the integrator held.

    The persisted fingerprint is compared with a hash of ``marginal(bundle, t)``.
    When a ``reference`` ensemble is available it is compared entry by entry
    (reporting the first differing index) and both are deposited on a grid
    whose fields must match exactly.  Without fingerprint or reference the
    result is inconclusive.
    """
    k = bundle.index_of(t)
    ens = marginal(bundle, t)
    stored = bundle.fingerprints[k] if bundle.fingerprints is not None else None
    if stored is None and reference is None:
        return MarginalReport(t, "inconclusive", detail="no persisted fingerprint and no reference ensemble")
    if reference is not None:
        i, mag, msg = _first_difference(ens, reference)
        if msg:
            return MarginalReport(t, "fail", i, mag, msg)
        g = grid if grid is not None else GridSpec.covering(
            ens.positions.min(axis=0) - 4 * ens.blob_radius, ens.positions.max(axis=0) + 4 * ens.blob_radius,
            max(np.ptp(ens.positions, axis=0).max() / 24, ens.blob_radius),
        )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            same_field = np.array_equal(deposit(ens, g).values, deposit(reference, g).values)
        if not same_field:
            return MarginalReport(t, "fail", None, None, "deposited fields differ")
    if stored is not None and ens.fingerprint() != stored:
        return MarginalReport(t, "fail", None, None, "fingerprint mismatch against the live ensemble record")
    return MarginalReport(t, "pass", detail="fingerprint match" if reference is None else "exact match")


def point_vortex_oracle(config: Sequence[tuple[float, Sequence[float]]], t: float, *, rtol: float = 1e-9) -> FloatArray:
    """Exact positions at time ``t`` for the closed-form point-vortex families.

    Supported: two equal vortices (rotation at ``Gamma / (pi d^2)``), two
    opposite vortices (translation at ``Gamma / (2 pi d)``), and N >= 3 equal
    vortices on a regular polygon (rotation at ``Gamma (N - 1) / (4 pi R^2)``).
    """
    g = np.array([float(c[0]) for c in config])
    x = np.array([c[1] for c in config], dtype=np.float64).reshape(-1, 2)
    n = len(g)
    if n == 2 and g[0] == -g[1] and g[0] != 0:
        d = x[1] - x[0]
        v = g[0] * np.array([-d[1], d[0]]) / (2 * math.pi * float(d @ d))
        return x + t * v
    if n >= 2 and np.all(g == g[0]) and g[0] != 0:
        c = x.mean(axis=0)
        rel = x - c
        r = np.hypot(rel[:, 0], rel[:, 1])
        R = r.mean()
        if R == 0 or np.max(np.abs(r - R)) > rtol * R:
            raise ValueError("unsupported point-vortex configuration: vertices not on a common circle")
        if n >= 3:
            ang = np.sort(np.mod(np.arctan2(rel[:, 1], rel[:, 0]), 2 * math.pi))
            gaps = np.diff(np.append(ang, ang[0] + 2 * math.pi))
            if np.max(np.abs(gaps - 2 * math.pi / n)) > 1e-9:
                raise ValueError("unsupported point-vortex configuration: polygon is not regular")
        omega = g[0] * (n - 1) / (4 * math.pi * R * R)
        a = omega * t
        rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        return c + rel @ rot.T
    raise ValueError("unsupported point-vortex configuration")


def rankine_oracle(r, a: float = 1.0, level: float = 1.0):
    """Tangential speed of the Rankine vortex of radius ``a`` and vorticity ``level``."""
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0):
        raise ValueError("radius must be nonnegative")
    safe = np.where(r > a, r, 1.0)
    out = np.where(r <= a, level * r / 2, level * a * a / (2 * safe))
    return out if out.ndim else float(out)


@dataclass
class CheckResult:
    check_id: str
    value: float
    tolerance: float
    status: str
    detail: str = ""
    scenario: str = ""

    @property
    def passed(self) -> bool:
        return self.status == "pass"


@dataclass
class VerificationReport:
    results: list[CheckResult] = field(default_factory=list)

    def add(self, result: CheckResult) -> None:
        self.results.append(result)

    @property
    def status(self) -> str:
        if any(r.status == "fail" for r in self.results):
            return "fail"
        if any(r.status == "inconclusive" for r in self.results):
            return "inconclusive"
        return "pass"

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            fh.write(f"# vortexsim verification report v{REPORT_VERSION}\n")
            w = csv.writer(fh)
            w.writerow(REPORT_HEADER)
            for r in self.results:
                w.writerow([r.check_id, r.scenario, repr(r.value), repr(r.tolerance), int(r.passed), r.status, r.detail])

    def summary(self) -> str:
        lines = [f"{r.status.upper():13s} {r.check_id:40s} value={r.value:.4g} tol={r.tolerance:.3g} {r.detail}" for r in self.results]
        counts = {s: sum(r.status == s for r in self.results) for s in ("pass", "fail", "inconclusive")}
        lines.append(f"overall: {self.status} ({counts['pass']} pass, {counts['fail']} fail, {counts['inconclusive']} inconclusive)")
        return "\n".join(lines)
