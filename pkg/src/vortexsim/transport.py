"""Fixed-step integration of the self-consistent particle ODE.

Each particle moves with the blob velocity induced by the whole ensemble,
``dx_i/dt = sum_j Gamma_j K_delta(x_i - x_j)``; every Runge-Kutta substage
re-evaluates the field from the substage positions.  Time is always
``step_index * dt`` so a run split at any step and resumed is bit-identical
to the uninterrupted run.
"""

from __future__ import annotations

import csv
import logging
import math
import time as _time
from collections.abc import Callable
from dataclasses import dataclass, fields
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .biot_savart import build_tree, velocity_direct, velocity_tree
from .core import FloatArray, ParticleEnsemble, TrajectoryBundle

if TYPE_CHECKING:
    from .scenario import Scenario

log = logging.getLogger(__name__)

BLOWUP_RADIUS = 1e6


class IntegrationBlowUp(ArithmeticError):
    """Raised when a position becomes non-finite or leaves the ball of radius 1e6."""

    def __init__(self, index: int, time: float, position, last_good: ParticleEnsemble | None = None):
        super().__init__(f"integration blow-up: particle {index} at t={time:.6g} reached position {tuple(position)}")
        self.index = index
        self.time = time
        self.last_good = last_good


class ConfigMismatchError(ValueError):
    def __init__(self, diff: list[tuple[str, object, object]]):
        lines = [f"  {name}: run used {a!r}, got {b!r}" for name, a, b in diff]
        super().__init__("configuration differs from the producing run:\n" + "\n".join(lines))
        self.diff = diff


def _n_steps(span: float, dt: float, what: str) -> int:
    k = round(span / dt)
    if abs(span / dt - k) > 1e-9 * max(1.0, abs(k)):
        raise ValueError(f"{what} = {span!r} is not an integer multiple of dt = {dt!r}")
    return int(k)


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float = 1e-3
    scheme: str = "rk4"
    summation_mode: str = "tree"
    theta_mac: float = 0.5
    leaf_capacity: int = 16
    snapshot_interval: float = 1e-2

    def __post_init__(self) -> None:
        if not (math.isfinite(self.dt) and self.dt > 0):
            raise ValueError("dt must be positive")
        if self.scheme not in ("rk4", "euler"):
            raise ValueError(f"scheme must be rk4 or euler, got {self.scheme!r}")
        if self.summation_mode not in ("direct", "tree"):
            raise ValueError(f"summation_mode must be direct or tree, got {self.summation_mode!r}")
        if not (0.0 < self.theta_mac <= 1.0):
            raise ValueError(f"theta_mac must lie in (0, 1], got {self.theta_mac}")
        if self.leaf_capacity < 1:
            raise ValueError("leaf_capacity must be >= 1")
        if not self.snapshot_interval > 0 or self.snapshot_stride < 1:
            raise ValueError("snapshot_interval must be a positive multiple of dt")

    @property
    def snapshot_stride(self) -> int:
        return _n_steps(self.snapshot_interval, self.dt, "snapshot_interval")

    def steps_to(self, t: float) -> int:
        return _n_steps(t, self.dt, "time")

    def diff(self, other: IntegratorConfig) -> list[tuple[str, object, object]]:
        out = []
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if a != b:
                out.append((f.name, a, b))
        return out


def _field(pos: FloatArray, circ: FloatArray, delta: float, cfg: IntegratorConfig, workers) -> FloatArray:
    ens = ParticleEnsemble(pos, circ, delta)
    if cfg.summation_mode == "direct":
        return velocity_direct(pos, ens, workers=workers)
    return velocity_tree(pos, build_tree(ens, cfg.leaf_capacity), cfg.theta_mac, workers=workers)


def _check(pos: FloatArray, t: float, last_good: ParticleEnsemble | None) -> None:
    bad = ~np.isfinite(pos).all(axis=1)
    bad |= np.abs(pos).max(axis=1) > BLOWUP_RADIUS
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise IntegrationBlowUp(i, t, pos[i], last_good)


def _advance(pos, k1, circ, delta, cfg: IntegratorConfig, t: float, workers, last_good=None) -> FloatArray:
    dt = cfg.dt
    if cfg.scheme == "euler":
        new = pos + dt * k1
        _check(new, t + dt, last_good)
        return new
    p2 = pos + (0.5 * dt) * k1
    _check(p2, t + 0.5 * dt, last_good)
    k2 = _field(p2, circ, delta, cfg, workers)
    p3 = pos + (0.5 * dt) * k2
    _check(p3, t + 0.5 * dt, last_good)
    k3 = _field(p3, circ, delta, cfg, workers)
    p4 = pos + dt * k3
    _check(p4, t + dt, last_good)
    k4 = _field(p4, circ, delta, cfg, workers)
    new = pos + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    _check(new, t + dt, last_good)
    return new


def step(ensemble: ParticleEnsemble, config: IntegratorConfig, *, workers: int | None = None) -> ParticleEnsemble:
    """Advance every particle by one step of ``config.scheme``."""
    if len(ensemble) == 0:
        raise ValueError("cannot step an empty ensemble")
    pos, circ, delta = ensemble.positions, ensemble.circulations, ensemble.blob_radius
    k1 = _field(pos, circ, delta, config, workers)
    new = _advance(pos, k1, circ, delta, config, ensemble.time, workers, ensemble)
    return ensemble.with_positions(new, ensemble.time + config.dt)


SnapshotHook = Callable[[int, ParticleEnsemble, FloatArray], None]


def run_steps(
    initial: ParticleEnsemble,
    start_step: int,
    end_step: int,
    config: IntegratorConfig,
    *,
    workers: int | None = None,
    on_snapshot: SnapshotHook | None = None,
) -> TrajectoryBundle:
    """March from global step ``start_step`` to ``end_step``.

    Snapshots are taken at the start, at every global step divisible by the
    snapshot stride, and at the end.  The velocity stored with a snapshot is
    the first-stage evaluation of the following step (or one extra
    evaluation at the end), so it is the integrator's own field.
    """
    if end_step < start_step:
        raise ValueError("end_step precedes start_step")
    circ, delta, dt = initial.circulations, initial.blob_radius, config.dt
    stride = config.snapshot_stride
    pos = np.array(initial.positions)
    times, snaps, vels, prints, idx = [], [], [], [], []

    def record(k: int, p: FloatArray, v: FloatArray) -> None:
        ens = ParticleEnsemble(p, circ, delta, k * dt)
        times.append(k * dt)
        snaps.append(ens.positions)
        vels.append(v)
        prints.append(ens.fingerprint())
        idx.append(k)
        if on_snapshot is not None:
            on_snapshot(k, ens, v)

    last_good = initial
    for k in range(start_step, end_step):
        k1 = _field(pos, circ, delta, config, workers)
        if k == start_step or k % stride == 0:
            record(k, pos, k1)
            last_good = ParticleEnsemble(pos, circ, delta, k * dt)
        pos = _advance(pos, k1, circ, delta, config, k * dt, workers, last_good)
    record(end_step, pos, _field(pos, circ, delta, config, workers))
    return TrajectoryBundle(
        tuple(times), tuple(snaps), circ, delta, velocities=tuple(vels), fingerprints=tuple(prints),
        step_indices=tuple(idx), config=config,
    )


def integrate(
    scenario: Scenario,
    *,
    workers: int | None = None,
    on_snapshot: SnapshotHook | None = None,
    progress_csv: str | Path | None = None,
    initial: ParticleEnsemble | None = None,
) -> TrajectoryBundle:
    """Run ``scenario`` from t = 0 to its end time."""
    from .core import build_initial_ensemble

    cfg = scenario.integrator
    ens = initial if initial is not None else build_initial_ensemble(scenario)
    hook = _with_progress(on_snapshot, progress_csv)
    return run_steps(ens, 0, cfg.steps_to(scenario.end_time), cfg, workers=workers, on_snapshot=hook)


def resume(
    snapshot: ParticleEnsemble,
    config: IntegratorConfig,
    end_time: float,
    *,
    source: IntegratorConfig,
    blob_radius: float | None = None,
    workers: int | None = None,
    on_snapshot: SnapshotHook | None = None,
    progress_csv: str | Path | None = None,
) -> TrajectoryBundle:
    """Continue a run from a stored snapshot to ``end_time``.

    ``source`` is the configuration of the run that produced the snapshot;
    any difference (or a blob radius different from the snapshot's) is
    refused with a field-by-field diff.
    """
    diff = source.diff(config)
    if blob_radius is not None and blob_radius != snapshot.blob_radius:
        diff.append(("blob_radius", snapshot.blob_radius, blob_radius))
    if diff:
        raise ConfigMismatchError(diff)
    k0 = config.steps_to(snapshot.time)
    k1 = config.steps_to(end_time)
    if k1 < k0:
        raise ValueError(f"end_time {end_time} precedes the snapshot time {snapshot.time}")
    hook = _with_progress(on_snapshot, progress_csv)
    return run_steps(snapshot, k0, k1, config, workers=workers, on_snapshot=hook)


def _with_progress(hook: SnapshotHook | None, path: str | Path | None) -> SnapshotHook | None:
    if path is None:
        return hook
    path = Path(path)
    new = not path.exists()
    t0 = _time.perf_counter()
    with path.open("a", newline="") as fh:
        if new:
            csv.writer(fh).writerow(["step", "time", "wall_clock_s", "n_particles"])

    def wrapped(k: int, ens: ParticleEnsemble, v: FloatArray) -> None:
        with path.open("a", newline="") as fh:
            csv.writer(fh).writerow([k, repr(ens.time), f"{_time.perf_counter() - t0:.3f}", len(ens)])
        log.info("t=%.6g step=%d", ens.time, k)
        if hook is not None:
            hook(k, ens, v)

    return wrapped
