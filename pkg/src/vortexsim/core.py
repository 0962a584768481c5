"""Domain types and initial-data construction for the vortex particle method.

A vorticity measure is represented by a finite set of weighted points
(positions and circulations) plus a fixed blob radius used by the
desingularized Biot-Savart kernel.  Everything here is an immutable value
object; arrays are stored read-only.
"""

from __future__ import annotations

import hashlib
import logging
import math
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
from numpy.typing import NDArray

if TYPE_CHECKING:
    from .scenario import Scenario

FloatArray = NDArray[np.float64]

log = logging.getLogger(__name__)


class ScenarioError(ValueError):
    """Rejected scenario or initial datum."""


class EmptyEnsembleError(ScenarioError):
    pass


class SnapshotLookupError(LookupError):
    pass


def _frozen(a, shape_tail: tuple[int, ...], name: str) -> FloatArray:
    arr = np.array(a, dtype=np.float64, copy=True)
    if arr.ndim != 1 + len(shape_tail) or arr.shape[1:] != shape_tail:
        raise ValueError(f"{name} must have shape (N, {shape_tail[0]})")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Particle:
    position: tuple[float, float]
    circulation: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.circulation) and all(map(math.isfinite, self.position))):
            raise ValueError("particle fields must be finite")


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    """Weighted point discretization of a vorticity measure.

    ``positions`` has shape (N, 2) and ``circulations`` shape (N,).  Particle
    identity is the row index and is preserved by every transport operation.
    """

    positions: FloatArray
    circulations: FloatArray
    blob_radius: float
    time: float = 0.0

    def __post_init__(self) -> None:
        pos = _frozen(self.positions, (2,), "positions")
        circ = np.array(self.circulations, dtype=np.float64, copy=True).reshape(-1)
        if circ.shape[0] != pos.shape[0]:
            raise ValueError("circulations must match positions in length")
        if not np.isfinite(circ).all():
            raise ValueError("circulations contain non-finite values")
        circ.setflags(write=False)
        if not (math.isfinite(self.blob_radius) and self.blob_radius > 0):
            raise ValueError("blob_radius must be positive and finite")
        if not (math.isfinite(self.time) and self.time >= 0):
            raise ValueError("time must be nonnegative")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "circulations", circ)
        object.__setattr__(self, "blob_radius", float(self.blob_radius))
        object.__setattr__(self, "time", float(self.time))

    @classmethod
    def from_particles(cls, particles: Sequence[Particle], blob_radius: float, time: float = 0.0) -> ParticleEnsemble:
        pos = np.array([p.position for p in particles], dtype=np.float64).reshape(-1, 2)
        circ = np.array([p.circulation for p in particles], dtype=np.float64)
        return cls(pos, circ, blob_radius, time)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def particles(self) -> Iterator[Particle]:
        for (x, y), g in zip(self.positions, self.circulations):
            yield Particle((float(x), float(y)), float(g))

    def with_positions(self, positions: FloatArray, time: float) -> ParticleEnsemble:
        return ParticleEnsemble(positions, self.circulations, self.blob_radius, time)

    def fingerprint(self) -> str:
        """SHA-256 over the little-endian bytes of positions, circulations and blob radius."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.positions, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.circulations, dtype="<f8").tobytes())
        h.update(np.float64(self.blob_radius).astype("<f8").tobytes())
        return h.hexdigest()

    def same_state(self, other: ParticleEnsemble) -> bool:
        return (
            self.blob_radius == other.blob_radius
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.circulations, other.circulations)
        )


def total_circulation(ensemble: ParticleEnsemble) -> float:
    """Exactly rounded sum of the circulations."""
    return math.fsum(ensemble.circulations.tolist())


@dataclass(frozen=True, eq=False)
class GridField:
    """Cell-centred scalar field on a uniform square lattice.

    ``origin`` is the lower-left corner of cell (0, 0); ``values[i, j]`` is the
    density at ``origin + ((i + 1/2) h, (j + 1/2) h)``.
    """

    origin: tuple[float, float]
    spacing: float
    values: FloatArray
    clipped_mass: float = 0.0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.spacing) and self.spacing > 0):
            raise ValueError("grid spacing must be positive")
        vals = np.array(self.values, dtype=np.float64, copy=True)
        if vals.ndim != 2 or vals.size == 0:
            raise ValueError("grid values must be a non-empty 2D array")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def nx(self) -> int:
        return self.values.shape[0]

    @property
    def ny(self) -> int:
        return self.values.shape[1]

    def cell_centers(self) -> tuple[FloatArray, FloatArray]:
        h = self.spacing
        xc = self.origin[0] + (np.arange(self.nx) + 0.5) * h
        yc = self.origin[1] + (np.arange(self.ny) + 0.5) * h
        return xc, yc

    def integral(self) -> float:
        return self.spacing**2 * math.fsum(self.values.ravel().tolist())

    def scaled(self, c: float) -> GridField:
        return GridField(self.origin, self.spacing, c * self.values, c * self.clipped_mass)


@dataclass(frozen=True)
class GridSpec:
    """Grid skeleton (no values) used as a deposition target."""

    origin: tuple[float, float]
    spacing: float
    nx: int
    ny: int

    def __post_init__(self) -> None:
        if not (math.isfinite(self.spacing) and self.spacing > 0):
            raise ValueError("grid spacing must be positive")
        if self.nx < 1 or self.ny < 1:
            raise ValueError("grid must have at least one cell")

    @classmethod
    def covering(cls, lower: Sequence[float], upper: Sequence[float], spacing: float) -> GridSpec:
        nx = max(1, int(math.ceil((upper[0] - lower[0]) / spacing - 1e-9)))
        ny = max(1, int(math.ceil((upper[1] - lower[1]) / spacing - 1e-9)))
        return cls((float(lower[0]), float(lower[1])), float(spacing), nx, ny)

    @property
    def upper(self) -> tuple[float, float]:
        return (self.origin[0] + self.nx * self.spacing, self.origin[1] + self.ny * self.spacing)

    def with_values(self, values: FloatArray) -> GridField:
        return GridField(self.origin, self.spacing, values)


@dataclass(frozen=True, eq=False)
class TrajectoryBundle:
    """Recorded particle paths: the empirical superposition measure.

    ``positions[k]`` holds every particle at ``snapshot_times[k]``.  The
    optional ``velocities[k]`` are the integrator's own velocity evaluations
    at that snapshot and ``fingerprints[k]`` the hash of the live ensemble.
    """

    snapshot_times: tuple[float, ...]
    positions: tuple[FloatArray, ...]
    circulations: FloatArray
    blob_radius: float
    velocities: tuple[FloatArray, ...] | None = None
    fingerprints: tuple[str, ...] | None = None
    step_indices: tuple[int, ...] | None = None
    config: object | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        times = tuple(float(t) for t in self.snapshot_times)
        if not times:
            raise ValueError("bundle needs at least one snapshot")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("snapshot times must be strictly increasing")
        circ = np.array(self.circulations, dtype=np.float64, copy=True)
        circ.setflags(write=False)
        pos = tuple(_frozen(p, (2,), "positions") for p in self.positions)
        if len(pos) != len(times):
            raise ValueError("one position array per snapshot required")
        if any(p.shape[0] != circ.shape[0] for p in pos):
            raise ValueError("every snapshot must hold one position per circulation")
        object.__setattr__(self, "snapshot_times", times)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "circulations", circ)
        if self.velocities is not None:
            vel = tuple(_frozen(v, (2,), "velocities") for v in self.velocities)
            if len(vel) != len(times):
                raise ValueError("one velocity array per snapshot required")
            object.__setattr__(self, "velocities", vel)
        if self.fingerprints is not None:
            object.__setattr__(self, "fingerprints", tuple(self.fingerprints))
        if self.step_indices is not None:
            object.__setattr__(self, "step_indices", tuple(int(k) for k in self.step_indices))

    def index_of(self, t: float) -> int:
        times = np.asarray(self.snapshot_times)
        k = int(np.argmin(np.abs(times - t)))
        if abs(times[k] - t) <= 1e-12 * max(1.0, abs(t)):
            return k
        lo = times[times < t]
        hi = times[times > t]
        near = ([float(lo[-1])] if lo.size else []) + ([float(hi[0])] if hi.size else [])
        raise SnapshotLookupError(f"t={t} is not a stored snapshot time; nearest stored times: {near}")

    def ensemble_at(self, k: int) -> ParticleEnsemble:
        return ParticleEnsemble(self.positions[k], self.circulations, self.blob_radius, self.snapshot_times[k])

    @property
    def initial(self) -> ParticleEnsemble:
        return self.ensemble_at(0)

    @property
    def last(self) -> ParticleEnsemble:
        return self.ensemble_at(len(self.snapshot_times) - 1)

    def concat(self, later: TrajectoryBundle) -> TrajectoryBundle:
        """Join a continuation whose first snapshot equals this bundle's last."""
        if later.snapshot_times[0] != self.snapshot_times[-1]:
            raise ValueError("continuation must start at the last stored time")
        if not np.array_equal(later.positions[0], self.positions[-1]):
            raise ValueError("continuation does not start from the stored state")

        def _join(a, b):
            return None if a is None or b is None else tuple(a) + tuple(b[1:])

        return TrajectoryBundle(
            self.snapshot_times + later.snapshot_times[1:],
            self.positions + later.positions[1:],
            self.circulations,
            self.blob_radius,
            velocities=_join(self.velocities, later.velocities),
            fingerprints=_join(self.fingerprints, later.fingerprints),
            step_indices=_join(self.step_indices, later.step_indices),
            config=self.config,
        )


def marginal(bundle: TrajectoryBundle, t: float) -> ParticleEnsemble:
    """Empirical pushforward of the path measure under evaluation at time ``t``."""
    return bundle.ensemble_at(bundle.index_of(t))


def lattice(box: Sequence[float], n_target: int) -> tuple[FloatArray, FloatArray, float]:
    """Cell centres of a uniform square lattice with about ``n_target`` cells over ``box``.

    The lattice is centred on the box, so symmetric boxes give symmetric lattices.
    """
    x0, y0, x1, y1 = map(float, box)
    lx, ly = x1 - x0, y1 - y0
    if not (lx > 0 and ly > 0):
        raise ScenarioError("domain box must have positive extent")
    if n_target < 1:
        raise ScenarioError("particle count target must be >= 1")
    h = math.sqrt(lx * ly / n_target)
    nx = max(1, int(round(lx / h)))
    ny = max(1, int(round(ly / h)))
    cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    xs = cx + (np.arange(nx) - 0.5 * (nx - 1)) * h
    ys = cy + (np.arange(ny) - 0.5 * (ny - 1)) * h
    return xs, ys, h


def build_initial_ensemble(scenario: Scenario) -> ParticleEnsemble:
    """Midpoint-rule discretization of the scenario's initial vorticity.

    Lattice profiles give one particle per occupied cell with circulation
    ``omega0(x_i) h^2``; cells below ``cutoff * max|Gamma|`` are dropped.
    Point-vortex data is passed through unchanged.
    """
    ic = scenario.initial
    if ic.kind == "point_vortices":
        vort = np.asarray(ic.vortices, dtype=np.float64).reshape(-1, 3)
        if vort.shape[0] == 0:
            raise EmptyEnsembleError("empty ensemble: no point vortices listed")
        if not np.isfinite(vort).all():
            raise ScenarioError("point vortex list contains non-finite values")
        delta = scenario.blob_radius if scenario.blob_radius is not None else 1e-8
        return ParticleEnsemble(vort[:, 1:3], vort[:, 0], delta, 0.0)

    if ic.kind == "grid_file":
        from .snapshot import read_snapshot

        snap = read_snapshot(ic.path)
        pos, circ = snap.ensemble.positions, snap.ensemble.circulations
        h = None
        delta = scenario.blob_radius if scenario.blob_radius is not None else snap.ensemble.blob_radius
    else:
        xs, ys, h = lattice(scenario.box, scenario.n_target)
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        with np.errstate(all="ignore"):
            w = np.asarray(ic.profile()(X, Y), dtype=np.float64)
        if w.shape != X.shape:
            w = np.broadcast_to(w, X.shape)
        if not np.isfinite(w).all():
            raise ScenarioError(f"initial profile '{ic.kind}' produced non-finite values")
        pos = np.column_stack([X.ravel(), Y.ravel()])
        circ = (w * h * h).ravel()
        delta = scenario.blob_radius if scenario.blob_radius is not None else scenario.blob_factor * h

    amax = float(np.max(np.abs(circ))) if circ.size else 0.0
    if amax == 0.0:
        raise EmptyEnsembleError("empty ensemble: initial vorticity vanishes on the lattice")
    keep = np.abs(circ) >= scenario.cutoff * amax
    keep &= circ != 0.0
    if not keep.any():
        raise EmptyEnsembleError("empty ensemble after circulation cutoff")
    ens = ParticleEnsemble(pos[keep], circ[keep], delta, 0.0)
    if h is not None:
        frac = ic.outside_mass_fraction(scenario.box)
        if frac > 1e-6:
            log.warning("initial vorticity mass fraction outside domain box: %.3e", frac)
        else:
            log.info("initial vorticity mass fraction outside domain box: %.3e", frac)
    return ens
