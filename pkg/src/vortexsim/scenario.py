"""Experiment descriptions and the scenario text format.

A scenario file is UTF-8 text made of ``[section]`` headers and
``key = value`` lines.  ``#`` starts a comment outside quoted strings.
Values are Python literals (numbers, strings, tuples, lists, ``None``,
``True``/``False``); a bare word such as ``rankine`` is read as a string and
``inf``/``nan`` as floats.  README.md lists every key; ``Scenario.to_text``
writes the canonical form.
"""

from __future__ import annotations

import ast
import hashlib
import json
import math
import re
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import integrate
from scipy.special import erf

from .core import ScenarioError
from .fields import DEFAULT_P_GRID
from .transport import IntegratorConfig
from .yudovich import YudovichProfile

FORMAT_VERSION = 1
INITIAL_KINDS = ("rankine", "gaussian", "vortex_pair", "grid_file", "point_vortices")
ALL_CHECKS = ("conservation", "weak_residual", "flow_property", "marginal_identity", "drift_integrability", "yudovich")


class ScenarioParseError(ScenarioError):
    def __init__(self, message: str, line: int, column: int, source: str = "<scenario>"):
        super().__init__(f"{source}:{line}:{column}: {message}")
        self.line = line
        self.column = column


@dataclass(frozen=True)
class InitialCondition:
    """Tagged initial datum.

    rankine: ``level`` on the disk of ``radius`` about ``center``.
    gaussian: ``amplitude * exp(-|x - center|^2 / width^2)``.
    vortex_pair: two gaussians at ``center +- (separation / 2, 0)``; the
    second is multiplied by ``sign`` (+1 co-rotating, -1 counter-rotating).
    grid_file: particles read from a snapshot file at ``path``.
    point_vortices: rows ``(circulation, x, y)`` in ``vortices``.
    """

    kind: str = "rankine"
    center: tuple[float, float] = (0.0, 0.0)
    radius: float = 1.0
    level: float = 1.0
    amplitude: float = 1.0
    width: float = 0.25
    separation: float = 1.0
    sign: float = 1.0
    path: str | None = None
    vortices: tuple[tuple[float, float, float], ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in INITIAL_KINDS:
            raise ScenarioError(f"unknown initial condition kind {self.kind!r}; expected one of {INITIAL_KINDS}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "vortices", tuple(tuple(float(v) for v in row) for row in self.vortices))
        if any(len(row) != 3 for row in self.vortices):
            raise ScenarioError("each point vortex is (circulation, x, y)")
        if self.kind == "rankine" and not self.radius > 0:
            raise ScenarioError("rankine radius must be positive")
        if self.kind in ("gaussian", "vortex_pair") and not self.width > 0:
            raise ScenarioError("gaussian width must be positive")
        if self.kind == "vortex_pair" and self.sign not in (1.0, -1.0):
            raise ScenarioError("vortex_pair sign must be +1 or -1")
        if self.kind == "grid_file" and not self.path:
            raise ScenarioError("grid_file initial condition needs a path")

    def profile(self) -> Callable:
        """Vectorized ``omega0(x, y)`` for the analytic kinds."""
        cx, cy = self.center
        if self.kind == "rankine":
            r2, lev = self.radius**2, self.level
            return lambda x, y: np.where((x - cx) ** 2 + (y - cy) ** 2 <= r2, lev, 0.0)
        if self.kind == "gaussian":
            a, w2 = self.amplitude, self.width**2
            return lambda x, y: a * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / w2)
        if self.kind == "vortex_pair":
            a, w2, s, hd = self.amplitude, self.width**2, self.sign, self.separation / 2
            return lambda x, y: a * (
                np.exp(-((x - cx - hd) ** 2 + (y - cy) ** 2) / w2) + s * np.exp(-((x - cx + hd) ** 2 + (y - cy) ** 2) / w2)
            )
        raise ScenarioError(f"initial condition {self.kind!r} has no analytic profile")

    def outside_mass_fraction(self, box: Sequence[float]) -> float:
        """Fraction of the |vorticity| mass that lies outside ``box``."""
        x0, y0, x1, y1 = map(float, box)
        if self.kind == "rankine":
            return _disk_fraction_outside(self.center, self.radius, (x0, y0, x1, y1))
        if self.kind in ("gaussian", "vortex_pair"):
            offsets = [0.0] if self.kind == "gaussian" else [self.separation / 2, -self.separation / 2]
            fr = []
            for off in offsets:
                cx, cy = self.center[0] + off, self.center[1]
                w = self.width
                inside = (erf((x1 - cx) / w) - erf((x0 - cx) / w)) * (erf((y1 - cy) / w) - erf((y0 - cy) / w)) / 4
                fr.append(1.0 - inside)
            return float(max(0.0, np.mean(fr)))
        return 0.0


def _disk_fraction_outside(center, radius, box) -> float:
    cx, cy = center
    x0, y0, x1, y1 = box
    a, b = max(x0, cx - radius), min(x1, cx + radius)
    if a >= b:
        return 1.0

    def chord(x: float) -> float:
        half = math.sqrt(max(radius * radius - (x - cx) ** 2, 0.0))
        return max(0.0, min(y1, cy + half) - max(y0, cy - half))

    inside, _ = integrate.quad(chord, a, b, limit=200, epsabs=1e-13)
    return max(0.0, 1.0 - inside / (math.pi * radius * radius))


@dataclass(frozen=True)
class Scenario:
    """Complete experiment description: initial data, numerics, diagnostics."""

    initial: InitialCondition = field(default_factory=InitialCondition)
    name: str = "scenario"
    box: tuple[float, float, float, float] = (-1.5, -1.5, 1.5, 1.5)
    n_target: int = 10_000
    blob_radius: float | None = None
    blob_factor: float = 2.0
    cutoff: float = 1e-14
    summation_mode: str = "tree"
    theta_mac: float = 0.5
    leaf_capacity: int = 16
    dt: float = 1e-3
    end_time: float = 1.0
    snapshot_interval: float = 1e-2
    scheme: str = "rk4"
    profile: YudovichProfile = field(default_factory=YudovichProfile)
    deposit_spacing: float | None = None
    deposit_margin: float = 0.2
    p_grid: tuple[float, ...] = DEFAULT_P_GRID
    uloc_p: float = 2.0
    modulus_pairs: int = 256
    diagnostics_every: int = 10
    checks: tuple[str, ...] = ALL_CHECKS
    test_functions: int = 5

    def __post_init__(self) -> None:
        object.__setattr__(self, "box", tuple(float(b) for b in self.box))
        object.__setattr__(self, "p_grid", tuple(float(p) for p in self.p_grid))
        object.__setattr__(self, "checks", tuple(self.checks))
        if len(self.box) != 4 or not (self.box[2] > self.box[0] and self.box[3] > self.box[1]):
            raise ScenarioError("box must be (xmin, ymin, xmax, ymax) with positive extent")
        if not (self.n_target >= 1):
            raise ScenarioError("n_particles must be >= 1")
        if self.blob_radius is not None and not self.blob_radius > 0:
            raise ScenarioError("blob_radius must be positive")
        if not self.blob_factor > 0:
            raise ScenarioError("blob_factor must be positive")
        if not (self.end_time >= 0 and math.isfinite(self.end_time)):
            raise ScenarioError("end_time must be >= 0")
        if not (0 <= self.cutoff < 1):
            raise ScenarioError("cutoff must lie in [0, 1)")
        if not self.p_grid or min(self.p_grid) < 1:
            raise ScenarioError("p_grid must be non-empty with every p >= 1")
        if self.diagnostics_every < 0 or self.modulus_pairs < 1 or self.test_functions < 0:
            raise ScenarioError("diagnostic counts must be nonnegative (modulus_pairs >= 1)")
        bad = [c for c in self.checks if c not in ALL_CHECKS]
        if bad:
            raise ScenarioError(f"unknown checks {bad}; known: {ALL_CHECKS}")
        try:
            cfg = self.integrator
            cfg.steps_to(self.end_time)
        except ValueError as e:
            raise ScenarioError(str(e)) from None

    @property
    def integrator(self) -> IntegratorConfig:
        return IntegratorConfig(
            dt=self.dt,
            scheme=self.scheme,
            summation_mode=self.summation_mode,
            theta_mac=self.theta_mac,
            leaf_capacity=self.leaf_capacity,
            snapshot_interval=self.snapshot_interval,
        )

    def with_(self, **changes) -> Scenario:
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["box"] = list(self.box)
        return d

    def fingerprint(self, *, include_end_time: bool = False) -> bytes:
        """SHA-256 key of the scenario and package version.

        ``end_time`` is excluded by default so extending a run keeps its key.
        """
        from . import __version__

        d = self.to_dict()
        if not include_end_time:
            d.pop("end_time")
        blob = json.dumps({"scenario": d, "version": __version__}, sort_keys=True, default=repr)
        return hashlib.sha256(blob.encode()).digest()

    def to_text(self) -> str:
        lines = [f"# scenario format {FORMAT_VERSION}"]
        for section, keys in _SCHEMA.items():
            lines.append(f"[{section}]")
            for key, (getter, _) in keys.items():
                val = getter(self)
                if val is None and key in _OPTIONAL_OMIT:
                    continue
                lines.append(f"{key} = {_literal(val)}")
            lines.append("")
        return "\n".join(lines)


def _literal(v) -> str:
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ("inf" if v > 0 else "-inf")
    if isinstance(v, str):
        return repr(v)
    if isinstance(v, tuple):
        return "(" + ", ".join(_literal(x) for x in v) + ("," if len(v) == 1 else "") + ")"
    return repr(v)


# section -> key -> (getter, setter-kind).  Setter kind is a
# ("scenario" | "initial" | "profile", attribute name) pair.
_SCHEMA: dict[str, dict[str, tuple[Callable, tuple[str, str]]]] = {
    "core": {
        "name": (lambda s: s.name, ("scenario", "name")),
        "initial": (lambda s: s.initial.kind, ("initial", "kind")),
        "center": (lambda s: s.initial.center, ("initial", "center")),
        "radius": (lambda s: s.initial.radius, ("initial", "radius")),
        "level": (lambda s: s.initial.level, ("initial", "level")),
        "amplitude": (lambda s: s.initial.amplitude, ("initial", "amplitude")),
        "width": (lambda s: s.initial.width, ("initial", "width")),
        "separation": (lambda s: s.initial.separation, ("initial", "separation")),
        "sign": (lambda s: s.initial.sign, ("initial", "sign")),
        "path": (lambda s: s.initial.path, ("initial", "path")),
        "vortices": (lambda s: s.initial.vortices, ("initial", "vortices")),
        "box": (lambda s: s.box, ("scenario", "box")),
        "n_particles": (lambda s: s.n_target, ("scenario", "n_target")),
        "blob_radius": (lambda s: s.blob_radius, ("scenario", "blob_radius")),
        "blob_factor": (lambda s: s.blob_factor, ("scenario", "blob_factor")),
        "cutoff": (lambda s: s.cutoff, ("scenario", "cutoff")),
    },
    "biot_savart": {
        "mode": (lambda s: s.summation_mode, ("scenario", "summation_mode")),
        "theta_mac": (lambda s: s.theta_mac, ("scenario", "theta_mac")),
        "leaf_capacity": (lambda s: s.leaf_capacity, ("scenario", "leaf_capacity")),
    },
    "transport": {
        "scheme": (lambda s: s.scheme, ("scenario", "scheme")),
        "dt": (lambda s: s.dt, ("scenario", "dt")),
        "end_time": (lambda s: s.end_time, ("scenario", "end_time")),
        "snapshot_interval": (lambda s: s.snapshot_interval, ("scenario", "snapshot_interval")),
    },
    "field_ops": {
        "profile": (lambda s: s.profile.kind, ("profile", "kind")),
        "profile_scale": (lambda s: s.profile.scale, ("profile", "scale")),
        "profile_alpha": (lambda s: s.profile.alpha, ("profile", "alpha")),
        "deposit_spacing": (lambda s: s.deposit_spacing, ("scenario", "deposit_spacing")),
        "deposit_margin": (lambda s: s.deposit_margin, ("scenario", "deposit_margin")),
        "p_grid": (lambda s: s.p_grid, ("scenario", "p_grid")),
        "uloc_p": (lambda s: s.uloc_p, ("scenario", "uloc_p")),
        "modulus_pairs": (lambda s: s.modulus_pairs, ("scenario", "modulus_pairs")),
        "diagnostics_every": (lambda s: s.diagnostics_every, ("scenario", "diagnostics_every")),
    },
    "verification": {
        "checks": (lambda s: s.checks, ("scenario", "checks")),
        "test_functions": (lambda s: s.test_functions, ("scenario", "test_functions")),
    },
}
_OPTIONAL_OMIT = {"path", "blob_radius", "deposit_spacing"}
_INT_KEYS = {"n_particles", "leaf_capacity", "modulus_pairs", "diagnostics_every", "test_functions"}
_SECTION_RE = re.compile(r"^\[\s*([A-Za-z_][A-Za-z0-9_]*)\s*\]$")
_KEY_RE = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)\s*=")
_BARE_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.\-]*$")


def _strip_comment(line: str) -> str:
    quote = None
    for i, ch in enumerate(line):
        if quote:
            if ch == quote:
                quote = None
        elif ch in "'\"":
            quote = ch
        elif ch == "#":
            return line[:i]
    return line


def _parse_value(text: str):
    t = text.strip()
    if t in ("inf", "+inf", "-inf", "nan"):
        return float(t)
    try:
        return ast.literal_eval(t)
    except (ValueError, SyntaxError) as e:
        if _BARE_RE.match(t):
            return t
        offset = getattr(e, "offset", None) or 1
        raise _ValueError(str(e).split(" (")[0], offset - 1) from None


class _ValueError(Exception):
    def __init__(self, msg: str, offset: int):
        super().__init__(msg)
        self.offset = offset


def parse_scenario(text: str, *, source: str = "<scenario>", base_dir: Path | None = None) -> Scenario:
    """Parse scenario text; errors carry 1-based line and column."""
    section = None
    seen: dict[tuple[str, str], int] = {}
    scen_kw: dict = {}
    ic_kw: dict = {}
    prof_kw: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = _strip_comment(raw)
        stripped = body.strip()
        if not stripped:
            continue
        col0 = len(body) - len(body.lstrip()) + 1
        m = _SECTION_RE.match(stripped)
        if m:
            section = m.group(1)
            if section not in _SCHEMA:
                raise ScenarioParseError(f"unknown section [{section}]; expected one of {list(_SCHEMA)}", lineno, col0, source)
            continue
        m = _KEY_RE.match(stripped)
        if not m:
            raise ScenarioParseError("expected '[section]' or 'key = value'", lineno, col0, source)
        if section is None:
            raise ScenarioParseError("key outside of any [section]", lineno, col0, source)
        key = m.group(1)
        if key not in _SCHEMA[section]:
            raise ScenarioParseError(f"unknown key {key!r} in [{section}]", lineno, col0, source)
        if (section, key) in seen:
            raise ScenarioParseError(f"duplicate key {key!r} (first set on line {seen[(section, key)]})", lineno, col0, source)
        seen[(section, key)] = lineno
        vtext = stripped[m.end():]
        vcol = col0 + m.end() + (len(vtext) - len(vtext.lstrip()))
        if not vtext.strip():
            raise ScenarioParseError(f"missing value for {key!r}", lineno, vcol, source)
        try:
            value = _parse_value(vtext)
        except _ValueError as e:
            raise ScenarioParseError(f"cannot parse value for {key!r}: {e}", lineno, vcol + e.offset, source) from None
        value = _coerce(key, value, lineno, vcol, source)
        target, attr = _SCHEMA[section][key][1]
        {"scenario": scen_kw, "initial": ic_kw, "profile": prof_kw}[target][attr] = value

    if ic_kw.get("kind") == "grid_file" and ic_kw.get("path") and base_dir is not None:
        p = Path(ic_kw["path"])
        if not p.is_absolute():
            ic_kw["path"] = str((base_dir / p).resolve())
    try:
        return Scenario(initial=InitialCondition(**ic_kw), profile=YudovichProfile(**prof_kw), **scen_kw)
    except ScenarioError:
        raise
    except (TypeError, ValueError) as e:
        raise ScenarioError(f"{source}: {e}") from None


def _coerce(key: str, value, line: int, col: int, source: str):
    if key in _INT_KEYS:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise ScenarioParseError(f"{key} must be an integer, got {value!r}", line, col, source)
        return int(value)
    if isinstance(value, list):
        value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
    return value


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise FileNotFoundError(f"scenario file not found: {path}") from None
    return parse_scenario(text, source=str(path), base_dir=path.parent)
