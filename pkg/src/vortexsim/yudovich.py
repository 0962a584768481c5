"""Yudovich growth profiles, the induced modulus of continuity and the Osgood integral."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy import integrate

KNOT = math.exp(-2.0)
LOG_KNOT = -2.0

ProfileKind = Literal["constant", "power", "log", "loglog"]


class OsgoodQuadratureError(RuntimeError):
    pass


@dataclass(frozen=True)
class YudovichProfile:
    """Non-decreasing growth function ``Theta: [1, inf) -> (0, inf)``.

    constant: ``scale``; power: ``scale * p**alpha``; log: ``scale * log(e + p)``;
    loglog: ``scale * log(e + p) * log(e + log(e + p))``.
    """

    kind: ProfileKind = "constant"
    scale: float = 1.0
    alpha: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("constant", "power", "log", "loglog"):
            raise ValueError(f"unknown Yudovich profile kind {self.kind!r}")
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ValueError("profile scale must be positive")
        if self.kind == "power" and not (math.isfinite(self.alpha) and self.alpha >= 0):
            raise ValueError("power exponent must be nonnegative")

    def __call__(self, p):
        p = np.asarray(p, dtype=np.float64)
        if np.any(p < 1):
            raise ValueError("Theta is defined for p >= 1 only")
        if self.kind == "constant":
            out = np.full_like(p, self.scale)
        elif self.kind == "power":
            out = self.scale * p**self.alpha
        elif self.kind == "log":
            out = self.scale * np.log(math.e + p)
        else:
            lg = np.log(math.e + p)
            out = self.scale * lg * np.log(math.e + lg)
        return out if out.ndim else float(out)

    @property
    def satisfies_osgood(self) -> bool:
        """Analytic answer to whether the integral of 1/(p Theta(p)) over [1, inf) diverges."""
        return not (self.kind == "power" and self.alpha > 0)

    def describe(self) -> str:
        if self.kind == "power":
            return f"power(scale={self.scale:g}, alpha={self.alpha:g})"
        return f"{self.kind}(scale={self.scale:g})"


def phi_theta(r, profile: YudovichProfile):
    """Modulus ``r (1 - log r) Theta(1 - log r)`` on (0, e^-2], 0 at 0, constant beyond e^-2."""
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0) or np.any(np.isnan(r)):
        raise ValueError("phi_theta needs r >= 0")
    rc = np.clip(r, np.finfo(float).tiny, KNOT)
    u = 1.0 - np.log(rc)
    out = rc * u * profile(u)
    out = np.where(r == 0.0, 0.0, out)
    return out if out.ndim else float(out)


def check_concavity(profile: YudovichProfile, n: int = 4001) -> bool:
    """Numerical concavity of phi_theta on [0, 2 e^-2] via second differences on a dense grid."""
    r = np.linspace(0.0, 2 * KNOT, n)
    f = phi_theta(r, profile)
    d2 = f[2:] - 2 * f[1:-1] + f[:-2]
    return bool(np.all(d2 <= 1e-12 * np.max(np.abs(f))))


def _resolve_log_eps(eps: float | None, log_eps: float | None) -> float:
    if (eps is None) == (log_eps is None):
        raise ValueError("give exactly one of eps or log_eps")
    if log_eps is None:
        if not (0 < eps < KNOT):
            raise ValueError("eps must lie in (0, e^-2)")
        log_eps = math.log(eps)
    if not log_eps < LOG_KNOT:
        raise ValueError("eps must lie in (0, e^-2)")
    return float(log_eps)


def osgood_integral(
    profile: YudovichProfile,
    eps: float | None = None,
    *,
    log_eps: float | None = None,
    rtol: float = 1e-6,
) -> float:
    """Integral of ``1 / phi_theta(r)`` over ``[eps, e^-2]``.

    ``log_eps`` lets callers reach endpoints such as e^-1000 that underflow
    in double precision.  The quadrature runs in the variable
    ``w = log(1 - log r)``, where the integrand becomes ``1 / Theta(e^w)``;
    this is an exact change of variables that removes the endpoint blow-up.
    """
    le = _resolve_log_eps(eps, log_eps)
    w_hi = math.log(1.0 - le)
    w_lo = math.log(3.0)

    def f(w: float) -> float:
        return 1.0 / float(profile(math.exp(w)))

    val, abserr, *rest = integrate.quad(f, w_lo, w_hi, epsabs=0.0, epsrel=rtol * 0.1, limit=500, full_output=1)
    if abserr > rtol * abs(val):
        raise OsgoodQuadratureError(
            f"Osgood quadrature did not converge: estimated relative error {abserr / abs(val):.2e} > {rtol:.1e}"
        )
    return val


@dataclass(frozen=True)
class OsgoodScan:
    log_eps: tuple[float, ...]
    values: tuple[float, ...]
    increments: tuple[float, ...]
    divergent: bool


def osgood_scan(
    profile: YudovichProfile, log_eps: tuple[float, ...] = (-10.0, -100.0, -1000.0), *, ratio: float = 0.4
) -> OsgoodScan:
    """Evaluate the Osgood integral along shrinking ``eps`` and classify the trend.

    ``log_eps`` should be geometrically spaced.  The scan is called
    convergent when the last increment has shrunk below ``ratio`` times the
    previous one (geometric decay); a heuristic, since no finite scan decides
    divergence, and slowly convergent profiles such as ``p**0.1`` read as
    divergent on short scans.
    """
    les = tuple(sorted(log_eps, reverse=True))
    if len(les) < 3:
        raise ValueError("need at least three scan points")
    vals = tuple(osgood_integral(profile, log_eps=le) for le in les)
    inc = tuple(b - a for a, b in zip(vals, vals[1:]))
    if any(d <= 0 for d in inc):
        raise ArithmeticError("Osgood scan is not increasing")
    divergent = inc[-1] > ratio * inc[-2]
    return OsgoodScan(les, vals, inc, divergent)
