"""Geometries with a one-dimensional polar reduction.

A geometry is described by the orbit-volume function ``A(r)`` on an open
interval of the transversal curve (parametrized by arclength ``r``), plus
metadata on what happens at the two ends: fixed points of the action (where
``A`` vanishes like ``(r - end)**k``) or boundary points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np
from scipy import integrate, interpolate

from .expr import Expr, parse

EMPTY_BOUNDARY = "empty_boundary"
WITH_BOUNDARY = "with_boundary"


def sphere_measure(k: int) -> float:
    """Measure of the unit sphere S^k in R^(k+1)."""
    return 2.0 * math.pi ** ((k + 1) / 2) / math.gamma((k + 1) / 2)


@dataclass(frozen=True)
class OrbitVolume:
    """``r -> A(r)`` on ``(lo, hi)`` with endpoint vanishing orders.

    ``order_lo``/``order_hi`` is the exponent ``k`` with ``A ~ c (r - end)**k``
    at a finite end, or ``None`` when ``A`` has a positive limit there (or the
    end is infinite).
    """

    func: Callable
    lo: float
    hi: float
    order_lo: float | None = None
    order_hi: float | None = None
    deriv: Callable | None = None

    def __call__(self, r):
        return self.func(r)


@dataclass(frozen=True)
class Profile:
    """Profile curve ``t -> (R(t), Z(t))`` of a surface of revolution.

    ``t_of_r`` inverts the arclength ``r(t) = int_{t_lo}^t |gamma'|``.
    """

    R: Callable
    Z: Callable
    dR: Callable
    dZ: Callable
    t_lo: float
    t_hi: float
    length: float
    t_of_r: Callable

    def speed(self, t):
        return np.hypot(self.dR(t), self.dZ(t))

    def point(self, r):
        t = self.t_of_r(r)
        return self.R(t), self.Z(t)


@dataclass(frozen=True)
class GeometrySpec:
    name: str
    dim: int
    volume: OrbitVolume
    fixed_lo: bool = False
    fixed_hi: bool = False
    boundary_case: str = EMPTY_BOUNDARY
    profile: Profile | None = field(default=None, compare=False)

    @property
    def lo(self) -> float:
        return self.volume.lo

    @property
    def hi(self) -> float:
        return self.volume.hi

    @property
    def domain(self) -> tuple[float, float]:
        return (self.volume.lo, self.volume.hi)

    def A(self, r):
        return self.volume.func(r)

    def dA(self, r):
        if self.volume.deriv is not None:
            return self.volume.deriv(r)
        return _fd_derivative(self.volume.func, r, self.lo, self.hi)

    def contains(self, r) -> bool:
        return bool(np.all((np.asarray(r) > self.lo) & (np.asarray(r) < self.hi)))

    def log_derivative(self, r):
        return log_derivative(self, r)


def _fd_derivative(func, r, lo, hi):
    """Fourth-order central difference with the step kept inside (lo, hi)."""
    r = np.asarray(r, dtype=float)
    dist = np.minimum(r - lo, hi - r)
    h = np.minimum(1e-3 * np.maximum(1.0, np.abs(r)), 0.2 * dist)
    d = (-func(r + 2 * h) + 8 * func(r + h) - 8 * func(r - h) + func(r - 2 * h)) / (12 * h)
    return d if np.ndim(d) else float(d)


def log_derivative(geom: GeometrySpec, r):
    """``(ln A)'(r) = A'(r)/A(r)``, the drift coefficient of the reduced ODE."""
    if not geom.contains(r):
        raise ValueError(
            f"r={r!r} is not strictly inside the domain {geom.domain} of {geom.name}")
    return geom.dA(r) / geom.A(r)


# ---------------------------------------------------------------------------
# Catalog


def model_space(kind: str, n: int) -> GeometrySpec:
    """Constant-curvature model space of dimension ``n`` in geodesic polar coordinates."""
    if int(n) != n or n < 2:
        raise ValueError(f"dimension must be an integer >= 2, got {n!r}")
    n = int(n)
    w = sphere_measure(n - 1)
    k = n - 1
    if kind == "euclidean":
        func = lambda r: w * np.power(r, k)
        deriv = lambda r: w * k * np.power(r, k - 1)
        vol = OrbitVolume(func, 0.0, math.inf, float(k), None, deriv)
        prof = _flat_profile() if n == 2 else None
        return GeometrySpec(f"euclidean-{n}", n, vol, True, False, EMPTY_BOUNDARY, prof)
    if kind == "sphere":
        func = lambda r: w * np.sin(r) ** k
        deriv = lambda r: w * k * np.sin(r) ** (k - 1) * np.cos(r)
        vol = OrbitVolume(func, 0.0, math.pi, float(k), float(k), deriv)
        prof = _round_sphere_profile() if n == 2 else None
        return GeometrySpec(f"sphere-{n}", n, vol, True, True, EMPTY_BOUNDARY, prof)
    if kind == "hyperbolic":
        func = lambda r: w * np.sinh(r) ** k
        deriv = lambda r: w * k * np.sinh(r) ** (k - 1) * np.cosh(r)
        vol = OrbitVolume(func, 0.0, math.inf, float(k), None, deriv)
        return GeometrySpec(f"hyperbolic-{n}", n, vol, True, False, EMPTY_BOUNDARY)
    raise ValueError(f"unknown model space {kind!r}; expected euclidean, sphere or hyperbolic")


def _flat_profile():
    ident = lambda x: np.asarray(x, dtype=float) * 1.0
    return Profile(R=ident, Z=lambda t: 0.0 * np.asarray(t, dtype=float),
                   dR=lambda t: np.ones_like(np.asarray(t, dtype=float)),
                   dZ=lambda t: np.zeros_like(np.asarray(t, dtype=float)),
                   t_lo=0.0, t_hi=math.inf, length=math.inf, t_of_r=ident)


def _round_sphere_profile():
    ident = lambda x: np.asarray(x, dtype=float) * 1.0
    return Profile(R=np.sin, Z=np.cos, dR=np.cos, dZ=lambda t: -np.sin(t),
                   t_lo=0.0, t_hi=math.pi, length=math.pi, t_of_r=ident)


def warped_r3() -> GeometrySpec:
    """R^3 with the plane-translation action and conformal factor exp(-(x^2+y^2)).

    Every orbit is a plane of area ``int exp(-(x^2+y^2)) dx dy = pi``.
    """
    vol = OrbitVolume(lambda z: np.full(np.shape(z), math.pi) if np.ndim(z) else math.pi,
                      -math.inf, math.inf, None, None,
                      lambda z: np.zeros(np.shape(z)) if np.ndim(z) else 0.0)
    return GeometrySpec("warped-r3", 3, vol, False, False, EMPTY_BOUNDARY)


def sqrt_profile_surface() -> GeometrySpec:
    """Surface of revolution whose profile radius is ``sqrt(r)`` near the pole.

    ``A(r) = 2 pi sqrt(r)``; ``1/A`` is integrable at the pole (order 1/2).
    Modeled through its orbit volume: a unit-speed curve cannot have radius
    ``sqrt(r)`` for ``r < 1/4``.
    """
    c = 2.0 * math.pi
    vol = OrbitVolume(lambda r: c * np.sqrt(r), 0.0, math.inf, 0.5, None,
                      lambda r: 0.5 * c / np.sqrt(r))
    return GeometrySpec("sqrt-profile", 2, vol, True, False, EMPTY_BOUNDARY)


def from_volume_expression(A: str | Expr, lo: float, hi: float, dim: int = 2,
                           params=None, name: str = "custom") -> GeometrySpec:
    """Geometry from a user supplied ``A(r)`` expression on ``(lo, hi)``.

    Endpoints where ``A`` tends to 0 are flagged as fixed points and their
    vanishing order is fitted; other finite endpoints are boundary points.
    """
    expr = parse(A, params) if isinstance(A, str) else A
    if not expr.free_vars() <= {"r"}:
        raise ValueError(f"A(r) may only depend on r, got {sorted(expr.free_vars())}")
    dexpr = expr.diff("r")
    func = lambda r: expr.evaluate(r=np.asarray(r, dtype=float)) + 0.0 * np.asarray(r, dtype=float)
    deriv = lambda r: dexpr.evaluate(r=np.asarray(r, dtype=float)) + 0.0 * np.asarray(r, dtype=float)
    return _from_callable(func, deriv, float(lo), float(hi), dim, name)


def _from_callable(func, deriv, lo, hi, dim, name, profile=None):
    fixed_lo, order_lo = _endpoint_behaviour(func, lo, hi, +1)
    fixed_hi, order_hi = _endpoint_behaviour(func, hi, lo, -1)
    finite_boundary = ((math.isfinite(lo) and not fixed_lo)
                       or (math.isfinite(hi) and not fixed_hi))
    vol = OrbitVolume(func, lo, hi, order_lo, order_hi, deriv)
    case = WITH_BOUNDARY if finite_boundary else EMPTY_BOUNDARY
    return GeometrySpec(name, dim, vol, fixed_lo, fixed_hi, case, profile)


def _endpoint_behaviour(func, end, other, direction):
    """Return (is_fixed_point, vanishing_order) for a finite endpoint."""
    if not math.isfinite(end):
        return False, None
    span = (other - end) * direction if math.isfinite(other) else 1.0
    scale = min(abs(span), 1.0)
    d = scale * np.geomspace(1e-7, 1e-4, 8)
    vals = np.abs(np.asarray(func(end + direction * d), dtype=float))
    if not np.all(vals > 0):
        raise ValueError("A(r) vanishes identically near an endpoint")
    slope = float(np.polyfit(np.log(d), np.log(vals), 1)[0])
    if slope < 1e-3:
        return False, None
    return True, _snap(slope)


def fit_endpoint_order(func, end: float, other: float) -> float | None:
    """Log-log regression estimate of the vanishing order of ``func`` at ``end``."""
    direction = 1 if other > end else -1
    return _endpoint_behaviour(func, end, other, direction)[1]


def _snap(x: float) -> float:
    frac = Fraction(x).limit_denominator(12)
    return float(frac) if abs(float(frac) - x) < 2e-3 else x


# ---------------------------------------------------------------------------
# Surfaces of revolution


def revolution_surface(R, Z, t_lo: float, t_hi: float, dR=None, dZ=None,
                       name: str = "revolution", params=None,
                       segments: int = 512) -> GeometrySpec:
    """Surface swept by rotating the profile ``(R(t), Z(t))`` about the z-axis.

    ``R`` and ``Z`` are expressions in ``t`` (text or :class:`Expr`) or
    vectorised callables.  The profile is reparametrized by arclength and the
    orbit volume is ``A(r) = 2 pi R(t(r))``.
    """
    R, dR = _profile_fn(R, dR, params)
    Z, dZ = _profile_fn(Z, dZ, params)
    t_lo, t_hi = float(t_lo), float(t_hi)
    if not t_lo < t_hi:
        raise ValueError("profile interval must satisfy t_lo < t_hi")

    ts = np.linspace(t_lo, t_hi, segments + 1)
    tin = np.linspace(t_lo, t_hi, 4 * segments + 1)
    rvals = np.asarray(R(tin), dtype=float) + 0.0 * tin
    if np.any(rvals < -1e-14):
        i = int(np.argmax(rvals < -1e-14))
        raise ValueError(f"profile radius R(t) < 0 at t={tin[i]!r}")
    speed = lambda t: float(np.hypot(dR(t), dZ(t)))
    sp = np.hypot(np.asarray(dR(tin[1:-1]), dtype=float), np.asarray(dZ(tin[1:-1]), dtype=float))
    if np.any(sp <= 1e-12):
        i = int(np.argmax(sp <= 1e-12))
        raise ValueError(f"degenerate (zero-speed) parametrization at t={tin[1 + i]!r}")

    pieces = [integrate.quad(speed, a, b, epsabs=1e-14, epsrel=1e-13, limit=200)[0]
              for a, b in zip(ts[:-1], ts[1:])]
    rs = np.concatenate([[0.0], np.cumsum(pieces)])
    length = float(rs[-1])
    slope = 1.0 / np.hypot(np.asarray(dR(ts), dtype=float), np.asarray(dZ(ts), dtype=float))
    if not np.all(np.isfinite(slope)):
        # zero speed at an endpoint; fall back to a monotone interpolant there
        t_of_r = interpolate.PchipInterpolator(rs, ts)
    else:
        t_of_r = interpolate.CubicHermiteSpline(rs, ts, slope)

    def t_clip(r):
        return np.clip(t_of_r(np.clip(r, 0.0, length)), t_lo, t_hi)

    prof = Profile(R=R, Z=Z, dR=dR, dZ=dZ, t_lo=t_lo, t_hi=t_hi,
                   length=length, t_of_r=t_clip)
    two_pi = 2.0 * math.pi

    def func(r):
        out = two_pi * np.asarray(R(t_clip(r)), dtype=float)
        return out if out.ndim else float(out)

    def deriv(r):
        t = t_clip(r)
        out = two_pi * np.asarray(dR(t), dtype=float) / prof.speed(t)
        return out if np.ndim(out) else float(out)

    fixed_lo = abs(float(R(t_lo))) <= 1e-12
    fixed_hi = abs(float(R(t_hi))) <= 1e-12
    order_lo = _snap(_fit_order(func, 0.0, length)) if fixed_lo else None
    order_hi = _snap(_fit_order(func, length, 0.0)) if fixed_hi else None
    vol = OrbitVolume(func, 0.0, length, order_lo, order_hi, deriv)
    case = EMPTY_BOUNDARY if (fixed_lo and fixed_hi) else WITH_BOUNDARY
    return GeometrySpec(name, 2, vol, fixed_lo, fixed_hi, case, prof)


def _fit_order(func, end, other):
    direction = 1 if other > end else -1
    d = min(abs(other - end), 1.0) * np.geomspace(1e-5, 1e-3, 8)
    vals = np.abs(np.asarray(func(end + direction * d), dtype=float))
    return float(np.polyfit(np.log(d), np.log(vals), 1)[0])


def _profile_fn(fn, dfn, params):
    if isinstance(fn, (int, float)):
        fn = repr(float(fn))
    if isinstance(fn, str):
        fn = parse(fn, params)
    if isinstance(fn, Expr):
        expr = fn
        if not expr.free_vars() <= {"t"}:
            raise ValueError(f"profile expressions depend on t only, got {sorted(expr.free_vars())}")
        dexpr = expr.diff("t")
        f = lambda t: expr.evaluate(t=np.asarray(t, dtype=float)) + 0.0 * np.asarray(t, dtype=float)
        df = lambda t: dexpr.evaluate(t=np.asarray(t, dtype=float)) + 0.0 * np.asarray(t, dtype=float)
        return f, df
    if dfn is None:
        dfn = lambda t: _central(fn, t)
    return fn, dfn


def _central(fn, t, h=1e-5):
    t = np.asarray(t, dtype=float)
    return (fn(t + h) - fn(t - h)) / (2 * h)


def cylinder(radius: float = 1.0, height: float = 1.0) -> GeometrySpec:
    return revolution_surface(repr(float(radius)), "t", 0.0, height, name="cylinder")


def paraboloid(t_lo: float = 0.0, t_hi: float = 2.0) -> GeometrySpec:
    """Paraboloid z = x^2 + y^2 (truncated to ``t_lo <= sqrt(z) <= t_hi``)."""
    return revolution_surface("t", "t^2", t_lo, t_hi, name="paraboloid")


def profile_from_tables(t_R, R_vals, t_Z, Z_vals, name: str = "tabulated") -> GeometrySpec:
    """Revolution surface from sampled ``(t, R)`` and ``(t, Z)`` tables.

    Both tables are interpolated with monotone cubic (PCHIP) splines.
    """
    Ri = interpolate.PchipInterpolator(np.asarray(t_R, float), np.asarray(R_vals, float))
    Zi = interpolate.PchipInterpolator(np.asarray(t_Z, float), np.asarray(Z_vals, float))
    lo = max(float(np.min(t_R)), float(np.min(t_Z)))
    hi = min(float(np.max(t_R)), float(np.max(t_Z)))
    return revolution_surface(Ri, Zi, lo, hi, dR=Ri.derivative(), dZ=Zi.derivative(), name=name)


def profile_from_csv(path_R, path_Z, name: str = "tabulated") -> GeometrySpec:
    """Read two-column ``t,R`` and ``t,Z`` CSV files (an optional header is skipped)."""
    tR = _read_two_columns(path_R)
    tZ = _read_two_columns(path_Z)
    return profile_from_tables(tR[:, 0], tR[:, 1], tZ[:, 0], tZ[:, 1], name=name)


def _read_two_columns(path):
    with open(path) as fh:
        first = fh.readline()
    skip = 0
    try:
        [float(x) for x in first.strip().split(",")]
    except ValueError:
        skip = 1
    data = np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2)
    if data.shape[1] != 2:
        raise ValueError(f"{path}: expected two columns, found {data.shape[1]}")
    return data
