"""Reduction of the radial problem to ODEs on the transversal interval.

For a radial function the equation ``-Δu + f(r, u) = 0`` becomes

    u'' + (ln A)' u' + f(r, u) = 0          (reduced form)
    (A u')' + A f(r, u) = 0                  (self-adjoint form)

and after the change of variables ``s = J(r) = int_{r0}^r dt / A(t)``

    z''(s) + A(r(s))^2 f(r(s), z(s)) = 0     (transformed form).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, interpolate, optimize
from scipy.special import expit, logit

from .expr import Expr, parse
from .geometry import GeometrySpec

REDUCED = "reduced"
SELF_ADJOINT = "self_adjoint"
TRANSFORMED = "transformed"

# Gauss-Legendre rule used on the table segments of J
_GL_X, _GL_W = np.polynomial.legendre.leggauss(10)


class DivergenceError(ValueError):
    """An improper integral that was required to converge diverges."""


def default_base_point(lo: float, hi: float) -> float:
    if math.isfinite(lo) and math.isfinite(hi):
        return 0.5 * (lo + hi)
    if math.isfinite(lo):
        return lo + max(1.0, abs(lo))
    if math.isfinite(hi):
        return hi - max(1.0, abs(hi))
    return 0.0


# ---------------------------------------------------------------------------
# Stretched coordinate: x in R <-> r in (lo, hi)


class _Stretch:
    """Smooth bijection from the real line onto the open interval (lo, hi)."""

    def __init__(self, lo, hi):
        self.lo, self.hi = lo, hi
        if math.isfinite(lo) and math.isfinite(hi):
            self.kind = "logistic"
        elif math.isfinite(lo):
            self.kind = "exp_lo"
        elif math.isfinite(hi):
            self.kind = "exp_hi"
        else:
            self.kind = "sinh"

    def to_r(self, x):
        x = np.asarray(x, dtype=float)
        lo, hi = self.lo, self.hi
        if self.kind == "logistic":
            w = hi - lo
            return np.where(x <= 0, lo + w * expit(x), hi - w * expit(-x))
        if self.kind == "exp_lo":
            return lo + np.exp(x)
        if self.kind == "exp_hi":
            return hi - np.exp(-x)
        return np.sinh(x)

    def dr_dx(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "logistic":
            return (self.hi - self.lo) * expit(x) * expit(-x)
        if self.kind == "exp_lo":
            return np.exp(x)
        if self.kind == "exp_hi":
            return np.exp(-x)
        return np.cosh(x)

    def to_x(self, r):
        r = np.asarray(r, dtype=float)
        lo, hi = self.lo, self.hi
        if self.kind == "logistic":
            w = hi - lo
            return np.where(r - lo <= hi - r, logit((r - lo) / w), -logit((hi - r) / w))
        if self.kind == "exp_lo":
            return np.log(r - lo)
        if self.kind == "exp_hi":
            return -np.log(hi - r)
        return np.arcsinh(r)


# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ChangeOfVariables:
    """``s = J(r) = int_{r0}^r dt/A(t)`` with its inverse and image ``(c1, c2)``.

    Build with :func:`build_change_of_variables`.  ``c1_status``/``c2_status``
    is one of ``"finite"``, ``"infinite"`` or ``"inconclusive"``.
    """

    geometry: GeometrySpec
    r0: float
    c1: float
    c2: float
    c1_status: str
    c2_status: str
    _stretch: _Stretch = field(repr=False)
    _x: np.ndarray = field(repr=False)
    _S: np.ndarray = field(repr=False)
    _inv: object = field(repr=False)

    @property
    def interval(self):
        return (self.c1, self.c2)

    @property
    def finite(self) -> bool:
        return math.isfinite(self.c1) and math.isfinite(self.c2)

    def _g(self, x):
        x = np.asarray(x, dtype=float)
        r = self._stretch.to_r(x)
        with np.errstate(all="ignore"):
            out = self._stretch.dr_dx(x) / _safe_A(self.geometry, r)
        return np.where(np.isfinite(out), out, 0.0)

    def _S_at(self, x):
        """Cumulative integral of g from the base point to x (vectorised)."""
        x = np.asarray(x, dtype=float)
        xs, S = self._x, self._S
        h = xs[1] - xs[0]
        k = np.clip(np.floor((x - xs[0]) / h).astype(int), 0, len(xs) - 2)
        inside = (x >= xs[0]) & (x <= xs[-1])
        a = xs[k]
        half = 0.5 * (x - a)
        nodes = a[..., None] + half[..., None] * (_GL_X + 1.0)
        val = S[k] + half * np.sum(_GL_W * self._g(nodes), axis=-1)
        if np.all(inside):
            return val
        out = np.array(val, dtype=float)
        for idx in zip(*np.nonzero(~inside)) if out.ndim else [()]:
            xi = float(x[idx])
            end = xs[-1] if xi > xs[-1] else xs[0]
            base = S[-1] if xi > xs[-1] else S[0]
            out[idx] = base + integrate.quad(self._g, end, xi, limit=400,
                                             epsabs=1e-13, epsrel=1e-12)[0]
        return out

    def forward(self, r):
        """``J(r)``; vectorised over ``r``."""
        r_arr = np.asarray(r, dtype=float)
        g = self.geometry
        if np.any((r_arr <= g.lo) | (r_arr >= g.hi)):
            raise ValueError(f"r outside the open domain {g.domain}")
        out = self._S_at(self._stretch.to_x(r_arr))
        return out if np.ndim(out) else float(out)

    __call__ = forward

    def inverse(self, s):
        """``r = J^{-1}(s)``; vectorised over ``s``."""
        s_arr = np.asarray(s, dtype=float)
        if np.any((s_arr <= self.c1) | (s_arr >= self.c2)):
            raise ValueError(f"s outside the image interval ({self.c1}, {self.c2})")
        S = self._S
        inside = (s_arr >= S[0]) & (s_arr <= S[-1])
        x = np.array(self._inv(np.clip(s_arr, S[0], S[-1])), dtype=float)
        # one Newton polish in x; dS/dx = g
        gx = self._g(x)
        x = x - (self._S_at(x) - np.clip(s_arr, S[0], S[-1])) / np.where(gx > 0, gx, 1.0)
        if not np.all(inside):
            x = np.array(x, dtype=float)
            for idx in zip(*np.nonzero(~inside)) if x.ndim else [()]:
                x[idx] = self._solve_outside(float(s_arr[idx]))
        r = self._stretch.to_r(x)
        return r if np.ndim(r) else float(r)

    def _solve_outside(self, s):
        xs, S = self._x, self._S
        if s > S[-1]:
            a, step = xs[-1], 4.0
        else:
            a, step = xs[0], -4.0
        b = a
        for _ in range(200):
            b = b + step
            if (self._S_at(b) - s) * (self._S_at(a) - s) <= 0:
                break
            a = b
            step *= 1.5
        else:
            raise ValueError(f"could not bracket J^(-1)({s})")
        from scipy.optimize import brentq
        lo, hi = min(a, b), max(a, b)
        return brentq(lambda x: float(self._S_at(x)) - s, lo, hi, xtol=1e-14, rtol=1e-15)

    def dr_ds(self, s):
        return self.geometry.A(self.inverse(s))

    def A_of_s(self, s):
        return self.geometry.A(self.inverse(s))


def _safe_A(geom, r):
    r = np.asarray(r, dtype=float)
    try:
        with np.errstate(all="ignore"):
            return np.asarray(geom.A(r), dtype=float) + 0.0 * r
    except Exception:
        out = np.empty_like(r)
        for idx in np.ndindex(r.shape):
            try:
                out[idx] = float(geom.A(float(r[idx])))
            except Exception:
                out[idx] = np.nan
        return out


def build_change_of_variables(geom: GeometrySpec, r0: float | None = None,
                              half_width: float = 40.0, step: float = 0.025
                              ) -> ChangeOfVariables:
    """Tabulate ``J`` around ``r0`` and classify the image endpoints.

    Endpoint limits use the stored vanishing orders (order >= 1 at a fixed
    point makes the limit infinite); otherwise the tail of the integral is
    examined and computed by improper quadrature.
    """
    lo, hi = geom.domain
    if r0 is None:
        r0 = default_base_point(lo, hi)
    if not lo < r0 < hi:
        raise ValueError(f"base point r0={r0} is not interior to {geom.domain}")
    st = _Stretch(lo, hi)
    x0 = float(st.to_x(r0))

    # interior positivity on a coarse sweep
    xs_probe = x0 + np.linspace(-half_width, half_width, 2001)
    rp = st.to_r(xs_probe)
    Ap = _safe_A(geom, rp)
    ok = np.isfinite(Ap) & (Ap > 0) & (rp > lo) & (rp < hi)
    i0 = int(np.argmin(np.abs(xs_probe - x0)))
    if not ok[i0]:
        raise ValueError(f"A(r0) is not positive and finite at r0={r0}")
    left = i0
    while left > 0 and ok[left - 1]:
        left -= 1
    right = i0
    while right < len(ok) - 1 and ok[right + 1]:
        right += 1
    bad_inside = [k for k in (left - 1, right + 1) if 0 <= k < len(ok)
                  and np.isfinite(Ap[k]) and Ap[k] <= 0 and rp[k] > lo and rp[k] < hi
                  and abs(rp[k] - lo) > 1e-9 * max(1, abs(lo)) and abs(hi - rp[k]) > 1e-9 * max(1, abs(hi))]
    if bad_inside:
        raise ValueError(f"A has an interior zero near r={rp[bad_inside[0]]!r}")
    # zeros that fall between probe points show up as sharp local minima
    core = np.arange(left + 1, right)
    dips = core[(Ap[core] < Ap[core - 1]) & (Ap[core] < Ap[core + 1])]
    scale = float(np.max(Ap[left:right + 1]))
    for k in dips:
        res = optimize.minimize_scalar(lambda x: float(_safe_A(geom, st.to_r(x))),
                                       bounds=(xs_probe[k - 1], xs_probe[k + 1]),
                                       method="bounded", options={"xatol": 1e-14})
        if res.fun <= 1e-8 * scale:
            raise ValueError(f"A has an interior zero near r={float(st.to_r(res.x))!r}")

    n_left = int((x0 - xs_probe[left]) / step)
    n_right = int((xs_probe[right] - x0) / step)
    xs = x0 + step * np.arange(-n_left, n_right + 1)

    dummy = ChangeOfVariables(geom, r0, -math.inf, math.inf, "", "", st, xs,
                              np.zeros_like(xs), None)
    half = 0.5 * step
    nodes = xs[:-1, None] + half * (_GL_X + 1.0)
    pieces = half * np.sum(_GL_W * dummy._g(nodes), axis=1)
    # accumulate outward from the base point to avoid cancellation
    S = np.concatenate([-np.cumsum(pieces[:n_left][::-1])[::-1], [0.0],
                        np.cumsum(pieces[n_left:])])
    # keep the strictly increasing core (increments may underflow in the tails)
    inc = np.diff(S) > 0
    a = n_left
    while a > 0 and inc[a - 1]:
        a -= 1
    b = n_left
    while b < len(inc) and inc[b]:
        b += 1
    xs, S = xs[a:b + 1], S[a:b + 1]

    c1, st1 = _endpoint_limit(geom, dummy, st, xs[0], S[0], -1)
    c2, st2 = _endpoint_limit(geom, dummy, st, xs[-1], S[-1], +1)

    r_nodes = st.to_r(xs)
    A_nodes = _safe_A(geom, r_nodes)
    dA_nodes = np.asarray(geom.dA(r_nodes), dtype=float) + 0.0 * r_nodes
    # quintic Hermite for x(s): dx/ds = 1/g, d2x/ds2 = -g'/g^3
    g_nodes = st.dr_dx(xs) / A_nodes
    d2r_dx2 = _d2r_dx2(st, xs)
    dg = (d2r_dx2 * A_nodes - st.dr_dx(xs) ** 2 * dA_nodes) / A_nodes ** 2
    derivs = np.stack([xs, 1.0 / g_nodes, -dg / g_nodes ** 3], axis=1)
    if not np.all(np.isfinite(derivs)):
        derivs = derivs[:, :2]
    inv = interpolate.BPoly.from_derivatives(S, derivs, extrapolate=True)
    return ChangeOfVariables(geom, float(r0), c1, c2, st1, st2, st, xs, S, inv)


def _d2r_dx2(st, x):
    if st.kind == "logistic":
        e = expit(x)
        return (st.hi - st.lo) * e * (1 - e) * (1 - 2 * e)
    if st.kind == "exp_lo":
        return np.exp(x)
    if st.kind == "exp_hi":
        return -np.exp(-x)
    return np.sinh(x)


def _endpoint_limit(geom, cov, st, x_end, S_end, direction):
    """Limit of J at one end: (value, status)."""
    sign = float(direction)
    end = geom.hi if direction > 0 else geom.lo
    order = geom.volume.order_hi if direction > 0 else geom.volume.order_lo
    if math.isfinite(end) and order is not None and order >= 1:
        return sign * math.inf, "infinite"
    if math.isfinite(end):
        tail = integrate.quad(cov._g, x_end, sign * math.inf, limit=400,
                              epsabs=1e-13, epsrel=1e-12)[0]
        return S_end + tail, "finite"
    # infinite end: decide from the decay of g in the stretched coordinate
    probe = x_end + sign * np.array([0.0, 4.0, 8.0, 12.0, 16.0])
    gv = cov._g(probe)
    if np.all(gv > 0):
        ratios = gv[1:] / gv[:-1]
        if np.all(ratios < 0.7):
            tail = integrate.quad(cov._g, x_end, sign * math.inf, limit=400,
                                  epsabs=1e-13, epsrel=1e-12)[0]
            return S_end + tail, "finite"
        if np.all(ratios > 0.98):
            return sign * math.inf, "infinite"
    elif np.all(gv[1:] == 0):
        tail = integrate.quad(cov._g, x_end, x_end + sign * 16.0, limit=400)[0]
        return S_end + tail, "finite"
    # Richardson-style look at truncated integrals
    Xs = x_end + sign * np.array([8.0, 16.0, 32.0, 64.0])
    vals = [integrate.quad(cov._g, x_end, X, limit=400)[0] for X in Xs]
    d = np.abs(np.diff(vals))
    if d[-1] < 1e-10 * max(1.0, abs(vals[-1])) and d[-1] <= d[0]:
        return S_end + vals[-1], "finite"
    return sign * math.inf, "inconclusive"


# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RadialODE:
    """Second-order radial ODE in one of its three equivalent forms."""

    coordinate: str  # "r" or "s"
    geometry: GeometrySpec
    f: Expr
    domain: tuple[float, float]
    form: str
    cov: ChangeOfVariables | None = None

    def f_at(self, r, y):
        if np.ndim(r) == 0 and np.ndim(y) == 0:
            return self.f.scalar(r=float(r), y=float(y))
        r = np.asarray(r, dtype=float)
        y = np.asarray(y, dtype=float)
        val = self.f.evaluate(r=r, y=y)
        out = np.asarray(val, dtype=float) + 0.0 * (r + y)
        return out if out.ndim else float(out)

    def drift(self, r):
        """Coefficient of ``u'`` in the reduced form, ``(ln A)'(r)``."""
        return self.geometry.dA(r) / self.geometry.A(r)

    def weight(self, s):
        """Coefficient ``A(r(s))^2`` of the transformed form."""
        return self.geometry.A(self.cov.inverse(s)) ** 2

    def second_derivative(self, x, u, du):
        """``u''`` implied by the ODE at coordinate ``x``."""
        if self.coordinate == "r":
            return -self.drift(x) * du - self.f_at(x, u)
        r = self.cov.inverse(x)
        return -self.geometry.A(r) ** 2 * self.f_at(r, u)

    def rhs(self, x, state):
        """First-order system ``(u, u')' = (u', u'')``."""
        u, du = state[0], state[1]
        return np.array([du, self.second_derivative(x, u, du)])

    def residual(self, x, u, du, d2u):
        if self.coordinate == "r":
            return d2u + self.drift(x) * du + self.f_at(x, u)
        r = self.cov.inverse(x)
        return d2u + self.geometry.A(r) ** 2 * self.f_at(r, u)

    def self_adjoint_residual(self, r, u, du, d2u):
        """``(A u')' + A f`` expanded as ``A u'' + A' u' + A f``."""
        A = self.geometry.A(r)
        return A * d2u + self.geometry.dA(r) * du + A * self.f_at(r, u)


def reduce(geom: GeometrySpec, f: Expr | str, params=None) -> RadialODE:
    """Reduced radial ODE ``u'' + (ln A)' u' + f(r, u) = 0`` on the geometry."""
    if isinstance(f, str):
        f = parse(f, params)
    extra = f.free_vars() - {"r", "y"}
    if extra:
        raise ValueError(
            f"f must depend only on (r, y); found non-radial variables {sorted(extra)}")
    return RadialODE("r", geom, f, geom.domain, REDUCED)


def transform(ode: RadialODE, cov: ChangeOfVariables) -> RadialODE:
    """Transformed ODE ``z'' + A(r(s))^2 f(r(s), z) = 0`` on ``(c1, c2)``."""
    if ode.coordinate != "r":
        raise ValueError("transform expects an ODE in the r coordinate")
    if cov.geometry is not ode.geometry:
        raise ValueError("change of variables belongs to a different geometry")
    return RadialODE("s", ode.geometry, ode.f, (cov.c1, cov.c2), TRANSFORMED, cov)


def rho(geom: GeometrySpec, a: float, r):
    """``rho(r) = int_a^r dt / A(t)``, integrable singularity at ``a`` allowed.

    Uses the substitution ``t = a + tau**(1/(1-k))`` for an endpoint of
    vanishing order ``k < 1``.
    """
    k = _order_at(geom, a)
    if k >= 1:
        raise DivergenceError(
            f"1/A is not integrable at a={a}: A vanishes to order {k} >= 1")
    m = 1.0 / (1.0 - k)

    def integrand(tau):
        t = a + tau ** m
        return m * tau ** (m - 1.0) / geom.A(t) if tau > 0 else _limit_integrand(geom, a, k, m)

    def one(rv):
        if rv == a:
            return 0.0
        if rv < a:
            raise ValueError("rho is defined for r > a")
        upper = (rv - a) ** (1.0 - k)
        return integrate.quad(integrand, 0.0, upper, epsabs=1e-13, epsrel=1e-11, limit=400)[0]

    r_arr = np.asarray(r, dtype=float)
    out = np.vectorize(one, otypes=[float])(r_arr)
    return out if out.ndim else float(out)


def _limit_integrand(geom, a, k, m):
    d = 1e-12
    return m * d ** (k * m) / geom.A(a + d ** m) if k > 0 else m / geom.A(a + 1e-300)


def _order_at(geom, a):
    if a == geom.lo:
        k = geom.volume.order_lo
    elif a == geom.hi:
        k = geom.volume.order_hi
    elif geom.lo < a < geom.hi:
        return 0.0
    else:
        raise ValueError(f"a={a} is outside the closed domain {geom.domain}")
    return 0.0 if k is None else float(k)


def rho_infinity(geom: GeometrySpec, a: float) -> float:
    """``lim_{r -> hi} rho(r)`` (may be ``inf``)."""
    cov = build_change_of_variables(geom, default_base_point(geom.lo, geom.hi))
    if cov.c2_status != "finite":
        return math.inf
    r1 = cov.r0 if cov.r0 > a else 0.5 * (a + cov.r0)
    return float(rho(geom, a, r1)) + (cov.c2 - float(cov.forward(r1)))


def g_theta(theta: float, c1: float, c2: float, s):
    """Tent function ``theta/(c2-c1) * min(s - c1, c2 - s)``."""
    if not (math.isfinite(c1) and math.isfinite(c2) and c1 < c2):
        raise ValueError("g_theta needs finite c1 < c2")
    s = np.asarray(s, dtype=float)
    out = theta / (c2 - c1) * np.minimum(s - c1, c2 - s)
    return out if out.ndim else float(out)
