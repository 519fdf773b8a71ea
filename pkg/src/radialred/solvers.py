"""Numerical solvers for the reduced radial problem.

* initial value problems in ``r`` or ``s`` (embedded RK 4(5), dense output),
* starting from a pole through the regular series,
* the singular two-point problem on ``(0, 1)`` by shooting,
* Picard iteration on the two integral representations on ``(a, inf)``,
* the concavity test behind the nonexistence result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import legendre
from scipy import integrate, interpolate, optimize

from .expr import DomainError, Expr, parse
from .geometry import GeometrySpec
from .reduction import (ChangeOfVariables, RadialODE, build_change_of_variables,
                        reduce, transform)

IVP = "ivp"
BVP_SHOOTING = "bvp_shooting"
PICARD_SUBLINEAR = "picard_sublinear"
PICARD_NEGATIVE_POWER = "picard_negative_power"
POLE_SERIES = "pole_series"

# The stepper's local error target is this fraction of the requested tol, so
# that accumulated (global) error on O(1) windows stays near tol.
LOCAL_SAFETY = 0.1


class SolverError(RuntimeError):
    """A solver failed; ``diagnostics`` carries what is known about why."""

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class ShootingError(SolverError):
    pass


class PositivityError(SolverError):
    pass


class NonContractionError(SolverError):
    pass


class CollapseError(SolverError):
    pass


# ---------------------------------------------------------------------------


@dataclass
class RadialSolution:
    """Dense numeric solution ``u`` (or ``z``) with its first derivative.

    Interpolation between grid points is cubic Hermite.  When nodal second
    derivatives are known (``second``, filled from the ODE right-hand side
    for integrator output) the interpolant is upgraded to quintic Hermite;
    otherwise ``second_derivative`` uses local quintic fits over three
    neighbouring nodes.
    """

    coordinate: str
    grid: np.ndarray
    values: np.ndarray
    derivatives: np.ndarray
    provenance: str
    info: dict = field(default_factory=dict)
    second: np.ndarray | None = None

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.derivatives = np.asarray(self.derivatives, dtype=float)
        if self.grid.ndim != 1 or len(self.grid) < 2:
            raise ValueError("a solution needs at least two grid points")
        if np.any(np.diff(self.grid) <= 0):
            raise ValueError("solution grid must be strictly increasing")
        if not (np.all(np.isfinite(self.values)) and np.all(np.isfinite(self.derivatives))):
            raise ValueError("solution values and derivatives must be finite")
        if self.second is not None:
            self.second = np.asarray(self.second, dtype=float)
            if not np.all(np.isfinite(self.second)):
                self.second = None
        # interpolate the offset from the first value so constants come back exactly
        self._offset = float(self.values[0])
        shifted = self.values - self._offset
        if self.second is not None:
            table = np.column_stack([shifted, self.derivatives, self.second])
            self._spline = interpolate.BPoly.from_derivatives(self.grid, table)
        else:
            self._spline = interpolate.CubicHermiteSpline(self.grid, shifted, self.derivatives)

    @property
    def window(self) -> tuple[float, float]:
        return (float(self.grid[0]), float(self.grid[-1]))

    @property
    def interpolation(self) -> str:
        return "quintic_hermite" if self.second is not None else "cubic_hermite"

    def _at_nodes(self, x, out, nodal):
        """Replace interpolant values at exact grid points by the stored ones."""
        x = np.asarray(x, dtype=float)
        j = np.clip(np.searchsorted(self.grid, x), 0, len(self.grid) - 1)
        hit = self.grid[j] == x
        if np.ndim(out) == 0:
            return float(nodal[j]) if hit else float(out)
        if np.any(hit):
            out = np.array(out, dtype=float)
            out[hit] = nodal[j[hit]]
        return out

    def __call__(self, x):
        return self._at_nodes(x, self._offset + self._spline(x), self.values)

    def derivative(self, x):
        return self._at_nodes(x, self._spline(x, 1), self.derivatives)

    def second_derivative(self, x):
        if self.second is not None:
            out = self._spline(x, 2)
            return out if np.ndim(out) else float(out)
        x = np.asarray(x, dtype=float)
        g, u, du = self.grid, self.values, self.derivatives
        if len(g) < 3:
            out = self._spline(x, 2)
            return out if np.ndim(out) else float(out)
        # 3-node stencil centred on the nearest node
        j = np.clip(np.searchsorted(g, x), 1, len(g) - 1)
        nearest = np.where(np.abs(g[j] - x) < np.abs(g[j - 1] - x), j, j - 1)
        k = np.clip(nearest - 1, 0, len(g) - 3)
        out = _quintic_d2(g, u, du, np.atleast_1d(k), np.atleast_1d(x)).reshape(x.shape)
        return out if out.ndim else float(out)

    def restrict(self, lo, hi) -> "RadialSolution":
        keep = (self.grid >= lo) & (self.grid <= hi)
        sec = None if self.second is None else self.second[keep]
        return RadialSolution(self.coordinate, self.grid[keep], self.values[keep],
                              self.derivatives[keep], self.provenance, dict(self.info), sec)


def _quintic_d2(g, u, du, k, x):
    """Second derivative at x of the quintic matching (u, u') at g[k:k+3]."""
    out = np.empty(len(x))
    for i, (kk, xx) in enumerate(zip(k, x)):
        nodes = g[kk:kk + 3]
        c = nodes[1]
        sc = max(nodes[2] - nodes[0], 1e-300)
        z = (nodes - c) / sc
        M = np.zeros((6, 6))
        rhs = np.zeros(6)
        for j in range(3):
            M[j] = z[j] ** np.arange(6)
            M[3 + j, 1:] = np.arange(1, 6) * z[j] ** np.arange(5)
            rhs[j] = u[kk + j]
            rhs[3 + j] = du[kk + j] * sc
        coef = np.linalg.solve(M, rhs)
        zz = (xx - c) / sc
        d2 = sum(n * (n - 1) * coef[n] * zz ** (n - 2) for n in range(2, 6))
        out[i] = d2 / sc ** 2
    return out


# ---------------------------------------------------------------------------
# Initial value problems


def _integrate(fun, x0, y0, x_end, tol, max_step=math.inf, dense_points=0, stop=None,
               underflow=1e-12):
    """Integrate the 2-d system from x0 to x_end with scipy's RK45 stepper.

    Returns (xs, ys, flags).  Integration stops early on step-size underflow
    below ``underflow * |x_end - x0|`` (blow-up), a non-finite state, an
    evaluation error, or when ``stop(x, y)`` returns True.
    """
    L = abs(x_end - x0)
    xs, ys = [x0], [np.array(y0, dtype=float)]
    flags = {"blowup": False, "stopped": False, "eval_error": None, "steps": 0}
    if L == 0:
        return np.array(xs), np.array(ys), flags

    err_box = {}

    def wrapped(x, y):
        try:
            out = fun(x, y)
        except DomainError as exc:
            err_box["error"] = (x, str(exc))
            return np.full(2, np.nan)
        return out

    try:
        solver = integrate.RK45(wrapped, x0, np.array(y0, dtype=float), x_end,
                                rtol=LOCAL_SAFETY * tol, atol=LOCAL_SAFETY * tol,
                                max_step=max_step)
    except Exception as exc:  # initial derivative evaluation failed
        raise SolverError(f"cannot start integration at {x0}: {exc}", location=x0)
    if "error" in err_box:
        raise SolverError(f"cannot evaluate the ODE at the start: {err_box['error'][1]}",
                          location=x0)
    while solver.status == "running":
        t_prev = solver.t
        msg = solver.step()
        if "error" in err_box:
            flags["eval_error"] = err_box["error"]
            break
        if solver.status == "failed" or not np.all(np.isfinite(solver.y)):
            flags["blowup"] = True
            flags["blowup_at"] = float(t_prev)
            flags["message"] = msg or "non-finite state"
            break
        flags["steps"] += 1
        if dense_points:
            dense = solver.dense_output()
            for frac in np.arange(1, dense_points + 1) / (dense_points + 1):
                xm = t_prev + frac * (solver.t - t_prev)
                xs.append(xm)
                ys.append(dense(xm))
        xs.append(solver.t)
        ys.append(solver.y.copy())
        if stop is not None and stop(solver.t, solver.y):
            flags["stopped"] = True
            break
        if solver.status == "running" and solver.step_size < underflow * L:
            flags["blowup"] = True
            flags["blowup_at"] = float(solver.t)
            flags["message"] = "step size underflow"
            break
    return np.array(xs), np.array(ys), flags


def solve_ivp(ode: RadialODE, r_init: float, u0: float, du0: float,
              window: tuple[float, float], tol: float = 1e-8, *,
              max_step: float = math.inf, dense_points: int = 0) -> RadialSolution:
    """Solve the radial ODE with data ``u(r_init) = u0, u'(r_init) = du0``.

    Integrates forward and backward from ``r_init`` (an ``s`` value for an
    ODE in the ``s`` coordinate) to cover ``window``.  On
    blow-up the maximal subwindow reached is returned with
    ``info["blowup"] = True``.
    """
    lo, hi = float(window[0]), float(window[1])
    if not lo <= r_init <= hi or not lo < hi:
        raise ValueError(f"initial point {r_init} outside the window {window}")
    dlo, dhi = ode.domain
    if not dlo < lo < hi < dhi:
        raise ValueError(f"window {window} is not strictly inside the domain {ode.domain}")
    y0 = np.array([u0, du0], dtype=float)
    xf, yf, ff = _integrate(ode.rhs, r_init, y0, hi, tol, max_step, dense_points)
    xb, yb, fb = _integrate(ode.rhs, r_init, y0, lo, tol, max_step, dense_points)
    xs = np.concatenate([xb[::-1], xf[1:]])
    ys = np.concatenate([yb[::-1], yf[1:]])
    info = {"tol": tol, "steps": ff["steps"] + fb["steps"],
            "blowup": ff["blowup"] or fb["blowup"],
            "eval_error": ff["eval_error"] or fb["eval_error"]}
    for side, fl in (("forward", ff), ("backward", fb)):
        if fl["blowup"]:
            info[f"blowup_{side}_at"] = fl["blowup_at"]
            info[f"blowup_{side}_message"] = fl["message"]
    if len(xs) < 2:
        raise SolverError("integration made no progress", **info)
    xs, idx = np.unique(xs, return_index=True)
    ys = ys[idx]
    return RadialSolution(ode.coordinate, xs, ys[:, 0], ys[:, 1], IVP, info,
                          _nodal_second(ode, xs, ys))


def _nodal_second(ode, xs, ys):
    try:
        return np.asarray(ode.second_derivative(xs, ys[:, 0], ys[:, 1]), dtype=float)
    except DomainError:
        return None


def solve_ivp_transformed(ode_s: RadialODE, s0: float, z0: float, dz0: float,
                          window: tuple[float, float], tol: float = 1e-8,
                          **kw) -> RadialSolution:
    """Solve ``z'' + A(r(s))^2 f(r(s), z) = 0`` from data at ``s0``."""
    if ode_s.coordinate != "s":
        raise ValueError("solve_ivp_transformed expects an ODE in the s coordinate")
    return solve_ivp(ode_s, s0, z0, dz0, window, tol, **kw)


def solve_from_pole(geom: GeometrySpec, f: Expr | str, u0: float,
                    window: tuple[float, float], tol: float = 1e-8,
                    eps: float = 1e-3, params=None) -> RadialSolution:
    """Solution through the fixed point at the lower end of the domain.

    Near the pole ``A ~ c r^(n-1)`` and the regular solution behaves like
    ``u0 - f(0, u0) r^2 / (2n)``; the series supplies data at ``r = eps`` and
    the integration continues from there.  The returned grid starts at the
    pole with ``u(0) = u0`` and ``u'(0) = 0``.
    """
    if isinstance(f, str):
        f = parse(f, params)
    if not geom.fixed_lo:
        raise ValueError(f"{geom.name} has no fixed point at its lower end")
    k = geom.volume.order_lo
    if k is None or k < 1 or abs(k - round(k)) > 1e-9:
        raise ValueError(f"no regular pole expansion for vanishing order {k}")
    n = int(round(k)) + 1
    pole = geom.lo
    hi = float(window[1])
    eps = min(eps, 0.25 * (hi - pole))
    try:
        f0 = float(f.evaluate(r=pole, y=u0))
    except DomainError:
        f0 = float(f.evaluate(r=pole + eps, y=u0))
    r1 = pole + eps
    u1 = u0 - f0 * eps ** 2 / (2 * n)
    du1 = -f0 * eps / n
    ode = reduce(geom, f)
    xs, ys, flags = _integrate(ode.rhs, r1, [u1, du1], hi, tol)
    grid = np.concatenate([[pole], xs])
    vals = np.concatenate([[u0], ys[:, 0]])
    ders = np.concatenate([[0.0], ys[:, 1]])
    info = {"tol": tol, "eps": eps, "n": n, "f_at_pole": f0, "steps": flags["steps"],
            "blowup": flags["blowup"], "eval_error": flags["eval_error"]}
    sec = _nodal_second(ode, xs, ys)
    if sec is not None:
        sec = np.concatenate([[-f0 / n], sec])
    return RadialSolution("r", grid, vals, ders, POLE_SERIES, info, sec)


# ---------------------------------------------------------------------------
# Singular two-point problem


@dataclass
class _UnitProblem:
    """``w'' + At(t)^2 ft(t, w) = 0`` on (0, 1) with tabulated coefficients."""

    weight: object      # t -> At(t)^2
    r_of_t: object      # t -> r(s(t))
    f: Expr
    f_depends_on_r: bool

    def rhs_factory(self, eps):
        f = self.f
        weight, r_of_t = self.weight, self.r_of_t
        if self.f_depends_on_r:
            def rhs(t, y):
                w = y[0] if y[0] > eps else eps
                return np.array([y[1], -weight(t) * f.scalar(r=float(r_of_t(t)), y=w)])
        else:
            def rhs(t, y):
                w = y[0] if y[0] > eps else eps
                return np.array([y[1], -weight(t) * f.scalar(y=w, r=0.0)])
        return rhs


def unit_interval_problem(cov: ChangeOfVariables, f: Expr, nodes: int = 4097) -> _UnitProblem:
    """Rescale ``s = (c2 - c1) t + c1`` and tabulate ``At(t)^2``.

    ``At(t) = (c2 - c1) A(r(s(t)))``.
    """
    if not cov.finite:
        raise ValueError("the singular two-point problem needs finite c1, c2")
    c1, c2 = cov.c1, cov.c2
    L = c2 - c1
    t = np.linspace(0.0, 1.0, nodes)
    tin = t[1:-1]
    r = cov.inverse(c1 + L * tin)
    A = np.asarray(cov.geometry.A(r), dtype=float) * L
    if np.ptp(A) <= 1e-13 * np.max(np.abs(A)):
        const = float(np.mean(A) ** 2)
        weight = lambda tt: const
    else:
        # extend to the closed interval by the continuous limits
        A_full = np.concatenate([[_extrapolate(tin[:4], A[:4], 0.0)], A,
                                 [_extrapolate(tin[-4:], A[-4:], 1.0)]])
        spl = interpolate.CubicSpline(t, np.maximum(A_full, 0.0) ** 2)
        weight = lambda tt: float(spl(tt))
    r_full = np.concatenate([[cov.geometry.lo if math.isfinite(cov.geometry.lo) else r[0]], r,
                             [cov.geometry.hi if math.isfinite(cov.geometry.hi) else r[-1]]])
    r_spl = interpolate.CubicSpline(t, r_full)
    return _UnitProblem(weight, r_spl, f, "r" in f.free_vars())


def _extrapolate(x, y, x0):
    return float(np.polyval(np.polyfit(x, y, len(x) - 1), x0))


def solve_bvp_singular(geom: GeometrySpec, cov: ChangeOfVariables, f: Expr | str,
                       alpha: float, beta: float, gamma: float, delta: float,
                       tol: float = 1e-10, *, eps0: float = 1e-2, rung: int = 10,
                       eps_min: float = 1e-14, max_rungs: int = 12,
                       output_step: float = 1.0 / 256, params=None) -> RadialSolution:
    """Positive solution of the rescaled two-point problem on ``(0, 1)``

        w'' + At(t)^2 f(r(s(t)), w) = 0,
        alpha w(0) - beta w'(0) = 0,   gamma w(1) + delta w'(1) = 0,

    by shooting on the free initial datum.  A singular ``f`` (blowing up as
    ``w -> 0+``) is regularized to ``f(., max(w, eps))`` with
    ``eps_k = 2**(-k) eps0``, ``k = 0, rung, 2 rung, ...``, continuing the
    shooting root from one rung to the next until it settles or ``eps``
    drops below ``eps_min`` (scaled by the shooting parameter).  Past that
    floor the layer where ``w < eps`` is narrower than the resolution of
    ``t`` near 1.  The regularization error in the shooting parameter
    decays like ``sqrt(eps)``; the last rung-to-rung change is reported as
    ``info["regularization_drift"]``.

    Every shot caps the step at ``output_step`` so that the returned
    interpolant stays accurate between steps.  The result is returned in the
    ``s`` coordinate; the unit-interval arrays
    are in ``info["t"]``, ``info["w"]``, ``info["dw"]``.
    """
    if isinstance(f, str):
        f = parse(f, params)
    coeffs = (alpha, beta, gamma, delta)
    if min(coeffs) < 0:
        raise ValueError("boundary coefficients must be nonnegative")
    if not gamma * beta + alpha * gamma + alpha * delta > 0:
        raise ValueError("boundary coefficients violate gamma*beta + alpha*gamma + alpha*delta > 0")
    if cov.geometry is not geom:
        raise ValueError("change of variables belongs to a different geometry")
    prob = unit_interval_problem(cov, f)

    if alpha > 0:
        def initial(p):
            return [beta / alpha * p, p]
    else:
        def initial(p):
            return [p, 0.0]

    def run(p, eps, max_step=output_step):
        rhs = prob.rhs_factory(eps)
        # |w''| <= At^2 f(eps) is bounded, so tiny steps near the kink at
        # w = eps are not blow-up; only scipy's own failure stops the run.
        xs, ys, fl = _integrate(rhs, 0.0, initial(p), 1.0, tol, max_step=max_step,
                                underflow=0.0)
        return xs, ys, fl

    def miss(p, eps):
        xs, ys, fl = run(p, eps)
        if xs[-1] < 1.0:
            # blew up before t = 1: w ran off to -inf
            return -1e300 if ys[-1, 0] < 0 else 1e300
        return gamma * ys[-1, 0] + delta * ys[-1, 1]

    history = []
    p_prev = None
    n_ivp = 0
    for j in range(max_rungs):
        eps = eps0 * 2.0 ** (-rung * j)
        lo_p, hi_p = (0.5 * p_prev, 2.0 * p_prev) if p_prev else (1e-3, 1.0)
        f_lo, f_hi = miss(lo_p, eps), miss(hi_p, eps)
        n_ivp += 2
        for _ in range(60):
            if f_lo < 0 < f_hi:
                break
            if f_lo >= 0:
                lo_p *= 0.25
                f_lo = miss(lo_p, eps)
            if f_hi <= 0:
                hi_p *= 4.0
                f_hi = miss(hi_p, eps)
            n_ivp += 1
        else:
            raise ShootingError("could not bracket the shooting parameter",
                                eps=eps, bracket=(lo_p, hi_p), values=(f_lo, f_hi))
        counter = {"n": 0}

        def g(p):
            counter["n"] += 1
            return miss(p, eps)

        p = optimize.brentq(g, lo_p, hi_p, xtol=1e-15, rtol=1e-15, maxiter=200)
        n_ivp += counter["n"]
        history.append((eps, p))
        drift = abs(p - p_prev) if p_prev is not None else math.inf
        settled = drift <= tol * max(1.0, abs(p))
        if settled or eps < eps_min * max(1.0, abs(p)):
            break
        p_prev = p
    else:
        raise ShootingError("regularization ladder did not reach its floor",
                            history=history)

    xs, ys, fl = run(p, eps)
    if xs[-1] < 1.0:
        raise ShootingError("final shot did not reach t = 1", history=history)
    t, w, dw = xs, ys[:, 0], ys[:, 1]
    interior = (t > 0) & (t < 1)
    if np.any(w[interior] <= 0):
        bad = float(t[interior][np.argmax(w[interior] <= 0)])
        raise PositivityError("solution lost positivity", t=bad, history=history)
    res0 = alpha * w[0] - beta * dw[0]
    res1 = gamma * w[-1] + delta * dw[-1]
    L = cov.c2 - cov.c1
    # nodal w'' from the (regularized) equation inside; at the two ends the
    # true w'' may be unbounded, so the cubic Hermite end value is used there
    rhs = prob.rhs_factory(eps)
    d2w = np.array([rhs(ti, (wi, dwi))[1] for ti, wi, dwi in zip(t, w, dw)])
    h0, h1 = t[1] - t[0], t[-1] - t[-2]
    d2w[0] = 2.0 * (3.0 * (w[1] - w[0]) / h0 - 2.0 * dw[0] - dw[1]) / h0
    d2w[-1] = 2.0 * (-3.0 * (w[-1] - w[-2]) / h1 + 2.0 * dw[-1] + dw[-2]) / h1
    info = {"t": t, "w": w, "dw": dw, "shooting_parameter": p, "eps": eps,
            "ladder": history, "ivp_solves": n_ivp, "ladder_settled": settled,
            "regularization_drift": drift,
            "boundary_residuals": (float(res0), float(res1)), "tol": tol,
            "coefficients": coeffs}
    return RadialSolution("s", cov.c1 + L * t, w, dw / L, BVP_SHOOTING, info, d2w / L ** 2)


# ---------------------------------------------------------------------------
# Panel quadrature on (a, R_max) for the integral equations


class PanelGrid:
    """Gauss-Legendre panels in ``x`` with ``t = a + x**m``.

    ``m = 1/(1 - k)`` for an endpoint where ``A`` vanishes to order ``k``
    makes ``rho`` behave linearly in ``x``.  Cumulative integrals are exact
    for the panel interpolating polynomials.
    """

    def __init__(self, a, r_max, m=1.0, panels=48, order=16, breakpoints=()):
        self.a, self.r_max, self.m, self.order = float(a), float(r_max), float(m), order
        X = (r_max - a) ** (1.0 / m)
        edges = set(np.linspace(0.0, X, panels + 1).tolist())
        for bp in breakpoints:
            if a < bp < r_max:
                edges.add(float((bp - a) ** (1.0 / m)))
        self.edges = np.array(sorted(edges))
        xi, wi = legendre.leggauss(order)
        self.xi, self.wi = xi, wi
        V = legendre.legvander(xi, order - 1)
        C = np.linalg.inv(V)
        S = np.empty((order, order))
        for k in range(order):
            ck = legendre.legint(C[:, k], lbnd=-1)
            S[:, k] = legendre.legval(xi, ck)
        self.Smat = S
        lo, hi = self.edges[:-1], self.edges[1:]
        self.half = 0.5 * (hi - lo)
        self.x = (lo[:, None] + self.half[:, None] * (xi + 1.0)).ravel()
        self.t = a + self.x ** m
        self.jac = m * self.x ** (m - 1.0)
        # barycentric weights for Legendre-node interpolation
        diff = xi[:, None] - xi[None, :]
        np.fill_diagonal(diff, 1.0)
        self.bary = 1.0 / np.prod(diff, axis=1)

    @property
    def n_panels(self):
        return len(self.edges) - 1

    def cumulative(self, vals_dt):
        """``int_a^{t_i} F dt`` at the nodes, given ``F`` at the nodes."""
        F = (vals_dt * self.jac).reshape(self.n_panels, self.order)
        local = self.half[:, None] * (F @ self.Smat.T)
        totals = self.half * (F @ self.wi)
        offsets = np.concatenate([[0.0], np.cumsum(totals)[:-1]])
        return (local + offsets[:, None]).ravel(), float(np.sum(totals))

    def interpolate(self, node_vals, t):
        """Evaluate the panelwise polynomial interpolant at points ``t``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        x = np.clip(t - self.a, 0.0, None) ** (1.0 / self.m)
        j = np.clip(np.searchsorted(self.edges, x, side="right") - 1, 0, self.n_panels - 1)
        V = np.asarray(node_vals).reshape(self.n_panels, self.order)
        lo = self.edges[j]
        xi_t = (x - lo) / self.half[j] - 1.0
        out = np.empty(len(t))
        for i in range(len(t)):
            d = xi_t[i] - self.xi
            hit = np.abs(d) < 1e-15
            if np.any(hit):
                out[i] = V[j[i]][np.argmax(hit)]
            else:
                w = self.bary / d
                out[i] = np.dot(w, V[j[i]]) / np.sum(w)
        return out

    def refined(self) -> "PanelGrid":
        mids = 0.5 * (self.edges[:-1] + self.edges[1:])
        bps = [self.a + e ** self.m for e in np.concatenate([self.edges[1:-1], mids])]
        return PanelGrid(self.a, self.r_max, self.m, panels=1, order=self.order,
                         breakpoints=bps)


def _vanishing_order(geom, a):
    if a == geom.lo:
        k = geom.volume.order_lo
        return 0.0 if k is None else float(k)
    return 0.0


def _rho_nodes(geom, grid):
    inv_A = 1.0 / np.asarray(geom.A(grid.t), dtype=float)
    rho, _ = grid.cumulative(inv_A)
    return rho


def _rho_infinity(geom, a, grid, rho_nodes):
    """rho at the far end of the domain (inf when 1/A is not integrable there)."""
    if math.isfinite(geom.hi):
        return math.inf
    cov = build_change_of_variables(geom)
    if cov.c2_status != "finite":
        return math.inf
    R = grid.r_max
    tail = integrate.quad(lambda t: 1.0 / geom.A(t), R, math.inf, limit=400)[0]
    rho_R = grid.interpolate(rho_nodes, [R])[0]
    return float(rho_R + tail)


def _choose_rmax(tail_density, a, tol, r_max=None, r_min=None):
    """Smallest ``a + 2^j`` beyond which ``int tail_density`` is below ``tol/10``."""
    if r_max is not None:
        return float(r_max)
    R = a + 1.0
    floor = r_min if r_min is not None else a + 4.0
    for _ in range(40):
        try:
            tail = integrate.quad(tail_density, R, math.inf, limit=400)[0]
        except DomainError:
            tail = math.inf
        if abs(tail) < tol / 10 and R >= floor:
            return R
        R = a + 2.0 * (R - a)
    raise SolverError("could not find a truncation radius with a negligible tail",
                      last_radius=R)


def _log_dA(geom, t):
    return np.asarray(geom.dA(t), dtype=float) / np.asarray(geom.A(t), dtype=float)


def _f_nodes(f: Expr, t, y):
    return np.asarray(f.evaluate(r=t, y=y), dtype=float) + 0.0 * t


def sublinear_operator(geom, f, a, c, grid, rho_nodes, rho_inf, u):
    """Right-hand side of ``u = c rho + int A rho(min) (1 - rho(max)/rho_inf) f``.

    Returns ``(T(u), T(u)')`` at the grid nodes.
    """
    A = np.asarray(geom.A(grid.t), dtype=float)
    F = A * _f_nodes(f, grid.t, u)
    damp = 1.0 - rho_nodes / rho_inf if math.isfinite(rho_inf) else 1.0
    I1, _ = grid.cumulative(F * rho_nodes)
    C2, tot2 = grid.cumulative(F * damp)
    I2 = tot2 - C2
    Tu = c * rho_nodes + damp * I1 + rho_nodes * I2
    back = I1 / rho_inf if math.isfinite(rho_inf) else 0.0
    dTu = (c + I2 - back) / A
    return Tu, dTu


def solve_picard_sublinear(geom: GeometrySpec, f: Expr | str, a: float, c: float,
                           tol: float = 1e-10, *, r_max: float | None = None,
                           panels: int = 48, order: int = 16, max_iter: int = 500,
                           patience: int = 25, breakpoints=(), params=None
                           ) -> RadialSolution:
    """Fixed point of the integral form with prescribed growth ``c rho`` at infinity.

    Iterates ``u_{k+1} = c rho + int_a^inf A(t) rho(min(r,t)) (1 - rho(max(r,t))/rho(inf)) f(t, u_k(t)) dt``
    from ``u_0 = c rho`` on ``(a, R_max]`` until the sup-norm update is
    below ``tol``.
    """
    if isinstance(f, str):
        f = parse(f, params)
    if c <= 0:
        raise ValueError("c must be positive")
    if not (geom.lo <= a < geom.hi) or (math.isfinite(geom.hi)):
        raise ValueError("the integral form needs a domain (a, inf)")
    k = _vanishing_order(geom, a)
    if k >= 1:
        raise ValueError(f"1/A is not integrable at a={a} (order {k})")
    m = 1.0 / (1.0 - k)
    from .reduction import rho as rho_fn

    def tail_density(t):
        rt = float(rho_fn(geom, a, t))
        return abs(float(geom.A(t)) * float(f.evaluate(r=t, y=c * rt))) * rt

    R = _choose_rmax(tail_density, a, tol, r_max)
    grid = PanelGrid(a, R, m, panels, order, breakpoints)
    rho_nodes = _rho_nodes(geom, grid)
    rho_inf = _rho_infinity(geom, a, grid, rho_nodes)

    u = c * rho_nodes
    norms = []
    went_up = went_down = False
    for it in range(1, max_iter + 1):
        Tu, dTu = sublinear_operator(geom, f, a, c, grid, rho_nodes, rho_inf, u)
        step = float(np.max(np.abs(Tu - u)))
        slack = 1e-14 * np.maximum(np.abs(u), 1.0)
        went_up |= bool(np.any(Tu > u + slack))
        went_down |= bool(np.any(Tu < u - slack))
        norms.append(step)
        u = Tu
        if step < tol:
            break
        if len(norms) > patience and min(norms[-patience:]) >= min(norms[:-patience]):
            raise NonContractionError("Picard updates stopped decreasing",
                                      iterations=it, update_norms=norms[-patience:])
    else:
        raise NonContractionError("Picard iteration did not converge",
                                  iterations=max_iter, update_norms=norms[-5:])
    Tu, dTu = sublinear_operator(geom, f, a, c, grid, rho_nodes, rho_inf, u)
    c_limit = float(u[-1] / rho_nodes[-1])
    u_at_a = float(_extrapolate_to_start(grid, u))
    info = {"iterations": it, "update_norms": norms, "tol": tol, "r_max": R,
            "c_requested": c, "c_limit": c_limit,
            "c_mismatch": abs(c_limit - c) > 1e-6 * max(1.0, c),
            "limit_at_a": u_at_a, "rho_infinity": rho_inf,
            "iterate_trend": ("mixed" if went_up and went_down else
                              "nondecreasing" if went_up else "nonincreasing"),
            "grid": grid, "rho": rho_nodes,
            "a": a, "c": c, "f": f}
    # (A u')' = -A f: nodal u'' for the quintic dense output
    d2u = -_log_dA(geom, grid.t) * dTu - _f_nodes(f, grid.t, u)
    return RadialSolution("r", grid.t, u, dTu, PICARD_SUBLINEAR, info, d2u)


def _extrapolate_to_start(grid, vals):
    V = vals[:grid.order]
    d = -1.0 - grid.xi
    w = grid.bary / d
    return np.dot(w, V) / np.sum(w)


def negative_power_operator(geom, b_nodes, sigma, grid, rho_nodes, u):
    A = np.asarray(geom.A(grid.t), dtype=float)
    F = A * b_nodes * u ** (-sigma)
    I1, _ = grid.cumulative(F * rho_nodes)
    C2, tot = grid.cumulative(F)
    I2 = tot - C2
    Tu = I1 + rho_nodes * I2
    dTu = I2 / A
    return Tu, dTu


def solve_picard_negative_power(geom: GeometrySpec, b: Expr | str, sigma: float,
                                a: float, tol: float = 1e-10, *, omega: float | None = None,
                                u_min: float = 1e-12, r_max: float | None = None,
                                panels: int = 48, order: int = 16, max_iter: int = 2000,
                                patience: int = 50, breakpoints=(), params=None
                                ) -> RadialSolution:
    """Positive fixed point of ``u(r) = int_a^inf A(t) rho(min(r,t)) b(t) u(t)^(-sigma) dt``.

    Damped iteration ``u <- (1 - omega) u + omega T(u)`` (default
    ``omega = 1/(1 + sigma)``), floored at ``u_min`` during the transient.
    """
    if isinstance(b, str):
        b = parse(b, params)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if not b.free_vars() <= {"r", "t"}:
        raise ValueError("b must be a function of r only")
    if not (geom.lo <= a < geom.hi) or math.isfinite(geom.hi):
        raise ValueError("the integral form needs a domain (a, inf)")
    k = _vanishing_order(geom, a)
    if k >= 1:
        raise ValueError(f"1/A is not integrable at a={a} (order {k})")
    m = 1.0 / (1.0 - k)
    omega = 1.0 / (1.0 + sigma) if omega is None else float(omega)
    from .reduction import rho as rho_fn

    def b_of(t):
        t = np.asarray(t, dtype=float)
        return np.asarray(b.evaluate(r=t, t=t), dtype=float) + 0.0 * t

    rho_1 = float(rho_fn(geom, a, a + 1.0))

    def tail_density(t):
        return abs(float(geom.A(t)) * float(b_of(t))) * rho_1

    R = _choose_rmax(tail_density, a, tol, r_max)
    grid = PanelGrid(a, R, m, panels, order, breakpoints)
    rho_nodes = _rho_nodes(geom, grid)
    b_nodes = b_of(grid.t)
    if np.any(b_nodes < 0):
        raise ValueError("b must be nonnegative")

    u = np.maximum(np.minimum(rho_nodes, rho_1), u_min)
    norms = []
    floored = 0
    for it in range(1, max_iter + 1):
        Tu, _ = negative_power_operator(geom, b_nodes, sigma, grid, rho_nodes, u)
        if np.all(Tu <= u_min):
            raise CollapseError("fixed-point map collapsed to the floor (b has no mass?)",
                                iterations=it)
        new = np.maximum((1.0 - omega) * u + omega * Tu, u_min)
        floored += int(np.any(new == u_min))
        step = float(np.max(np.abs(new - u)))
        norms.append(step)
        u = new
        if step < tol:
            break
        if len(norms) > patience and min(norms[-patience:]) >= min(norms[:-patience]):
            raise NonContractionError("damped Picard updates stopped decreasing",
                                      iterations=it, update_norms=norms[-patience:])
    else:
        raise NonContractionError("damped Picard iteration did not converge",
                                  iterations=max_iter, update_norms=norms[-5:])
    if np.any(u <= u_min):
        raise CollapseError("solution sits on the positivity floor", iterations=it)
    Tu, dTu = negative_power_operator(geom, b_nodes, sigma, grid, rho_nodes, u)
    ratio = u / rho_nodes
    info = {"iterations": it, "update_norms": norms, "tol": tol, "r_max": R,
            "omega": omega, "floor_hits": floored, "ratio_at_rmax": float(ratio[-1]),
            "grid": grid, "rho": rho_nodes, "a": a, "sigma": sigma, "b": b}
    d2u = -_log_dA(geom, grid.t) * dTu - b_nodes * u ** (-sigma)
    return RadialSolution("r", grid.t, u, dTu, PICARD_NEGATIVE_POWER, info, d2u)


def picard_residual(geom: GeometrySpec, sol: RadialSolution) -> float:
    """Sup-norm of ``T(u) - u`` with ``u`` re-sampled on a refined panel grid.

    The refined grid halves every panel, so quadrature and ``rho`` are
    recomputed independently of the nodes the iteration used.
    """
    info = sol.info
    grid: PanelGrid = info["grid"]
    fine = grid.refined()
    u_fine = grid.interpolate(sol.values, fine.t)
    rho_fine = _rho_nodes(geom, fine)
    if sol.provenance == PICARD_SUBLINEAR:
        rho_inf = info["rho_infinity"]
        Tu, _ = sublinear_operator(geom, info["f"], info["a"], info["c"], fine,
                                   rho_fine, rho_inf, u_fine)
    elif sol.provenance == PICARD_NEGATIVE_POWER:
        b = info["b"]
        b_nodes = np.asarray(b.evaluate(r=fine.t, t=fine.t), dtype=float) + 0.0 * fine.t
        Tu, _ = negative_power_operator(geom, b_nodes, info["sigma"], fine, rho_fine, u_fine)
    else:
        raise ValueError("picard_residual needs a Picard solution")
    return float(np.max(np.abs(Tu - u_fine)))


# ---------------------------------------------------------------------------
# Nonexistence (concavity) and completeness bounds


@dataclass
class NonexistenceReport:
    horn: str                    # "constant" or "negativity"
    concavity_verified: bool
    crossing_s: float | None = None
    window_length: float | None = None
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self):
        return {"horn": self.horn, "concavity_verified": self.concavity_verified,
                "crossing_s": self.crossing_s, "window_length": self.window_length,
                "diagnostics": self.diagnostics}


def check_nonexistence(geom: GeometrySpec, cov: ChangeOfVariables, f: Expr | str,
                       candidate: RadialSolution, expanding_windows=(1, 2, 5, 10, 20, 50, 100, 200, 500, 1000),
                       tol: float = 1e-8, params=None) -> NonexistenceReport:
    """Concavity argument on ``(c1, c2) = (-inf, inf)``.

    In ``s`` a candidate satisfies ``z'' = -A^2 f <= 0``.  Either its slope
    vanishes (constant horn), or a tangent line -- an upper bound for the
    concave ``z`` -- reaches 0 at a finite ``s``, where ``z`` must then be
    negative (negativity horn).  Windows grow until such a crossing is found
    and confirmed by integrating the transformed ODE up to it.
    """
    if isinstance(f, str):
        f = parse(f, params)
    if not (cov.c1 == -math.inf and cov.c2 == math.inf):
        raise ValueError("nonexistence test needs (c1, c2) = (-inf, inf)")
    ode_s = transform(reduce(geom, f), cov)

    # candidate in s coordinates
    if candidate.coordinate == "r":
        rg = candidate.grid[(candidate.grid > geom.lo) & (candidate.grid < geom.hi)]
        sg = cov.forward(rg)
        zg = candidate(rg)
        dzg = candidate.derivative(rg) * geom.A(rg)
    else:
        sg, zg, dzg = candidate.grid, candidate.values, candidate.derivatives
    rg_s = cov.inverse(sg)
    fvals = ode_s.f_at(rg_s, zg)
    zpp = -np.asarray(geom.A(rg_s)) ** 2 * fvals
    concave = bool(np.all(zpp <= 1e-12 * np.maximum(1.0, np.abs(zpp))))
    diag = {"min_f": float(np.min(fvals)), "max_zpp": float(np.max(zpp)),
            "samples": int(len(sg))}
    if np.min(fvals) < -1e-12:
        diag["warning"] = "f takes negative values on the candidate"

    slope_scale = max(1.0, float(np.max(np.abs(zg))))
    if np.max(np.abs(dzg)) <= 10 * tol * slope_scale and np.max(np.abs(zpp)) <= 10 * tol * slope_scale:
        return NonexistenceReport("constant", concave, None, None, diag)

    # Start from the candidate's largest sample and look for the sign change
    # nearest to it.  Concavity puts z below every tangent line, so a single
    # tangent zero already bounds where the crossing can be.
    i0 = int(np.argmax(zg))
    s0, z0, dz0 = float(sg[i0]), float(zg[i0]), float(dzg[i0])
    diag.update({"s0": s0, "z0": z0, "dz0": dz0})
    if dz0 != 0:
        diag["tangent_zero"] = s0 - z0 / dz0
    if z0 <= 0:
        diag["note"] = "candidate is nowhere positive"
        return NonexistenceReport("negativity", concave, None, float(sg[-1] - sg[0]), diag)

    def nearest_crossing(grid, z, fun):
        neg = np.flatnonzero(z < 0)
        if not len(neg):
            return None
        j = neg[np.argmin(np.abs(grid[neg] - s0))]
        k = j + 1 if grid[j] < s0 else j - 1     # towards s0, so z[k] >= 0
        a, b = sorted((grid[j], grid[k]))
        return float(optimize.brentq(fun, a, b, xtol=1e-14)) if fun(a) * fun(b) < 0 else float(grid[k])

    if candidate.coordinate == "r":
        z_of_s = lambda x: float(candidate(float(cov.inverse(x))))
    else:
        z_of_s = lambda x: float(candidate(x))
    crossing = nearest_crossing(sg, zg, z_of_s)
    if crossing is not None:
        diag["located_on"] = "candidate"
        return NonexistenceReport("negativity", concave, crossing, float(sg[-1] - sg[0]), diag)
    diag["located_on"] = "continuation"
    for L in expanding_windows:
        L = float(L)
        sol = _solve_until_negative(ode_s, s0, z0, dz0, (s0 - L / 2, s0 + L / 2), tol)
        crossing = nearest_crossing(sol.grid, sol.values, sol)
        if crossing is not None:
            return NonexistenceReport("negativity", concave, crossing, L, diag)
    diag["windows"] = [float(w) for w in expanding_windows]
    return NonexistenceReport("undecided", concave, None, None, diag)


def _solve_until_negative(ode_s, s0, z0, dz0, window, tol):
    y0 = np.array([z0, dz0])
    stop = lambda x, y: y[0] < 0
    xf, yf, _ = _integrate(ode_s.rhs, s0, y0, window[1], tol, stop=stop)
    xb, yb, _ = _integrate(ode_s.rhs, s0, y0, window[0], tol, stop=stop)
    xs = np.concatenate([xb[::-1], xf[1:]])
    ys = np.concatenate([yb[::-1], yf[1:]])
    xs, idx = np.unique(xs, return_index=True)
    ys = ys[idx]
    return RadialSolution("s", xs, ys[:, 0], ys[:, 1], IVP, {})


def check_completeness_bounds(phi: Expr | str, geom: GeometrySpec, f: Expr | str,
                              window, C: float, n: int = 21, params=None):
    """Sample the bounds that make the flow of ``(1, x2, -(x2 A' + A f)/A)`` complete.

    With ``t = r``, ``x1 = u``, ``x2 = u'`` the three inequalities are
    ``|phi_t| <= C``, ``|x2 phi_x1| <= C`` and ``|(x2 A' + A f) phi_x2| <= C A``
    on the box ``window = ((t1, t2), (x11, x12), (x21, x22))``.  Properness
    of ``phi`` is not checked.
    """
    from .hypotheses import FALSIFIED, VERIFIED, HypothesisReport
    variables = ("t", "x1", "x2")
    if isinstance(phi, str):
        phi = parse(phi, params, variables=variables)
    if isinstance(f, str):
        f = parse(f, params)
    (t1, t2), (a1, a2), (b1, b2) = window
    if not (geom.lo < t1 < t2 < geom.hi):
        raise ValueError("window must be compact inside the domain")
    T, X1, X2 = np.meshgrid(np.linspace(t1, t2, n), np.linspace(a1, a2, n),
                            np.linspace(b1, b2, n), indexing="ij")
    T, X1, X2 = T.ravel(), X1.ravel(), X2.ravel()
    env = {"t": T, "x1": X1, "x2": X2}
    grads = [np.asarray(phi.diff(v).evaluate(env), dtype=float) + 0.0 * T for v in variables]
    A = np.asarray(geom.A(T), dtype=float)
    dA = np.asarray(geom.dA(T), dtype=float)
    fv = np.asarray(f.evaluate(r=T, y=X1), dtype=float) + 0.0 * T
    lhs = [np.abs(grads[0]), np.abs(X2 * grads[1]), np.abs((X2 * dA + A * fv) * grads[2])]
    rhs = [np.full_like(T, C), np.full_like(T, C), C * A]
    slack = 1e-12 * max(1.0, C)
    diag = {"properness_checked": False, "C": C}
    for name, l, r in zip(("time", "position", "velocity"), lhs, rhs):
        diag[f"max_{name}_term"] = float(np.max(l))
        diag[f"max_{name}_ratio"] = float(np.max(l / np.where(r > 0, r, np.inf)))
    for k, (l, r) in enumerate(zip(lhs, rhs)):
        bad = np.flatnonzero(l > r + slack)
        if len(bad):
            i = bad[np.argmax(l[bad] - r[bad])]
            witness = {"t": float(T[i]), "x1": float(X1[i]), "x2": float(X2[i]),
                       "bound": k + 1, "lhs": float(l[i]), "rhs": float(r[i])}
            return HypothesisReport("completeness", FALSIFIED, witness, diag, len(T))
    return HypothesisReport("completeness", VERIFIED, None, diag, len(T))
