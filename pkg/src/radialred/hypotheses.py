"""Numerical audits of the structural hypotheses on ``A`` and ``f``.

Every check returns a :class:`HypothesisReport` with a three-way verdict.
``verified_numerically`` only means the predicate held on the declared
samples and quadratures; a ``falsified`` verdict always carries a witness
that can be re-evaluated on its own.

Improper integrals and limits are classified from geometric sequences:
increments over dyadic pieces (or values along ``y = 10**k``) are fed to a
ratio test, with an explicit inconclusive band between "clearly geometric
decay" and "clearly not decaying".
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .expr import DomainError, Expr, parse
from .geometry import GeometrySpec
from .reduction import ChangeOfVariables, build_change_of_variables

VERIFIED = "verified_numerically"
FALSIFIED = "falsified"
INCONCLUSIVE = "inconclusive"

# ratio-test thresholds for increment sequences
CONVERGENT_RATIO = 0.9
DIVERGENT_RATIO = 0.999


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


@dataclass
class HypothesisReport:
    condition: str
    verdict: str
    witness: dict | None = None
    diagnostics: dict = field(default_factory=dict)
    samples_used: int = 0

    def to_dict(self) -> dict:
        return {"condition": self.condition, "verdict": self.verdict,
                "witness": _jsonable(self.witness),
                "diagnostics": _jsonable(self.diagnostics),
                "samples_used": int(self.samples_used)}


def combine(condition, reports):
    """Falsified if any part is, verified if all are, inconclusive otherwise."""
    verdicts = [r.verdict for r in reports]
    if FALSIFIED in verdicts:
        verdict = FALSIFIED
    elif all(v == VERIFIED for v in verdicts):
        verdict = VERIFIED
    else:
        verdict = INCONCLUSIVE
    witness = next((r.witness for r in reports if r.verdict == FALSIFIED), None)
    diag = {r.condition: {"verdict": r.verdict, **r.diagnostics} for r in reports}
    return HypothesisReport(condition, verdict, witness, diag,
                            sum(r.samples_used for r in reports))


def _as_expr(e, params=None):
    return parse(e, params) if isinstance(e, str) else e


def _eval_grid(e: Expr, **kw):
    """Vectorized evaluation; on a domain error return the first bad point."""
    shape = np.broadcast(*kw.values()).shape
    try:
        out = np.asarray(e.evaluate(**kw), dtype=float)
        return np.broadcast_to(out, shape).copy(), None
    except DomainError as exc:
        flat = {k: np.broadcast_to(np.asarray(v, dtype=float), shape).ravel()
                for k, v in kw.items()}
        idx = exc.index if exc.index is not None else 0
        point = {k: float(v[idx]) for k, v in flat.items()}
        return None, {"kind": "domain_error", **point, "error": str(exc)}


def _pointwise(e: Expr, **kw):
    """Scalar evaluation everywhere; nan where the expression is undefined."""
    shape = np.broadcast(*kw.values()).shape
    flat = {k: np.broadcast_to(np.asarray(v, dtype=float), shape).ravel()
            for k, v in kw.items()}
    out = np.empty(int(np.prod(shape)))
    for i in range(len(out)):
        try:
            out[i] = e.scalar(**{k: v[i] for k, v in flat.items()})
        except DomainError:
            out[i] = np.nan
    return out.reshape(shape)


def classify_increments(d, atol=0.0):
    """Ratio test on the tail of a sequence of nonnegative increments.

    Returns ``("converges", tail_estimate)``, ``("diverges", None)`` or
    ``("inconclusive", None)``.
    """
    d = np.abs(np.asarray(d, dtype=float))
    if len(d) < 4:
        return "inconclusive", None
    tail = d[-5:]
    if np.all(tail <= atol) or np.all(tail == 0):
        return "converges", 0.0
    total = float(np.sum(d))
    if tail[-1] <= 1e-15 * total and np.all(np.diff(tail) <= 0):
        return "converges", float(tail[-1])
    if np.any(tail[:-1] == 0):
        return "inconclusive", None
    q = tail[1:] / tail[:-1]
    if np.max(q) < CONVERGENT_RATIO:
        qm = float(np.max(q))
        return "converges", float(tail[-1] * qm / (1 - qm))
    if np.min(q) >= DIVERGENT_RATIO:
        return "diverges", None
    return "inconclusive", None


def _limit_trend(values):
    """Classify a sequence sampled along a geometric ladder.

    Returns ``("infinite", None)``, ``("finite", limit)`` or
    ``("inconclusive", None)``.
    """
    v = np.asarray(values, dtype=float)
    d = np.diff(v)
    if np.all(d > 0) or np.all(d < 0):
        q = np.abs(d[-4:][1:] / d[-4:][:-1])
        if np.max(q) < CONVERGENT_RATIO:
            qm = float(np.max(q))
            return "finite", float(v[-1] + d[-1] * qm / (1 - qm))
        if np.min(q) >= DIVERGENT_RATIO:
            return ("infinite" if d[-1] > 0 else "minus_infinite"), None
        return "inconclusive", None
    if np.all(d == 0):
        return "finite", float(v[-1])
    if np.max(np.abs(d[-4:])) <= 1e-15 * max(1.0, float(np.max(np.abs(v)))):
        return "finite", float(v[-1])
    return "inconclusive", None


# ---------------------------------------------------------------------------
# [F1] local Lipschitz continuity in y


def check_F1(f, K, n0: int = 9, levels: int = 5, rel: float = 0.01,
             budget: int = 1, params=None) -> HypothesisReport:
    """Estimate the Lipschitz constant of ``f`` in ``y`` on ``K = ((r1, r2), (y1, y2))``.

    The estimate is the larger of ``sup |df/dy|`` (symbolic derivative,
    where defined) and the largest difference quotient between neighbouring
    ``y`` samples; the tensor grid is refined until it changes by less than
    ``rel``.  An estimate that keeps growing is reported as falsified with
    the worst quotient as witness.
    """
    f = _as_expr(f, params)
    (r1, r2), (y1, y2) = K
    df = f.diff("y")
    estimates = []
    samples = 0
    witness = None
    n = (n0 - 1) * budget + 1
    for level in range(levels):
        r = np.linspace(r1, r2, n)
        y = np.linspace(y1, y2, n)
        R, Y = np.meshgrid(r, y, indexing="ij")
        F, bad = _eval_grid(f, r=R, y=Y)
        samples += R.size
        if bad is not None:
            return HypothesisReport("F1", FALSIFIED, bad,
                                    {"box": K, "estimates": estimates}, samples)
        D, _ = _eval_grid(df, r=R, y=Y)
        if D is None:
            D = _pointwise(df, r=R, y=Y)
        deriv_sup = float(np.nanmax(np.abs(D))) if np.any(np.isfinite(D)) else 0.0
        dq = np.abs(np.diff(F, axis=1)) / np.diff(y)[None, :]
        i, j = np.unravel_index(int(np.argmax(dq)), dq.shape)
        quotient = float(dq[i, j])
        estimates.append(max(deriv_sup, quotient))
        witness = {"kind": "difference_quotient", "r": float(r[i]), "y1": float(y[j]),
                   "y2": float(y[j + 1]), "quotient": quotient}
        if level > 0:
            prev, cur = estimates[-2], estimates[-1]
            if abs(cur - prev) <= rel * max(abs(cur), 1e-300) or cur == prev == 0:
                return HypothesisReport("F1", VERIFIED, None,
                                        {"box": K, "lipschitz_constant": cur,
                                         "estimates": estimates, "grid": n}, samples)
        n = 2 * n - 1
    growth = [b / a for a, b in zip(estimates, estimates[1:]) if a > 0]
    diag = {"box": K, "estimates": estimates, "growth": growth}
    if growth and all(g > 1 + rel for g in growth[-3:]):
        witness["exceeds"] = estimates[-2]
        return HypothesisReport("F1", FALSIFIED, witness, diag, samples)
    return HypothesisReport("F1", INCONCLUSIVE, None, diag, samples)


# ---------------------------------------------------------------------------
# [F2] linear growth bound


def _bind_s(e: Expr, s, cov):
    kw = {"s": s}
    if "r" in e.free_vars():
        kw["r"] = cov.inverse(s)
    return kw


def check_F2(f, L1, L2, cov: ChangeOfVariables, window, ymax: float = 10.0,
             n: int = 41, budget: int = 1, params=None) -> HypothesisReport:
    """Check ``|f(r(s), y)| <= L1(s) + L2(s) |y|`` on ``window x [-ymax, ymax]``.

    ``L1`` and ``L2`` may be written in ``s`` or in ``r`` (then ``r = r(s)``).
    Local integrability is checked by quadrature of ``L1``, ``L2`` over the
    window.
    """
    f, L1, L2 = (_as_expr(e, params) for e in (f, L1, L2))
    s1, s2 = window
    if not (cov.c1 < s1 < s2 < cov.c2):
        raise ValueError("window must be compact inside (c1, c2)")
    m = (n - 1) * budget + 1
    s = np.linspace(s1, s2, m)
    y = np.linspace(-ymax, ymax, 2 * m - 1)
    r = cov.inverse(s)
    S, Y = np.meshgrid(s, y, indexing="ij")
    R = np.broadcast_to(r[:, None], S.shape)
    F, bad = _eval_grid(f, r=R, y=Y, s=S)
    if bad is not None:
        return HypothesisReport("F2", FALSIFIED, bad, {}, S.size)
    l1, bad1 = _eval_grid(L1, **_bind_s(L1, s, cov))
    l2, bad2 = _eval_grid(L2, **_bind_s(L2, s, cov))
    if bad1 or bad2:
        return HypothesisReport("F2", FALSIFIED, bad1 or bad2, {}, S.size)
    rhs = l1[:, None] + l2[:, None] * np.abs(Y)
    lhs = np.abs(F)
    diag = {"window": window, "ymax": ymax,
            "max_ratio": float(np.max(lhs / np.where(rhs > 0, rhs, np.inf)))}
    if np.min(l1) < 0 or np.min(l2) < 0:
        i = int(np.argmin(np.minimum(l1, l2)))
        return HypothesisReport("F2", FALSIFIED,
                                {"kind": "negative_majorant", "s": float(s[i]),
                                 "L1": float(l1[i]), "L2": float(l2[i])}, diag, S.size)
    excess = lhs - rhs - 1e-12 * np.maximum(1.0, rhs)
    if np.any(excess > 0):
        i, j = np.unravel_index(int(np.argmax(excess)), excess.shape)
        witness = {"kind": "bound_violation", "s": float(s[i]), "r": float(r[i]),
                   "y": float(y[j]), "abs_f": float(lhs[i, j]), "bound": float(rhs[i, j])}
        return HypothesisReport("F2", FALSIFIED, witness, diag, S.size)
    for name, L in (("L1", L1), ("L2", L2)):
        val, err = integrate.quad(lambda x: float(L.evaluate(**_bind_s(L, x, cov))),
                                  s1, s2, limit=200)
        diag[f"integral_{name}"] = val
        if not math.isfinite(val):
            return HypothesisReport("F2", INCONCLUSIVE, None, diag, S.size)
    return HypothesisReport("F2", VERIFIED, None, diag, S.size)


# ---------------------------------------------------------------------------
# [F3], [F4] on a finite (c1, c2)


def _interior_s(cov, n):
    if cov.finite:
        return cov.c1 + (cov.c2 - cov.c1) * (np.arange(1, n + 1) / (n + 1))
    lo = cov.c1 if math.isfinite(cov.c1) else -1.0
    hi = cov.c2 if math.isfinite(cov.c2) else 1.0
    return lo + (hi - lo) * (np.arange(1, n + 1) / (n + 1))


def check_F3(f, cov: ChangeOfVariables, y_range=(1e-6, 1e6), n: int = 17,
             budget: int = 1, params=None) -> HypothesisReport:
    """``y -> f(r(s), y)`` positive and nonincreasing; ``s -> f`` integrable.

    Integrability in ``s`` is tested only for ``y`` in the declared positive
    range.
    """
    f = _as_expr(f, params)
    m = (n - 1) * budget + 1
    s = _interior_s(cov, m)
    r = cov.inverse(s)
    y = np.geomspace(y_range[0], y_range[1], 4 * m)
    R, Y = np.meshgrid(r, y, indexing="ij")
    F, bad = _eval_grid(f, r=R, y=Y)
    samples = R.size
    if bad is not None:
        return HypothesisReport("F3", FALSIFIED, bad, {}, samples)
    if np.any(F <= 0):
        i, j = np.unravel_index(int(np.argmin(F)), F.shape)
        return HypothesisReport("F3", FALSIFIED,
                                {"kind": "nonpositive", "s": float(s[i]), "r": float(r[i]),
                                 "y": float(y[j]), "f": float(F[i, j])}, {}, samples)
    D, _ = _eval_grid(f.diff("y"), r=R, y=Y)
    if D is None:
        D = _pointwise(f.diff("y"), r=R, y=Y)
    jump = np.diff(F, axis=1)
    scale = 1e-12 * np.maximum(np.abs(F[:, 1:]), 1.0)
    if np.any(jump > scale):
        i, j = np.unravel_index(int(np.argmax(jump - scale)), jump.shape)
        witness = {"kind": "increase", "s": float(s[i]), "r": float(r[i]),
                   "y1": float(y[j]), "y2": float(y[j + 1]),
                   "f1": float(F[i, j]), "f2": float(F[i, j + 1])}
        return HypothesisReport("F3", FALSIFIED, witness,
                                {"max_dfdy": float(np.nanmax(D))}, samples)
    diag = {"max_dfdy": float(np.nanmax(D)), "y_range": y_range,
            "integrability_note": "tested only for y in the declared range"}
    if cov.finite:
        integrals = {}
        for yy in (y_range[0], 1.0, y_range[1]):
            g = lambda x: float(f.evaluate(r=float(cov.inverse(x)), y=yy))
            val = integrate.quad(g, cov.c1, cov.c2, limit=200)[0]
            integrals[repr(yy)] = val
            if not math.isfinite(val):
                return HypothesisReport("F3", INCONCLUSIVE, None,
                                        {**diag, "integrals": integrals}, samples)
        diag["integrals"] = integrals
    return HypothesisReport("F3", VERIFIED, None, diag, samples)


def check_F4(f, cov: ChangeOfVariables, k_max: int = 12, n: int = 17,
             budget: int = 1, params=None) -> HypothesisReport:
    """``f -> inf`` as ``y -> 0+`` and ``f -> 0`` as ``y -> inf``, uniformly in ``s``.

    Uniformity is approximated by the min (resp. max) over an interior
    ``s`` grid at each ``y = 10**(-k)`` (resp. ``10**k``).
    """
    f = _as_expr(f, params)
    m = (n - 1) * budget + 1
    s = _interior_s(cov, m)
    r = cov.inverse(s)
    k = np.arange(1, k_max + 1)
    low = []
    high = []
    for kk in k:
        v0, bad = _eval_grid(f, r=r, y=np.full_like(r, 10.0 ** (-kk)))
        v1, bad1 = _eval_grid(f, r=r, y=np.full_like(r, 10.0 ** kk))
        if bad or bad1:
            return HypothesisReport("F4", FALSIFIED, bad or bad1, {}, 2 * m * len(low))
        low.append(float(np.min(v0)))
        high.append(float(np.max(np.abs(v1))))
    samples = 2 * m * len(k)
    t0, _ = _limit_trend(low)
    diag = {"near_zero": low, "near_infinity": high, "trend_at_zero": t0}
    if t0 != "infinite":
        verdict = FALSIFIED if t0 in ("finite", "minus_infinite") else INCONCLUSIVE
        witness = None
        if verdict == FALSIFIED:
            witness = {"kind": "limit_at_zero", "y": float(10.0 ** (-k_max)),
                       "min_f": low[-1], "limit_estimate": _limit_trend(low)[1]}
        return HypothesisReport("F4", verdict, witness, diag, samples)
    t1, lim1 = _limit_trend(high)
    decayed = high[-1] <= 1e-6 * max(high[0], 1e-300)
    diag["trend_at_infinity"] = t1
    if decayed or (t1 == "finite" and abs(lim1) <= 1e-8 * max(high[0], 1.0)):
        return HypothesisReport("F4", VERIFIED, None, diag, samples)
    if t1 == "finite" or t1 == "infinite" or np.all(np.diff(high) >= 0):
        witness = {"kind": "limit_at_infinity", "y": float(10.0 ** k_max),
                   "max_abs_f": high[-1], "limit_estimate": lim1}
        return HypothesisReport("F4", FALSIFIED, witness, diag, samples)
    return HypothesisReport("F4", INCONCLUSIVE, None, diag, samples)


def check_F3_F4(f, cov: ChangeOfVariables, budget: int = 1, params=None) -> HypothesisReport:
    if not cov.finite:
        raise ValueError("[F3]/[F4] are posed for finite (c1, c2)")
    f = _as_expr(f, params)
    return combine("F3_F4", [check_F3(f, cov, budget=budget),
                             check_F4(f, cov, budget=budget)])


# ---------------------------------------------------------------------------
# [F5]


def _dyadic_integral(g, lo, hi, pieces: int = 48):
    """``int_lo^hi g`` with singularities allowed at both ends.

    ``g(s, d)`` receives the point and its distance to the nearer end; the
    shells are integrated in that distance so the singular factor never sees
    the cancellation in ``s - lo``.  Splits at the midpoint, then integrates
    over dyadic shells towards each end.  Returns (value, classification,
    increments).
    """
    half = 0.5 * (hi - lo)
    incs = []
    # quad complains on divergent shells; the ratio test below decides instead
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        core = integrate.quad(lambda s: g(s, min(s - lo, hi - s)),
                              lo + half / 2, hi - half / 2, limit=200)[0]
        for k in range(1, pieces):
            a_out, a_in = half * 2.0 ** (-k), half * 2.0 ** (-k - 1)
            # shells thinner than the float spacing at the ends carry no information
            if a_in <= 8 * np.spacing(max(abs(lo), abs(hi))):
                break
            left = integrate.quad(lambda x: g(lo + x, x), a_in, a_out, limit=100)[0]
            right = integrate.quad(lambda x: g(hi - x, x), a_in, a_out, limit=100)[0]
            incs.append(left + right)
    cls, tail = classify_increments(incs)
    value = core + float(np.sum(incs)) + (tail or 0.0)
    return value, cls, incs


def check_F5(f, geom: GeometrySpec, cov: ChangeOfVariables, thetas=(0.5, 1.0, 2.0),
             budget: int = 1, params=None) -> HypothesisReport:
    """``0 < int_{c1}^{c2} A(r(s))^2 f(r(s), g_theta(s)) ds < inf`` for each theta."""
    f = _as_expr(f, params)
    if not cov.finite:
        raise ValueError("[F5] is posed for finite (c1, c2)")
    c1, c2 = cov.c1, cov.c2
    values = {}
    samples = 0
    pieces = 48 * budget
    for th in thetas:
        def g(s, d, th=th):
            # g_theta(s) = theta/(c2 - c1) * distance to the nearer end
            r = float(cov.inverse(s))
            return float(geom.A(r)) ** 2 * f.scalar(r=r, y=th / (c2 - c1) * d)
        try:
            val, cls, incs = _dyadic_integral(g, c1, c2, pieces)
        except DomainError as exc:
            return HypothesisReport("F5", FALSIFIED,
                                    {"kind": "domain_error", "theta": th, "error": str(exc)},
                                    {"values": values}, samples)
        samples += 21 * (2 * len(incs) + 1)
        values[repr(th)] = {"value": val, "classification": cls,
                            "last_increments": incs[-4:]}
        if cls == "diverges":
            witness = {"kind": "divergence", "theta": th, "partial_sum": val,
                       "last_increments": incs[-4:]}
            return HypothesisReport("F5", FALSIFIED, witness, {"values": values}, samples)
        if cls != "converges":
            return HypothesisReport("F5", INCONCLUSIVE, None, {"values": values}, samples)
        if not val > 0:
            return HypothesisReport("F5", FALSIFIED,
                                    {"kind": "nonpositive", "theta": th, "value": val},
                                    {"values": values}, samples)
    return HypothesisReport("F5", VERIFIED, None, {"values": values}, samples)


# ---------------------------------------------------------------------------
# [A1], [A2]


def check_A1(geom: GeometrySpec, cov: ChangeOfVariables, n: int = 257,
             budget: int = 1) -> HypothesisReport:
    """``A(r(s))`` continuous on the closed ``[c1, c2]`` and positive inside."""
    diag = {"c1": cov.c1, "c2": cov.c2}
    if not cov.finite:
        return HypothesisReport("A1", FALSIFIED,
                                {"kind": "unbounded_interval", "c1": cov.c1, "c2": cov.c2},
                                diag, 0)
    m = (n - 1) * budget + 1
    s = _interior_s(cov, m)
    A = np.asarray(cov.geometry.A(cov.inverse(s)), dtype=float)
    if np.any(~np.isfinite(A)) or np.any(A <= 0):
        i = int(np.argmin(np.where(np.isfinite(A), A, -np.inf)))
        return HypothesisReport("A1", FALSIFIED,
                                {"kind": "nonpositive", "s": float(s[i]), "A": float(A[i])},
                                diag, m)
    L = cov.c2 - cov.c1
    limits = {}
    for name, end, sign in (("c1", cov.c1, 1.0), ("c2", cov.c2, -1.0)):
        ss = end + sign * L * 2.0 ** -np.arange(3, 40)
        vals = np.asarray(cov.geometry.A(cov.inverse(ss)), dtype=float)
        trend, lim = _limit_trend(vals)
        if np.ptp(vals) <= 1e-12 * np.max(np.abs(vals)):
            trend, lim = "finite", float(vals[-1])
        limits[name] = {"trend": trend, "limit": lim}
        if trend in ("infinite", "minus_infinite"):
            return HypothesisReport("A1", FALSIFIED,
                                    {"kind": "endpoint_blowup", "s": float(ss[-1]),
                                     "A": float(vals[-1])}, {**diag, "limits": limits}, m)
        if trend != "finite":
            return HypothesisReport("A1", INCONCLUSIVE, None, {**diag, "limits": limits}, m)
    return HypothesisReport("A1", VERIFIED, None, {**diag, "limits": limits}, m + 74)


def check_A2(geom: GeometrySpec, a: float, n: int = 257, budget: int = 1) -> HypothesisReport:
    """``A > 0`` on ``(a, inf)`` and ``1/A`` integrable near ``a``."""
    diag = {"a": a}
    if not (geom.lo <= a < geom.hi) or math.isfinite(geom.hi):
        return HypothesisReport("A2", FALSIFIED,
                                {"kind": "domain", "lo": geom.lo, "hi": geom.hi, "a": a},
                                diag, 0)
    if a == geom.lo and geom.fixed_lo:
        k = geom.volume.order_lo
        diag["order_at_a"] = k
        if k is not None and k >= 1:
            return HypothesisReport("A2", FALSIFIED,
                                    {"kind": "non_integrable", "a": a, "order": k}, diag, 0)
    m = (n - 1) * budget + 1
    r = a + np.geomspace(1e-6, 1e3, m)
    A = np.asarray(geom.A(r), dtype=float)
    if np.any(~np.isfinite(A)) or np.any(A <= 0):
        i = int(np.argmin(np.where(np.isfinite(A), A, -np.inf)))
        return HypothesisReport("A2", FALSIFIED,
                                {"kind": "nonpositive", "r": float(r[i]), "A": float(A[i])},
                                diag, m)
    dA = np.asarray(geom.dA(r), dtype=float)
    diag["smooth_on_samples"] = bool(np.all(np.isfinite(dA)))
    return HypothesisReport("A2", VERIFIED, None, diag, m)


def check_A1_A2(geom: GeometrySpec, cov: ChangeOfVariables | None = None,
                a: float | None = None, budget: int = 1) -> HypothesisReport:
    parts = []
    if cov is not None:
        parts.append(check_A1(geom, cov, budget=budget))
    if a is not None:
        parts.append(check_A2(geom, a, budget=budget))
    if not parts:
        raise ValueError("need a change of variables, a base point a, or both")
    return combine("A1_A2", parts)


# ---------------------------------------------------------------------------
# [F6], [B1] on (a, inf)


def _rho_function(geom, a):
    cov = build_change_of_variables(geom)
    base = cov.c1 if a == geom.lo else float(cov.forward(a))
    if not math.isfinite(base):
        raise ValueError(f"1/A is not integrable at a={a}")
    return lambda r: float(cov.forward(r)) - base


def _half_line_integral(g, a, pieces: int = 44):
    """``int_a^inf g`` over ``[a, a+1]`` and dyadic shells ``[a + 2^k, a + 2^(k+1)]``."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        head = integrate.quad(g, a, a + 1.0, limit=200)[0]
        incs = [integrate.quad(g, a + 2.0 ** k, a + 2.0 ** (k + 1), limit=200)[0]
                for k in range(pieces)]
    cls, tail = classify_increments(incs)
    return head + float(np.sum(incs)) + (tail or 0.0), cls, incs


def check_F6(f, h, geom: GeometrySpec, a: float, r_extent: float = 20.0,
             y_range=(1e-8, 1e4), n: int = 33, budget: int = 1,
             params=None) -> HypothesisReport:
    """``|f| <= y h(r, y)``, ``h >= 0`` nondecreasing in ``y``, ``h -> 0`` as ``y -> 0+``,
    and ``int_a^inf A rho h(r, rho) dr < inf``."""
    f, h = _as_expr(f, params), _as_expr(h, params)
    m = (n - 1) * budget + 1
    r = a + r_extent * (np.arange(1, m + 1) / m)
    y = np.geomspace(y_range[0], y_range[1], 2 * m)
    R, Y = np.meshgrid(r, y, indexing="ij")
    samples = R.size
    F, bad = _eval_grid(f, r=R, y=Y)
    H, badh = _eval_grid(h, r=R, y=Y)
    if bad or badh:
        return HypothesisReport("F6", FALSIFIED, bad or badh, {}, samples)
    diag = {}
    if np.any(H < 0):
        i, j = np.unravel_index(int(np.argmin(H)), H.shape)
        return HypothesisReport("F6", FALSIFIED, {"kind": "negative_h", "r": float(r[i]),
                                                  "y": float(y[j]), "h": float(H[i, j])},
                                diag, samples)
    excess = np.abs(F) - Y * H - 1e-12 * np.maximum(Y * H, 1e-300)
    if np.any(excess > 0):
        i, j = np.unravel_index(int(np.argmax(excess)), excess.shape)
        return HypothesisReport("F6", FALSIFIED,
                                {"kind": "bound_violation", "r": float(r[i]), "y": float(y[j]),
                                 "abs_f": float(abs(F[i, j])), "y_h": float(Y[i, j] * H[i, j])},
                                diag, samples)
    drop = H[:, :-1] - H[:, 1:] - 1e-12 * np.maximum(np.abs(H[:, 1:]), 1e-300)
    if np.any(drop > 0):
        i, j = np.unravel_index(int(np.argmax(drop)), drop.shape)
        return HypothesisReport("F6", FALSIFIED,
                                {"kind": "h_decreasing", "r": float(r[i]), "y1": float(y[j]),
                                 "y2": float(y[j + 1]), "h1": float(H[i, j]),
                                 "h2": float(H[i, j + 1])}, diag, samples)
    ks = np.arange(1, 13)
    hmax = []
    for k in ks:
        v, _ = _eval_grid(h, r=r, y=np.full_like(r, 10.0 ** (-k)))
        hmax.append(float(np.max(v)))
    samples += len(ks) * m
    trend, lim = _limit_trend(hmax)
    diag["h_near_zero"] = hmax
    vanished = hmax[-1] <= 1e-6 * max(hmax[0], 1e-300) or hmax[-1] == 0
    if not vanished:
        if trend == "finite" and lim is not None and lim > 1e-8 * max(hmax[0], 1e-300):
            i = int(np.argmax(_eval_grid(h, r=r, y=np.full_like(r, 1e-12))[0]))
            return HypothesisReport("F6", FALSIFIED,
                                    {"kind": "h_not_vanishing", "r": float(r[i]), "y": 1e-12,
                                     "h": hmax[-1], "limit_estimate": lim}, diag, samples)
        return HypothesisReport("F6", INCONCLUSIVE, None, diag, samples)
    rho = _rho_function(geom, a)

    def g(t):
        p = rho(t)
        return float(geom.A(t)) * p * h.scalar(r=t, y=p) if p > 0 else 0.0

    val, cls, incs = _half_line_integral(g, a, 44 * budget)
    diag.update({"integral": val, "classification": cls, "last_increments": incs[-4:]})
    samples += 21 * len(incs)
    if cls == "diverges":
        return HypothesisReport("F6", FALSIFIED, {"kind": "divergence", "partial_sum": val,
                                                  "last_increments": incs[-4:]}, diag, samples)
    if cls != "converges":
        return HypothesisReport("F6", INCONCLUSIVE, None, diag, samples)
    return HypothesisReport("F6", VERIFIED, None, diag, samples)


def check_B1(b, geom: GeometrySpec, a: float, r_extent: float = 64.0, n: int = 257,
             budget: int = 1, params=None) -> HypothesisReport:
    """``b >= 0``, ``b != 0`` and ``int_a^inf A(t) rho(min(t, 1+a)) b(t) dt < inf``."""
    b = _as_expr(b, params)
    m = (n - 1) * budget + 1
    t = a + r_extent * (np.arange(1, m + 1) / m)
    B, bad = _eval_grid(b, r=t, t=t)
    if bad:
        return HypothesisReport("B1", FALSIFIED, bad, {}, m)
    if np.any(B < 0):
        i = int(np.argmin(B))
        return HypothesisReport("B1", FALSIFIED, {"kind": "negative", "t": float(t[i]),
                                                  "b": float(B[i])}, {}, m)
    if not np.any(B > 0):
        return HypothesisReport("B1", FALSIFIED, {"kind": "vanishes", "samples": m,
                                                  "max_b": float(np.max(B))}, {}, m)
    i = int(np.argmax(B))
    diag = {"positive_sample": {"t": float(t[i]), "b": float(B[i])}}
    rho = _rho_function(geom, a)
    rho_cap = rho(1.0 + a)

    def g(x):
        p = rho(x) if x < 1.0 + a else rho_cap
        return float(geom.A(x)) * p * b.scalar(r=x, t=x)

    val, cls, incs = _half_line_integral(g, a, 44 * budget)
    diag.update({"integral": val, "classification": cls, "last_increments": incs[-4:]})
    samples = m + 21 * len(incs)
    if cls == "diverges":
        return HypothesisReport("B1", FALSIFIED, {"kind": "divergence", "partial_sum": val,
                                                  "last_increments": incs[-4:]}, diag, samples)
    if cls != "converges":
        return HypothesisReport("B1", INCONCLUSIVE, None, diag, samples)
    return HypothesisReport("B1", VERIFIED, None, diag, samples)


# ---------------------------------------------------------------------------


def run_audit(geom: GeometrySpec, f, config: dict | None = None, params=None,
              budget: int = 1) -> dict[str, HypothesisReport]:
    """Run every check that the geometry and the configuration make meaningful.

    ``config`` keys (all optional): ``F1_box`` (list of boxes), ``L1``/``L2``
    and ``F2_window``, ``thetas``, ``y_range``, ``a``, ``h``, ``b``, ``r0``.
    Conditions posed on a finite ``(c1, c2)`` are run only when the
    interval is finite, the half-line conditions only when the domain is
    ``(a, inf)``.
    """
    cfg = dict(config or {})
    f = _as_expr(f, params)
    out: dict[str, HypothesisReport] = {}
    cov = build_change_of_variables(geom, cfg.get("r0"))
    boxes = cfg.get("F1_box")
    if boxes is None:
        lo = geom.lo if math.isfinite(geom.lo) else -1.0
        hi = geom.hi if math.isfinite(geom.hi) else lo + 2.0
        pad = 0.1 * (hi - lo)
        boxes = [((lo + pad, hi - pad), (0.0, 1.0))]
    elif boxes and not isinstance(boxes[0][0], (list, tuple)):
        boxes = [boxes]
    f1 = [check_F1(f, tuple(map(tuple, K)), budget=budget) for K in boxes]
    out["F1"] = f1[0] if len(f1) == 1 else combine("F1", f1)
    if "L1" in cfg and "L2" in cfg:
        window = cfg.get("F2_window")
        if window is None:
            s_lo = cov.c1 if math.isfinite(cov.c1) else -1.0
            s_hi = cov.c2 if math.isfinite(cov.c2) else 1.0
            w = s_hi - s_lo
            window = (s_lo + 0.1 * w, s_hi - 0.1 * w)
        out["F2"] = check_F2(f, _as_expr(cfg["L1"], params), _as_expr(cfg["L2"], params),
                             cov, tuple(window), ymax=cfg.get("ymax", 10.0), budget=budget)
    if cov.finite:
        y_range = tuple(cfg.get("y_range", (1e-6, 1e6)))
        out["A1"] = check_A1(geom, cov, budget=budget)
        out["F3"] = check_F3(f, cov, y_range, budget=budget)
        out["F4"] = check_F4(f, cov, budget=budget)
        if out["F3"].verdict == FALSIFIED:
            out["F5"] = HypothesisReport("F5", INCONCLUSIVE, None,
                                         {"skipped": "requires [F3]"}, 0)
        else:
            out["F5"] = check_F5(f, geom, cov, tuple(cfg.get("thetas", (0.5, 1.0, 2.0))),
                                 budget=budget)
    if not math.isfinite(geom.hi):
        a = cfg.get("a", geom.lo if math.isfinite(geom.lo) else None)
        if a is not None:
            out["A2"] = check_A2(geom, a, budget=budget)
            if out["A2"].verdict != FALSIFIED:
                if "h" in cfg:
                    out["F6"] = check_F6(f, _as_expr(cfg["h"], params), geom, a, budget=budget)
                if "b" in cfg:
                    out["B1"] = check_B1(_as_expr(cfg["b"], params), geom, a, budget=budget)
    return out
