"""Problem-file driven command line front end.

A problem file is TOML::

    task = "solve-ivp"
    tol = 1e-8

    [geometry]
    kind = "sphere"
    n = 2

    [nonlinearity]
    f = "lam*y"
    params = { lam = 2.0 }

    [ivp]
    x0 = 1.0
    u0 = 0.5403023058681398
    du0 = -0.8414709848078965
    window = [0.01, 3.13]

Usage: ``radialred <task> problem.toml [--out DIR] [--tol T] [--set key=value] ...``.
``radialred run problem.toml`` executes the task named inside the file.

Exit status is 0 on success, 1 on validation or solver failure, and 2 when a
hypothesis listed under ``require`` is falsified.
"""

from __future__ import annotations

import argparse
import contextlib
import copy
import csv
import hashlib
import math
import platform
import random
import sys
import time
from pathlib import Path

import numpy as np
import scipy

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from . import __version__
from . import geometry as geo
from .expr import ExprError, parse, to_text
from .hypotheses import FALSIFIED, run_audit
from .reduction import build_change_of_variables, reduce, transform
from .solvers import (SolverError, check_completeness_bounds, check_nonexistence,
                      picard_residual, solve_bvp_singular, solve_from_pole, solve_ivp,
                      solve_picard_negative_power, solve_picard_sublinear)
from .verify import (CertificateError, convergence_ladder, ode_residual, revolution_mesh,
                     uniqueness_contract)

TASKS = ("reduce", "audit", "solve-ivp", "solve-bvp", "solve-picard", "nonexistence",
         "uniqueness", "verify")

EXIT_OK, EXIT_FAILURE, EXIT_FALSIFIED = 0, 1, 2


class ProblemError(ValueError):
    """Validation failure tied to one key of the problem file."""

    def __init__(self, key: str, message: str, value=None):
        self.key = key
        self.value = value
        text = f"{key}: {message}"
        if value is not None:
            text += f" (got {value!r})"
        super().__init__(text)


class RandomnessRequested(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Deterministic serialization


def fmt(x) -> str:
    """17 significant digits, enough to round-trip a double."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")


def _plain(obj):
    """Convert numpy containers and scalars into JSON-compatible Python objects."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    if obj is None or isinstance(obj, str):
        return obj
    return repr(obj)


def dumps(obj, indent: int = 2) -> str:
    """JSON text with sorted keys, floats at 17 significant digits.

    Non-finite floats become the strings ``"inf"``, ``"-inf"`` and ``"nan"``.
    """
    def enc(o, depth):
        pad = " " * (indent * (depth + 1))
        end = " " * (indent * depth)
        if isinstance(o, dict):
            if not o:
                return "{}"
            items = [f"{pad}{_quote(k)}: {enc(o[k], depth + 1)}" for k in sorted(o)]
            return "{\n" + ",\n".join(items) + "\n" + end + "}"
        if isinstance(o, list):
            if not o:
                return "[]"
            if all(not isinstance(v, (dict, list)) for v in o):
                return "[" + ", ".join(enc(v, depth + 1) for v in o) + "]"
            return "[\n" + ",\n".join(pad + enc(v, depth + 1) for v in o) + "\n" + end + "]"
        if isinstance(o, bool):
            return "true" if o else "false"
        if isinstance(o, int):
            return str(o)
        if isinstance(o, float):
            return fmt(o) if math.isfinite(o) else _quote(fmt(o))
        if o is None:
            return "null"
        return _quote(str(o))
    return enc(_plain(obj), 0) + "\n"


def _quote(s: str) -> str:
    import json
    return json.dumps(s)


def write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, (int, np.integer, str)) else fmt(v) for v in row])


# ---------------------------------------------------------------------------
# Problem loading


def parse_value(text: str):
    """Interpret an override value as a TOML value, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(problem: dict, overrides) -> dict:
    out = copy.deepcopy(problem)
    for item in overrides or ():
        if "=" not in item:
            raise ProblemError("--set", "expected key=value", item)
        key, text = item.split("=", 1)
        key = key.strip()
        parts = key.split(".")
        if not all(parts):
            raise ProblemError("--set", "empty key component", item)
        node = out
        for p in parts[:-1]:
            nxt = node.setdefault(p, {})
            if not isinstance(nxt, dict):
                raise ProblemError(key, "cannot set a subkey of a scalar value", nxt)
            node = nxt
        node[parts[-1]] = parse_value(text.strip())
    return out


def load_problem(path, overrides=()) -> tuple[dict, bytes]:
    path = Path(path)
    if not path.is_file():
        raise ProblemError("problem", "file not found", str(path))
    raw = path.read_bytes()
    try:
        problem = tomllib.loads(raw.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ProblemError("problem", f"not valid TOML: {exc}", str(path)) from None
    problem = apply_overrides(problem, overrides)
    problem.setdefault("_base_dir", str(path.parent))
    return problem, raw


def _section(problem, name, required=True) -> dict:
    sec = problem.get(name)
    if sec is None:
        if required:
            raise ProblemError(name, "missing required key")
        return {}
    if not isinstance(sec, dict):
        raise ProblemError(name, "expected a table", sec)
    return sec


def _number(sec, key, prefix, default=None, positive=False, required=False):
    full = f"{prefix}.{key}" if prefix else key
    if key not in sec:
        if required:
            raise ProblemError(full, "missing required key")
        return default
    v = sec[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ProblemError(full, "expected a number", v)
    v = float(v)
    if not math.isfinite(v):
        raise ProblemError(full, "expected a finite number", v)
    if positive and not v > 0:
        raise ProblemError(full, "must be positive", v)
    return v


def _pair(sec, key, prefix, default=None, required=False, ordered=True):
    full = f"{prefix}.{key}"
    if key not in sec:
        if required:
            raise ProblemError(full, "missing required key")
        return default
    v = sec[key]
    if (not isinstance(v, (list, tuple)) or len(v) != 2
            or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v)):
        raise ProblemError(full, "expected a pair of numbers", v)
    a, b = float(v[0]), float(v[1])
    if ordered and not a < b:
        raise ProblemError(full, "window must be nonempty (lo < hi)", v)
    return a, b


def _expr(text, key, params, variables=None):
    if isinstance(text, (int, float)) and not isinstance(text, bool):
        text = repr(float(text))
    if not isinstance(text, str):
        raise ProblemError(key, "expected an expression string", text)
    try:
        if variables is None:
            return parse(text, params)
        return parse(text, params, variables=variables)
    except ExprError as exc:
        raise ProblemError(key, f"does not parse: {exc}", text) from None


def _params(problem) -> dict:
    nl = problem.get("nonlinearity", {})
    params = nl.get("params", {}) if isinstance(nl, dict) else {}
    if not isinstance(params, dict):
        raise ProblemError("nonlinearity.params", "expected a table", params)
    out = {}
    for k, v in params.items():
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ProblemError(f"nonlinearity.params.{k}", "expected a number", v)
        out[k] = float(v)
    return out


def build_geometry(problem) -> geo.GeometrySpec:
    sec = _section(problem, "geometry")
    params = _params(problem)
    kind = sec.get("kind")
    if not isinstance(kind, str):
        raise ProblemError("geometry.kind", "missing or not a string", kind)
    try:
        if kind in ("euclidean", "sphere", "hyperbolic"):
            n = sec.get("n")
            if not isinstance(n, int) or isinstance(n, bool) or n < 2:
                raise ProblemError("geometry.n", "expected an integer >= 2", n)
            return geo.model_space(kind, n)
        if kind == "warped-r3":
            return geo.warped_r3()
        if kind == "sqrt-profile":
            return geo.sqrt_profile_surface()
        if kind == "cylinder":
            return geo.cylinder(_number(sec, "radius", "geometry", 1.0, positive=True),
                                _number(sec, "height", "geometry", 1.0, positive=True))
        if kind == "paraboloid":
            return geo.paraboloid(_number(sec, "t_lo", "geometry", 0.0),
                                  _number(sec, "t_hi", "geometry", 2.0))
        if kind == "volume":
            A = _expr(sec.get("A"), "geometry.A", params)
            lo, hi = _domain(sec)
            dim = sec.get("dim", 2)
            return geo.from_volume_expression(A, lo, hi, dim, name=sec.get("name", "custom"))
        if kind == "profile":
            t_lo, t_hi = _pair(sec, "t_range", "geometry", required=True)
            R = _expr(sec.get("R"), "geometry.R", params, variables=("t",))
            Z = _expr(sec.get("Z"), "geometry.Z", params, variables=("t",))
            return geo.revolution_surface(R, Z, t_lo, t_hi, name=sec.get("name", "revolution"))
        if kind == "tables":
            base = Path(problem.get("_base_dir", "."))
            paths = []
            for key in ("R_csv", "Z_csv"):
                p = sec.get(key)
                if not isinstance(p, str):
                    raise ProblemError(f"geometry.{key}", "missing or not a path", p)
                full = (base / p) if not Path(p).is_absolute() else Path(p)
                if not full.is_file():
                    raise ProblemError(f"geometry.{key}", "file not found", p)
                paths.append(full)
            return geo.profile_from_csv(*paths, name=sec.get("name", "tabulated"))
    except ProblemError:
        raise
    except (ValueError, ExprError) as exc:
        raise ProblemError("geometry", str(exc), kind) from None
    raise ProblemError("geometry.kind", "unknown geometry kind", kind)


def _domain(sec):
    v = sec.get("domain")
    if not isinstance(v, (list, tuple)) or len(v) != 2:
        raise ProblemError("geometry.domain", "expected [lo, hi]", v)
    try:
        lo, hi = (float(x) if not isinstance(x, str) else float(x.replace("infinity", "inf"))
                  for x in v)
    except ValueError:
        raise ProblemError("geometry.domain", "expected numbers or 'inf'", v) from None
    if not lo < hi:
        raise ProblemError("geometry.domain", "window must be nonempty (lo < hi)", v)
    return lo, hi


def nonlinearity(problem, required=True):
    sec = _section(problem, "nonlinearity", required)
    if "f" not in sec:
        if required:
            raise ProblemError("nonlinearity.f", "missing required key")
        return None
    f = _expr(sec["f"], "nonlinearity.f", _params(problem))
    extra = f.free_vars() - {"r", "y"}
    if extra:
        raise ProblemError("nonlinearity.f", f"may depend on r and y only, found {sorted(extra)}",
                           sec["f"])
    return f


def tolerance(problem) -> float:
    tol = problem.get("tol", 1e-8)
    if isinstance(tol, bool) or not isinstance(tol, (int, float)) or not tol > 0:
        raise ProblemError("tol", "must be a positive number", tol)
    return float(tol)


# ---------------------------------------------------------------------------
# Seed-free guard


_RANDOM_ENTRY_POINTS = [(np.random, name) for name in
                        ("default_rng", "seed", "random", "rand", "randn", "randint",
                         "normal", "uniform", "choice", "shuffle", "permutation",
                         "RandomState", "Generator")]
_RANDOM_ENTRY_POINTS += [(random, name) for name in
                         ("seed", "random", "uniform", "randint", "choice", "shuffle",
                          "gauss", "sample")]


@contextlib.contextmanager
def seed_free_guard(active: bool):
    """While active, any call into the numpy or stdlib random generators raises."""
    if not active:
        yield
        return
    saved = []

    def trap(name):
        def _raise(*a, **k):
            raise RandomnessRequested(f"randomness requested via {name} under --seed-free")
        return _raise

    for mod, name in _RANDOM_ENTRY_POINTS:
        if hasattr(mod, name):
            saved.append((mod, name, getattr(mod, name)))
            setattr(mod, name, trap(f"{mod.__name__}.{name}"))
    try:
        yield
    finally:
        for mod, name, fn in saved:
            setattr(mod, name, fn)


# ---------------------------------------------------------------------------
# Tasks.  Each returns (report dict, flags dict) and writes its files into ctx.out.


class Context:
    def __init__(self, problem, out: Path, tol: float, plots: bool):
        self.problem = problem
        self.out = out
        self.tol = tol
        self.plots = plots
        self.files: list[str] = []
        self.params = _params(problem)

    def write_json(self, name, obj):
        (self.out / name).write_text(dumps(obj))
        self.files.append(name)

    def write_csv(self, name, header, rows):
        write_csv(self.out / name, header, rows)
        self.files.append(name)

    def svg(self, name, draw):
        if not self.plots:
            return
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        matplotlib.rcParams["svg.hashsalt"] = "radialred"
        fig, ax = plt.subplots(figsize=(6, 4))
        draw(ax)
        fig.tight_layout()
        fig.savefig(self.out / name, format="svg", metadata={"Date": None})
        plt.close(fig)
        self.files.append(name)


def _geometry_summary(geom, cov=None) -> dict:
    d = {"name": geom.name, "dim": geom.dim, "domain": list(geom.domain),
         "fixed_lo": geom.fixed_lo, "fixed_hi": geom.fixed_hi,
         "order_lo": geom.volume.order_lo, "order_hi": geom.volume.order_hi,
         "boundary_case": geom.boundary_case}
    if cov is not None:
        d.update({"r0": cov.r0, "c1": cov.c1, "c2": cov.c2,
                  "c1_status": cov.c1_status, "c2_status": cov.c2_status})
    return d


def _default_window(geom):
    lo, hi = geom.domain
    if math.isfinite(lo) and math.isfinite(hi):
        pad = 1e-3 * (hi - lo)
        return lo + pad, hi - pad
    if math.isfinite(lo):
        return lo + 1e-3, lo + 10.0
    if math.isfinite(hi):
        return hi - 10.0, hi - 1e-3
    return -5.0, 5.0


def _base_point(sec, prefix):
    r0 = sec.get("r0")
    return None if r0 is None else _number(sec, "r0", prefix)


def _solution_rows(sol, samples):
    if samples:
        x = np.linspace(sol.window[0], sol.window[1], int(samples))
        return [(a, b, c) for a, b, c in zip(x, sol(x), sol.derivative(x))]
    return list(zip(sol.grid, sol.values, sol.derivatives))


def _plot_solution(ctx, sol, title):
    def draw(ax):
        ax.plot(sol.grid, sol.values, lw=1.2)
        ax.set_xlabel(sol.coordinate)
        ax.set_ylabel("u")
        ax.set_title(title)
    ctx.svg("solution.svg", draw)


def task_reduce(ctx):
    geom = build_geometry(ctx.problem)
    f = nonlinearity(ctx.problem)
    sec = _section(ctx.problem, "reduce", required=False)
    try:
        cov = build_change_of_variables(geom, _base_point(sec, "reduce"))
    except ValueError as exc:
        raise ProblemError("reduce.r0", str(exc), sec.get("r0")) from None
    ode = reduce(geom, f)
    lo, hi = _pair(sec, "window", "reduce", _default_window(geom))
    n = int(sec.get("samples", 201))
    if n < 2:
        raise ProblemError("reduce.samples", "need at least 2 samples", n)
    r = np.linspace(lo, hi, n)
    if not (geom.lo < lo and hi < geom.hi):
        raise ProblemError("reduce.window", "must lie inside the open domain", [lo, hi])
    A = np.asarray(geom.A(r), dtype=float) + 0 * r
    dA = np.asarray(geom.dA(r), dtype=float) + 0 * r
    s = np.asarray(cov.forward(r), dtype=float)
    ctx.write_csv("coefficients.csv", ["r", "A", "dA", "drift", "s"],
                  zip(r, A, dA, dA / A, s))
    report = {"geometry": _geometry_summary(geom, cov), "f": to_text(f),
              "reduced_form": "u'' + (A'(r)/A(r)) u' + f(r, u) = 0",
              "self_adjoint_form": "(A u')' + A f(r, u) = 0",
              "transformed_form": "z'' + A(r(s))^2 f(r(s), z) = 0",
              "window": [lo, hi], "samples": n}
    ctx.write_json("report.json", report)

    def draw(ax):
        ax.plot(r, dA / A, lw=1.2)
        ax.set_xlabel("r")
        ax.set_ylabel("(ln A)'")
    ctx.svg("coefficients.svg", draw)
    return report, {}


def _audit(ctx, geom, f, conditions=None):
    sec = _section(ctx.problem, "audit", required=False)
    config = {k: v for k, v in sec.items() if k not in ("completeness", "budget")}
    for key in ("L1", "L2", "h", "b"):
        if key in config:
            config[key] = _expr(config[key], f"audit.{key}", ctx.params)
    budget = int(sec.get("budget", 1))
    try:
        reports = run_audit(geom, f, config, ctx.params, budget=budget)
    except (ValueError, ExprError) as exc:
        raise ProblemError("audit", str(exc)) from None
    comp = sec.get("completeness")
    if comp is not None:
        if not isinstance(comp, dict):
            raise ProblemError("audit.completeness", "expected a table", comp)
        phi = _expr(comp.get("phi"), "audit.completeness.phi", ctx.params,
                    variables=("t", "x1", "x2"))
        window = comp.get("window")
        try:
            window = tuple(tuple(map(float, w)) for w in window)
            assert len(window) == 3 and all(len(w) == 2 for w in window)
        except (TypeError, ValueError, AssertionError):
            raise ProblemError("audit.completeness.window",
                               "expected [[t1,t2],[x11,x12],[x21,x22]]", window) from None
        C = _number(comp, "C", "audit.completeness", positive=True, required=True)
        try:
            reports["completeness"] = check_completeness_bounds(phi, geom, f, window, C)
        except ValueError as exc:
            raise ProblemError("audit.completeness.window", str(exc), window) from None
    if conditions is not None:
        selected = {c: reports[c] for c in conditions if c in reports}
        missing = [c for c in conditions if c not in reports]
        # [F6] and [B1] are skipped when their prerequisite [A2] fails; report that instead
        gate = reports.get("A2")
        if gate is not None and gate.verdict == FALSIFIED and any(c in ("F6", "B1")
                                                                  for c in missing):
            selected["A2"] = gate
            missing = [c for c in missing if c not in ("F6", "B1")]
        if missing:
            raise ProblemError("require", "conditions not applicable to this problem", missing)
        reports = selected
    return reports


def task_audit(ctx):
    geom = build_geometry(ctx.problem)
    f = nonlinearity(ctx.problem)
    reports = _audit(ctx, geom, f)
    data = {k: r.to_dict() for k, r in reports.items()}
    ctx.write_json("audit.json", data)
    return {"verdicts": {k: r.verdict for k, r in reports.items()}}, {}


def task_solve_ivp(ctx):
    geom = build_geometry(ctx.problem)
    f = nonlinearity(ctx.problem)
    sec = _section(ctx.problem, "ivp")
    coord = sec.get("coordinate", "r")
    if coord not in ("r", "s"):
        raise ProblemError("ivp.coordinate", "expected 'r' or 's'", coord)
    u0 = _number(sec, "u0", "ivp", required=True)
    ode = reduce(geom, f)
    cov = None
    try:
        if sec.get("pole", False):
            if coord != "r":
                raise ProblemError("ivp.coordinate", "pole start is defined in r", coord)
            window = _pair(sec, "window", "ivp", _default_window(geom))
            sol = solve_from_pole(geom, f, u0, window, ctx.tol)
        else:
            x0 = _number(sec, "x0", "ivp", required=True)
            du0 = _number(sec, "du0", "ivp", required=True)
            window = _pair(sec, "window", "ivp", required=True)
            if coord == "s":
                cov = build_change_of_variables(geom, _base_point(sec, "ivp"))
                ode = transform(ode, cov)
            sol = solve_ivp(ode, x0, u0, du0, window, ctx.tol)
    except ProblemError:
        raise
    except ValueError as exc:
        raise ProblemError("ivp.window", str(exc), sec.get("window")) from None
    samples = sec.get("samples")
    ctx.write_csv("solution.csv", ["coord", "u", "du"], _solution_rows(sol, samples))
    inner = sol.grid[1:-1] if len(sol.grid) > 2 else sol.grid
    if sol.grid[0] == geom.lo:
        inner = inner[inner > geom.lo]
    res = ode_residual(sol, ode, inner) if len(inner) else 0.0
    report = {"geometry": _geometry_summary(geom, cov), "f": to_text(f),
              "coordinate": sol.coordinate, "provenance": sol.provenance,
              "window": list(sol.window), "nodes": len(sol.grid),
              "interpolation": sol.interpolation, "ode_residual_at_nodes": res,
              "info": {k: v for k, v in sol.info.items() if not k.startswith("_")}}
    ctx.write_json("report.json", report)
    _plot_solution(ctx, sol, "IVP solution")
    return report, {"blowup": bool(sol.info.get("blowup", False))}


def task_solve_bvp(ctx):
    geom = build_geometry(ctx.problem)
    f = nonlinearity(ctx.problem)
    sec = _section(ctx.problem, "bvp")
    coeffs = [_number(sec, k, "bvp", required=True) for k in ("alpha", "beta", "gamma", "delta")]
    try:
        cov = build_change_of_variables(geom, _base_point(sec, "bvp"))
    except ValueError as exc:
        raise ProblemError("bvp.r0", str(exc), sec.get("r0")) from None
    if not cov.finite:
        raise ProblemError("geometry", "the two-point problem needs a finite (c1, c2)",
                           geom.name)
    try:
        sol = solve_bvp_singular(geom, cov, f, *coeffs, tol=min(ctx.tol, 1e-10))
    except ValueError as exc:
        raise ProblemError("bvp", str(exc), coeffs) from None
    ctx.write_csv("solution.csv", ["coord", "u", "du"],
                  _solution_rows(sol, sec.get("samples")))
    info = sol.info
    ctx.write_csv("unit_interval.csv", ["t", "w", "dw"], zip(info["t"], info["w"], info["dw"]))
    keep = ("shooting_parameter", "eps", "ladder", "ivp_solves", "ladder_settled",
            "regularization_drift", "boundary_residuals", "coefficients")
    report = {"geometry": _geometry_summary(geom, cov), "f": to_text(f),
              "coordinate": sol.coordinate, "provenance": sol.provenance,
              "min_value": float(np.min(info["w"][1:-1])) if len(info["w"]) > 2 else None,
              "info": {k: info[k] for k in keep if k in info}}
    ctx.write_json("report.json", report)
    _plot_solution(ctx, sol, "two-point solution")
    return report, {"ladder_settled": bool(info.get("ladder_settled", False))}


def task_solve_picard(ctx):
    geom = build_geometry(ctx.problem)
    sec = _section(ctx.problem, "picard")
    kind = sec.get("kind", "sublinear")
    a = _number(sec, "a", "picard", geom.lo if math.isfinite(geom.lo) else None)
    if a is None:
        raise ProblemError("picard.a", "missing required key")
    r_max = _number(sec, "r_max", "picard", positive=True)
    try:
        if kind == "sublinear":
            f = nonlinearity(ctx.problem)
            c = _number(sec, "c", "picard", required=True, positive=True)
            sol = solve_picard_sublinear(geom, f, a, c, ctx.tol, r_max=r_max)
            extra = {"f": to_text(f), "c": c, "c_limit": sol.info.get("c_limit")}
        elif kind == "negative_power":
            b = _expr(sec.get("b"), "picard.b", ctx.params)
            sigma = _number(sec, "sigma", "picard", required=True, positive=True)
            sol = solve_picard_negative_power(geom, b, sigma, a, ctx.tol, r_max=r_max)
            extra = {"b": to_text(b), "sigma": sigma,
                     "ratio_at_rmax": sol.info.get("ratio_at_rmax")}
        else:
            raise ProblemError("picard.kind", "expected 'sublinear' or 'negative_power'", kind)
    except ProblemError:
        raise
    except ValueError as exc:
        raise ProblemError("picard", str(exc), kind) from None
    ctx.write_csv("solution.csv", ["coord", "u", "du"],
                  _solution_rows(sol, sec.get("samples")))
    report = {"geometry": _geometry_summary(geom), "kind": kind, "a": a,
              "r_max": sol.info["r_max"], "iterations": sol.info["iterations"],
              "fixed_point_residual": picard_residual(geom, sol), **extra}
    ctx.write_json("report.json", report)
    _plot_solution(ctx, sol, "Picard fixed point")
    return report, {}


def task_nonexistence(ctx):
    geom = build_geometry(ctx.problem)
    f = nonlinearity(ctx.problem)
    sec = _section(ctx.problem, "nonexistence")
    try:
        cov = build_change_of_variables(geom, _base_point(sec, "nonexistence"))
    except ValueError as exc:
        raise ProblemError("nonexistence.r0", str(exc), sec.get("r0")) from None
    if not (cov.c1 == -math.inf and cov.c2 == math.inf):
        raise ProblemError("geometry", "nonexistence needs (c1, c2) = (-inf, inf)", geom.name)
    s0 = _number(sec, "s0", "nonexistence", 0.0)
    z0 = _number(sec, "u0", "nonexistence", required=True)
    dz0 = _number(sec, "du0", "nonexistence", required=True)
    half = _number(sec, "candidate_halfwidth", "nonexistence", 0.5, positive=True)
    ode_s = transform(reduce(geom, f), cov)
    cand = solve_ivp(ode_s, s0, z0, dz0, (s0 - half, s0 + half), ctx.tol)
    rep = check_nonexistence(geom, cov, f, cand, tol=ctx.tol)
    report = {"geometry": _geometry_summary(geom, cov), "f": to_text(f), **rep.to_dict()}
    ctx.write_json("report.json", report)
    return report, {"horn": rep.horn}


def task_uniqueness(ctx):
    geom = build_geometry(ctx.problem)
    f = nonlinearity(ctx.problem)
    sec = _section(ctx.problem, "uniqueness")
    try:
        cov = build_change_of_variables(geom, _base_point(sec, "uniqueness"))
    except ValueError as exc:
        raise ProblemError("uniqueness.r0", str(exc), sec.get("r0")) from None
    R1, R2 = _pair(sec, "window", "uniqueness", required=True)
    s0 = _number(sec, "s0", "uniqueness", 0.5 * (R1 + R2))
    if not R1 <= s0 <= R2:
        raise ProblemError("uniqueness.s0", "must lie in the window", s0)
    d1 = _pair(sec, "data1", "uniqueness", required=True, ordered=False)
    d2 = _pair(sec, "data2", "uniqueness", d1, ordered=False)
    ode_s = transform(reduce(geom, f), cov)
    pad = 1e-3 * (R2 - R1)
    window = (R1 - pad, R2 + pad)
    if not (cov.c1 < window[0] and window[1] < cov.c2):
        raise ProblemError("uniqueness.window", "must lie inside (c1, c2)", [R1, R2])
    sols = [solve_ivp(ode_s, s0, d[0], d[1], window, ctx.tol) for d in (d1, d2)]
    for sol in sols:
        if sol.window[0] > R1 or sol.window[1] < R2:
            raise SolverError("a solution does not reach the certificate window",
                              window=list(sol.window))
    noise = _number(sec, "noise", "uniqueness", None, positive=True)
    flags = {}
    try:
        cert = uniqueness_contract(sols[0], sols[1], f, cov, R1, R2, max(ctx.tol, 1e-300),
                                   s0=s0 if d1 == d2 else None, noise=noise)
        if d1 != d2:
            raise CertificateError("initial data differ; the contraction walk needs "
                                   "matching data at s0", certificate=cert)
        data = cert.to_dict()
        data["status"] = "certified"
        ok = True
    except CertificateError as exc:
        cert = exc.diagnostics.get("certificate")
        data = cert.to_dict() if cert is not None else {}
        data["status"] = "breach"
        data["reason"] = str(exc)
        ok = False
    eps = abs(d1[0] - d2[0]) + abs(d1[1] - d2[1])
    if cert is not None:
        data["gronwall_envelope"] = cert.gronwall_envelope(eps) if eps else 0.0
    ctx.write_json("certificate.json", data)
    flags["certified"] = ok
    if cert is not None:
        sups = np.array([row[3] for row in cert.interval_sups])
        mids = np.array([0.5 * (row[0] + row[1]) for row in cert.interval_sups])

        def draw(ax):
            order = np.argsort(mids)
            ax.semilogy(mids[order], np.maximum(sups[order], 1e-300), ".-", lw=1)
            ax.set_xlabel("s")
            ax.set_ylabel("interval sup |w| + |w'|")
        ctx.svg("certificate.svg", draw)
    if not ok:
        raise SolverError(data["reason"], certificate=data)
    return {"certificate": data}, flags


def task_verify(ctx):
    geom = build_geometry(ctx.problem)
    f = nonlinearity(ctx.problem)
    sec = _section(ctx.problem, "verify")
    if geom.profile is None:
        raise ProblemError("geometry", "verification needs a surface with a profile curve",
                           geom.name)
    nrs = sec.get("nr", [32, 64, 128])
    if (not isinstance(nrs, list) or not nrs
            or not all(isinstance(n, int) and not isinstance(n, bool) and n >= 4 for n in nrs)):
        raise ProblemError("verify.nr", "expected a list of integers >= 4", nrs)
    r_range = _pair(sec, "r_range", "verify", None)
    if "exact" in sec:
        ue = _expr(sec["exact"], "verify.exact", ctx.params)
        if not ue.free_vars() <= {"r"}:
            raise ProblemError("verify.exact", "must depend on r only", sec["exact"])
        source = lambda r: np.asarray(ue.evaluate(r=np.asarray(r, dtype=float)),
                                      dtype=float) + 0.0 * np.asarray(r, dtype=float)
        origin = "exact"
    else:
        if not geom.fixed_lo:
            raise ProblemError("verify.exact", "missing; a solve from the pole needs a fixed "
                                                "point at the lower end")
        u0 = _number(sec, "u0", "verify", required=True)
        hi = geom.profile.length if math.isfinite(geom.profile.length) else geom.lo + 10.0
        hi = r_range[1] if r_range else hi
        source = solve_from_pole(geom, f, u0, (geom.lo, hi), min(ctx.tol, 1e-10))
        if source.window[1] < hi:
            raise SolverError("pole solve stopped before the mesh range",
                              window=list(source.window))
        origin = "pole_series"
    try:
        ladder = convergence_ladder(geom, source, f, tuple(nrs), r_range)
    except ValueError as exc:
        raise ProblemError("verify.r_range", str(exc), sec.get("r_range")) from None
    fine = ladder["reports"][-1]
    ctx.write_csv("residuals.csv", ["vertex", "r", "theta", "residual"],
                  ((i, r, t, v) for i, (r, t, v) in
                   enumerate(zip(fine["vertex_r"], fine["vertex_theta"], fine["residual"]))))
    mesh = revolution_mesh(geom, nrs[-1], None, r_range)
    lap1 = mesh.laplacian(np.ones(len(mesh.r)))
    report = {"geometry": _geometry_summary(geom), "f": to_text(f), "source": origin,
              "nr": ladder["nr"], "h": ladder["h"], "l2": ladder["l2"], "max": ladder["max"],
              "l2_orders": ladder["l2_orders"], "max_orders": ladder["max_orders"],
              "constant_annihilation": float(np.max(np.abs(lap1))),
              "interior_vertices": fine["interior_vertices"],
              "pole_vertices": fine["pole_vertices"]}
    ctx.write_json("report.json", report)

    def draw(ax):
        ax.loglog(ladder["h"], ladder["l2"], "o-", label="L2")
        ax.loglog(ladder["h"], ladder["max"], "s--", label="max")
        ax.set_xlabel("h")
        ax.set_ylabel("residual")
        ax.legend()
    ctx.svg("convergence.svg", draw)
    return report, {}


RUNNERS = {"reduce": task_reduce, "audit": task_audit, "solve-ivp": task_solve_ivp,
           "solve-bvp": task_solve_bvp, "solve-picard": task_solve_picard,
           "nonexistence": task_nonexistence, "uniqueness": task_uniqueness,
           "verify": task_verify}


# ---------------------------------------------------------------------------


def _inputs_hash(raw: bytes, problem: dict) -> dict:
    effective = {k: v for k, v in problem.items() if not k.startswith("_")}
    return {"file_sha256": hashlib.sha256(raw).hexdigest(),
            "effective_sha256": hashlib.sha256(dumps(effective).encode()).hexdigest()}


def run(task: str | None, problem_path, overrides=(), out=None, tol=None,
        plots: bool = False, seed_free: bool = False, stream=None) -> int:
    """Execute one task; returns the process exit status."""
    stream = sys.stderr if stream is None else stream
    t_start = time.perf_counter()
    out_dir = None
    try:
        problem, raw = load_problem(problem_path, overrides)
        file_task = problem.get("task")
        if task in (None, "run"):
            task = file_task
            if task is None:
                raise ProblemError("task", "missing required key")
        elif file_task is not None and file_task != task:
            problem["task"] = task
        if task not in TASKS:
            raise ProblemError("task", f"expected one of {', '.join(TASKS)}", task)
        problem["task"] = task
        if tol is not None:
            problem["tol"] = float(tol)
        tol_v = tolerance(problem)
        out_dir = Path(out if out is not None else problem.get("output", {}).get("dir", "out"))
        out_dir.mkdir(parents=True, exist_ok=True)
        plots = plots or bool(problem.get("output", {}).get("plots", False))
        ctx = Context(problem, out_dir, tol_v, plots)
    except ProblemError as exc:
        print(f"error: {exc}", file=stream)
        return EXIT_FAILURE

    status = EXIT_OK
    verdicts, flags, error = {}, {}, None
    timings = {}
    with seed_free_guard(seed_free):
        try:
            required = problem.get("require")
            if required is not None:
                if (not isinstance(required, list)
                        or not all(isinstance(c, str) for c in required)):
                    raise ProblemError("require", "expected a list of condition names", required)
                t0 = time.perf_counter()
                geom = build_geometry(problem)
                f = nonlinearity(problem)
                reports = _audit(ctx, geom, f, required)
                timings["require_audit"] = time.perf_counter() - t0
                verdicts = {k: r.verdict for k, r in reports.items()}
                falsified = [k for k, v in verdicts.items() if v == FALSIFIED]
                if falsified:
                    ctx.write_json("audit.json", {k: r.to_dict() for k, r in reports.items()})
                    error = f"required hypotheses falsified: {', '.join(falsified)}"
                    status = EXIT_FALSIFIED
            if status == EXIT_OK:
                t0 = time.perf_counter()
                report, flags = RUNNERS[task](ctx)
                timings["task"] = time.perf_counter() - t0
                verdicts.update(report.get("verdicts", {}))
        except ProblemError as exc:
            error, status = str(exc), EXIT_FAILURE
        except RandomnessRequested as exc:
            error, status = str(exc), EXIT_FAILURE
        except SolverError as exc:
            error, status = f"solver failure: {exc}", EXIT_FAILURE
        except (ValueError, ArithmeticError, ExprError) as exc:
            error, status = f"{type(exc).__name__}: {exc}", EXIT_FAILURE
    timings["total"] = time.perf_counter() - t_start

    manifest = {
        "task": task, "problem": str(problem_path), "overrides": list(overrides or ()),
        "effective_problem": {k: v for k, v in problem.items() if not k.startswith("_")},
        "inputs": _inputs_hash(raw, problem), "tol": tol_v,
        "versions": {"radialred": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "flags": {**flags, "seed_free": seed_free, "plots": plots},
        "verdicts": verdicts, "exit_status": status, "error": error,
        "outputs": sorted(set(ctx.files)), "timings": timings,
    }
    (out_dir / "manifest.json").write_text(dumps(manifest))
    if error:
        print(f"error: {error}", file=stream)
    return status


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="radialred",
                                description="Radial reductions of semilinear elliptic problems.")
    sub = p.add_subparsers(dest="task", required=True)
    for name in ("run",) + TASKS:
        sp = sub.add_parser(name, help=("task named in the problem file" if name == "run"
                                        else f"run the {name} task"))
        sp.add_argument("problem", help="TOML problem file")
        sp.add_argument("--out", help="output directory (default: output.dir or ./out)")
        sp.add_argument("--tol", type=float, help="solver tolerance (overrides tol)")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a problem-file key (dotted path)")
        sp.add_argument("--plots", action="store_true", help="also write SVG plots")
        sp.add_argument("--seed-free", action="store_true",
                        help="fail if any code path requests randomness")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return run(args.task, args.problem, args.overrides, args.out, args.tol,
               args.plots, args.seed_free)


if __name__ == "__main__":
    sys.exit(main())
