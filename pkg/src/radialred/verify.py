"""Closing the loop on computed solutions.

* a contraction certificate reproducing the constants of the uniqueness
  argument (kappa, C, M, delta) and walking intervals of length delta,
* ODE residuals of a numeric solution,
* the radial lift of a solution to a triangulated surface of revolution and
  the residual of a cotangent Laplace-Beltrami operator,
* consistency between solutions computed in ``r`` and in ``s``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import sparse

from .expr import DomainError, Expr, parse
from .geometry import GeometrySpec
from .reduction import ChangeOfVariables, RadialODE
from .solvers import IVP, POLE_SERIES, BVP_SHOOTING, RadialSolution


class CertificateError(RuntimeError):
    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class ContractionCertificate:
    s0: float
    kappa: float
    lipschitz_const: float
    M: float
    delta: float
    intervals_covered: int
    max_deviation: float
    R1: float = 0.0
    R2: float = 0.0
    initial_defect: float = 0.0
    interval_sups: list = field(default_factory=list)
    note: str = "certified on [R1, R2] only"

    def gronwall_envelope(self, eps: float) -> float:
        """``eps * exp((1 + M)(R2 - R1))``."""
        return eps * math.exp((1.0 + self.M) * (self.R2 - self.R1))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["interval_sups"] = [list(map(float, x)) for x in self.interval_sups]
        return d


def lipschitz_on(f: Expr, r_values, kappa: float, n: int = 65) -> float:
    """``sup |df/dy|`` and neighbouring difference quotients over ``r_values x [-kappa, kappa]``.

    The box is symmetric in ``y`` (the difference ``z1 - z2`` of two
    solutions bounded by ``kappa`` can have either sign).
    """
    r = np.asarray(r_values, dtype=float)
    y = np.linspace(-kappa, kappa, n) if kappa > 0 else np.zeros(1)
    R, Y = np.meshgrid(r, y, indexing="ij")
    df = f.diff("y")
    try:
        D = np.abs(np.asarray(df.evaluate(r=R, y=Y), dtype=float)) + 0.0 * R
    except DomainError:
        D = np.full(R.shape, np.nan)
        for idx in np.ndindex(R.shape):
            try:
                D[idx] = abs(df.scalar(r=R[idx], y=Y[idx]))
            except DomainError:
                pass
    C = float(np.nanmax(D)) if np.any(np.isfinite(D)) else 0.0
    if len(y) > 1:
        F = np.asarray(f.evaluate(r=R, y=Y), dtype=float) + 0.0 * R
        C = max(C, float(np.max(np.abs(np.diff(F, axis=1)) / np.diff(y)[None, :])))
    return C


def uniqueness_contract(sol1: RadialSolution, sol2: RadialSolution, f: Expr | str,
                        cov: ChangeOfVariables, R1: float, R2: float, tol: float,
                        s0: float | None = None, noise: float | None = None,
                        samples: int = 4001, params=None) -> ContractionCertificate:
    """Certificate for two solutions of ``z'' + A(r(s))^2 f(r(s), z) = 0`` on ``[R1, R2]``.

    With ``kappa = sup |z_j|``, ``C`` the Lipschitz constant of ``f`` on
    ``[-kappa, kappa]``, ``M = C sup A^2`` and ``delta = 1/(2(1+M))``,
    the difference ``w = z1 - z2`` obeys ``sup(|w| + |w'|) <= 2 (|w| + |w'|)(start)``
    on every interval of length ``delta``.  The walk checks this from
    ``s0`` outward, up to an additive ``noise`` floor (default ``10 tol``).
    """
    if isinstance(f, str):
        f = parse(f, params)
    for sol in (sol1, sol2):
        if sol.coordinate != "s":
            raise ValueError("uniqueness_contract works in s coordinates")
        lo, hi = sol.window
        if lo > R1 + 1e-12 * max(1, abs(R1)) or hi < R2 - 1e-12 * max(1, abs(R2)):
            raise ValueError(f"solution window {sol.window} does not cover [{R1}, {R2}]")
    noise = 10.0 * tol if noise is None else noise
    grid = np.unique(np.concatenate([
        np.linspace(R1, R2, samples),
        sol1.grid[(sol1.grid >= R1) & (sol1.grid <= R2)],
        sol2.grid[(sol2.grid >= R1) & (sol2.grid <= R2)]]))
    z1, z2 = sol1(grid), sol2(grid)
    D = np.abs(z1 - z2) + np.abs(sol1.derivative(grid) - sol2.derivative(grid))
    if s0 is None:
        s0 = float(grid[np.argmin(D)])
    e0 = abs(sol1(s0) - sol2(s0)) + abs(sol1.derivative(s0) - sol2.derivative(s0))
    scale = max(1.0, abs(sol1(s0)), abs(sol1.derivative(s0)))
    kappa = float(max(np.max(np.abs(z1)), np.max(np.abs(z2))))
    r_grid = cov.inverse(np.linspace(R1, R2, 65))
    C = lipschitz_on(f, r_grid, kappa)
    A2 = float(np.max(np.asarray(cov.geometry.A(cov.inverse(grid)), dtype=float) ** 2))
    M = C * A2
    delta = 1.0 / (2.0 * (1.0 + M))

    sups = []
    breaches = []
    count = 0
    for direction in (1.0, -1.0):
        start = s0
        end = R2 if direction > 0 else R1
        while (end - start) * direction > 1e-15 * max(1.0, abs(end)):
            stop = start + direction * delta
            stop = min(stop, end) if direction > 0 else max(stop, end)
            a, b = sorted((start, stop))
            mask = (grid >= a) & (grid <= b)
            w_start = abs(sol1(start) - sol2(start)) + abs(sol1.derivative(start) -
                                                            sol2.derivative(start))
            sup = float(np.max(D[mask])) if np.any(mask) else w_start
            sups.append((a, b, w_start, sup))
            if sup > 2.0 * w_start + noise:
                breaches.append((a, b, w_start, sup))
            count += 1
            start = stop
    cert = ContractionCertificate(float(s0), kappa, C, M, delta, count, float(np.max(D)),
                                  float(R1), float(R2), float(e0), sups)
    if e0 > tol * scale:
        raise CertificateError("solutions do not match at s0", certificate=cert,
                               defect=e0, tol=tol)
    if breaches:
        raise CertificateError("deviation exceeded twice the interval start defect",
                               certificate=cert, breaches=breaches)
    return cert


# ---------------------------------------------------------------------------


def residual_method(sol: RadialSolution) -> str:
    if sol.second is not None and sol.provenance in (IVP, POLE_SERIES, BVP_SHOOTING):
        return "ode_rhs_at_nodes_quintic_hermite"
    return "local_quintic_hermite_fit"


def ode_residual(sol: RadialSolution, ode: RadialODE, grid, details: bool = False):
    """``sup |u'' + (ln A)' u' + f(r, u)|`` (or ``|z'' + A^2 f|`` in ``s``) over ``grid``.

    ``u''`` comes from the solution's interpolant; for integrator output the
    interpolant is quintic Hermite built on the ODE's own nodal ``u''``.
    """
    if sol.coordinate != ode.coordinate:
        raise ValueError("solution and ODE use different coordinates")
    x = np.asarray(grid, dtype=float)
    lo, hi = sol.window
    if np.any(x < lo) or np.any(x > hi):
        raise ValueError("grid leaves the solution window")
    res = ode.residual(x, sol(x), sol.derivative(x), sol.second_derivative(x))
    val = float(np.max(np.abs(res)))
    return (val, residual_method(sol)) if details else val


def coordinate_consistency(sol_r: RadialSolution, sol_s: RadialSolution,
                           cov: ChangeOfVariables, grid) -> tuple[float, float]:
    """``(sup |u(r) - z(J(r))|, sup |u'(r) A(r) - z'(J(r))|)`` over the ``r`` grid."""
    r = np.asarray(grid, dtype=float)
    s = cov.forward(r)
    A = np.asarray(cov.geometry.A(r), dtype=float)
    d0 = float(np.max(np.abs(sol_r(r) - sol_s(s))))
    d1 = float(np.max(np.abs(sol_r.derivative(r) * A - sol_s.derivative(s))))
    return d0, d1


# ---------------------------------------------------------------------------
# Surface meshes


@dataclass
class SurfaceMesh:
    vertices: np.ndarray        # (N, 3)
    faces: np.ndarray           # (F, 3) int
    r: np.ndarray               # (N,)
    theta: np.ndarray           # (N,)
    poles: np.ndarray           # vertex ids of pole fans
    boundary: np.ndarray        # vertex ids on open boundary rings

    @property
    def interior(self) -> np.ndarray:
        """Vertices off the open boundary rings (pole vertices included)."""
        mask = np.ones(len(self.vertices), dtype=bool)
        mask[self.boundary] = False
        return np.flatnonzero(mask)

    def edge_face_counts(self) -> dict:
        counts: dict = {}
        for tri in self.faces:
            for i in range(3):
                e = tuple(sorted((int(tri[i]), int(tri[(i + 1) % 3]))))
                counts[e] = counts.get(e, 0) + 1
        return counts

    def is_manifold(self) -> bool:
        counts = self.edge_face_counts()
        on_boundary = set(map(int, self.boundary))
        for (a, b), c in counts.items():
            if c == 2:
                continue
            if c == 1 and a in on_boundary and b in on_boundary:
                continue
            return False
        return True

    def _corner_cotangents(self):
        V, F = self.vertices, self.faces
        cots = np.empty(F.shape)
        for k in range(3):
            i, j, l = F[:, k], F[:, (k + 1) % 3], F[:, (k + 2) % 3]
            u = V[j] - V[i]
            v = V[l] - V[i]
            cross = np.linalg.norm(np.cross(u, v), axis=1)
            cots[:, k] = np.einsum("ij,ij->i", u, v) / cross
        return cots

    def face_areas(self) -> np.ndarray:
        V, F = self.vertices, self.faces
        return 0.5 * np.linalg.norm(np.cross(V[F[:, 1]] - V[F[:, 0]],
                                             V[F[:, 2]] - V[F[:, 0]]), axis=1)

    def edge_weights(self):
        """Unique edges ``(i, j)`` with cotangent weights ``(cot a + cot b) / 2``."""
        F = self.faces
        cots = self._corner_cotangents()
        # the corner at k is opposite the edge (k+1, k+2)
        i = np.concatenate([F[:, (k + 1) % 3] for k in range(3)])
        j = np.concatenate([F[:, (k + 2) % 3] for k in range(3)])
        w = 0.5 * np.concatenate([cots[:, k] for k in range(3)])
        lo, hi = np.minimum(i, j), np.maximum(i, j)
        keys, inv = np.unique(lo * len(self.vertices) + hi, return_inverse=True)
        wsum = np.zeros(len(keys))
        np.add.at(wsum, inv, w)
        n = len(self.vertices)
        return keys // n, keys % n, wsum

    def stiffness(self) -> sparse.csr_matrix:
        """Cotangent stiffness ``K`` (symmetric, PSD, ``K 1 = 0``)."""
        i, j, w = self.edge_weights()
        n = len(self.vertices)
        K = sparse.coo_matrix((np.concatenate([-w, -w, w, w]),
                               (np.concatenate([i, j, i, j]), np.concatenate([j, i, i, j]))),
                              shape=(n, n))
        return K.tocsr()

    def apply_stiffness(self, u) -> np.ndarray:
        """``K u`` in edge-difference form ``sum_j w_ij (u_i - u_j)``.

        Constants are annihilated exactly, which the assembled matrix only
        achieves up to rounding in its row sums.
        """
        u = np.asarray(u, dtype=float)
        i, j, w = self.edge_weights()
        flux = w * (u[i] - u[j])
        out = np.zeros_like(u)
        np.add.at(out, i, flux)
        np.add.at(out, j, -flux)
        return out

    def mass(self, kind: str = "mixed") -> np.ndarray:
        """Lumped mass per vertex.

        ``"mixed"`` is the Voronoi area of each corner, replaced by a half or
        quarter of the triangle when the triangle is obtuse (Meyer et al.);
        it is consistent at pole fans.  ``"barycentric"`` takes a third of
        each incident triangle and is consistent only at valence-6 vertices
        of a uniformly split grid.
        """
        V, F = self.vertices, self.faces
        area = self.face_areas()
        m = np.zeros(len(V))
        if kind == "barycentric":
            for k in range(3):
                np.add.at(m, F[:, k], area / 3.0)
            return m
        if kind != "mixed":
            raise ValueError(f"unknown mass kind {kind!r}")
        cots = self._corner_cotangents()
        obtuse = np.min(cots, axis=1) < 0
        for k in range(3):
            i, j, l = F[:, k], F[:, (k + 1) % 3], F[:, (k + 2) % 3]
            eij = np.sum((V[j] - V[i]) ** 2, axis=1)
            eil = np.sum((V[l] - V[i]) ** 2, axis=1)
            voronoi = (eij * cots[:, (k + 2) % 3] + eil * cots[:, (k + 1) % 3]) / 8.0
            fallback = np.where(cots[:, k] < 0, area / 2.0, area / 4.0)
            np.add.at(m, i, np.where(obtuse, fallback, voronoi))
        return m

    def laplacian(self, u, mass: str = "mixed") -> np.ndarray:
        """Discrete Laplace-Beltrami ``-M^{-1} K u``."""
        return -self.apply_stiffness(u) / self.mass(mass)


def revolution_mesh(geom: GeometrySpec, nr: int, ntheta: int | None = None,
                    r_range: tuple[float, float] | None = None) -> SurfaceMesh:
    """Structured ``nr x ntheta`` triangulation of a surface of revolution.

    Rings sit at equally spaced arclength ``r``; an end where the profile
    radius vanishes becomes a single pole vertex joined by a triangle fan.
    Every quad is split along the same diagonal so interior vertices have
    valence 6, the stencil on which barycentric mass is also consistent.
    """
    prof = geom.profile
    if prof is None:
        raise ValueError(f"{geom.name} has no profile curve to mesh")
    ntheta = 2 * nr if ntheta is None else ntheta
    lo, hi = r_range if r_range is not None else (geom.lo, geom.hi)
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise ValueError("mesh range must be finite")
    r_rings = np.linspace(lo, hi, nr + 1)
    Rr, Zr = (np.asarray(x, dtype=float) for x in prof.point(r_rings))
    tiny = 1e-12 * max(1.0, float(np.max(np.abs(Rr))))
    pole_lo, pole_hi = abs(Rr[0]) <= tiny, abs(Rr[-1]) <= tiny
    theta = 2.0 * np.pi * np.arange(ntheta) / ntheta
    verts, rr, th = [], [], []
    ring_ids = []
    poles, boundary = [], []
    for i, (r, R, Z) in enumerate(zip(r_rings, Rr, Zr)):
        if (i == 0 and pole_lo) or (i == nr and pole_hi):
            ring_ids.append([len(verts)])
            poles.append(len(verts))
            verts.append((0.0, 0.0, Z))
            rr.append(r)
            th.append(0.0)
            continue
        start = len(verts)
        for t in theta:
            verts.append((R * math.cos(t), R * math.sin(t), Z))
            rr.append(r)
            th.append(t)
        ids = list(range(start, start + ntheta))
        ring_ids.append(ids)
        if i in (0, nr):
            boundary += ids
    faces = []
    for i in range(nr):
        a, b = ring_ids[i], ring_ids[i + 1]
        for j in range(ntheta):
            jn = (j + 1) % ntheta
            if len(a) == 1:
                faces.append((a[0], b[j], b[jn]))
            elif len(b) == 1:
                faces.append((a[j], b[0], a[jn]))
            else:
                faces += [(a[j], b[j], b[jn]), (a[j], b[jn], a[jn])]
    return SurfaceMesh(np.array(verts, dtype=float), np.array(faces, dtype=int),
                       np.array(rr), np.array(th), np.array(poles, dtype=int),
                       np.array(boundary, dtype=int))


def lift_and_residual(geom: GeometrySpec, sol, nr: int, ntheta: int | None, f: Expr | str,
                      r_range=None, params=None) -> dict:
    """Lift ``u`` radially to a mesh and evaluate ``Delta_h u + f(r, u)``.

    ``sol`` is a :class:`RadialSolution` in ``r`` or any callable of ``r``.
    Norms are taken over all vertices except those on open boundary rings;
    the L2 norm is weighted by the lumped (mixed Voronoi) mass.
    """
    if isinstance(f, str):
        f = parse(f, params)
    mesh = revolution_mesh(geom, nr, ntheta, r_range)
    if isinstance(sol, RadialSolution):
        if sol.coordinate != "r":
            raise ValueError("lift needs a solution in the r coordinate")
        lo, hi = sol.window
        if mesh.r.min() < lo - 1e-12 or mesh.r.max() > hi + 1e-12:
            raise ValueError(f"mesh range [{mesh.r.min()}, {mesh.r.max()}] exceeds "
                             f"the solution window {sol.window}")
    u = np.asarray(sol(mesh.r), dtype=float)
    lap = mesh.laplacian(u)
    fu = np.asarray(f.evaluate(r=mesh.r, y=u), dtype=float) + 0.0 * u
    res = lap + fu
    inner = mesh.interior
    m = mesh.mass()
    return {"nr": nr, "ntheta": int(ntheta or 2 * nr),
            "h": float((mesh.r.max() - mesh.r.min()) / nr),
            "max": float(np.max(np.abs(res[inner]))) if len(inner) else 0.0,
            "l2": float(np.sqrt(np.sum(m[inner] * res[inner] ** 2))),
            "pole_vertices": mesh.poles.tolist(), "interior_vertices": int(len(inner)),
            "vertex_r": mesh.r, "vertex_theta": mesh.theta, "residual": res,
            "values": u, "mesh": mesh}


def convergence_ladder(geom: GeometrySpec, sol, f, nrs=(32, 64, 128), r_range=None,
                       params=None) -> dict:
    """Residual norms over a refinement ladder and the empirical orders."""
    reports = [lift_and_residual(geom, sol, n, None, f, r_range, params) for n in nrs]
    l2 = [rep["l2"] for rep in reports]
    mx = [rep["max"] for rep in reports]
    hs = [rep["h"] for rep in reports]
    def orders(v):
        return [math.log(a / b) / math.log(h0 / h1) if a > 0 and b > 0 else math.inf
                for a, b, h0, h1 in zip(v, v[1:], hs, hs[1:])]
    return {"nr": list(nrs), "h": hs, "l2": l2, "max": mx, "l2_orders": orders(l2),
            "max_orders": orders(mx), "reports": reports}
