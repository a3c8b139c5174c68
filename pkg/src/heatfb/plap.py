"""p-harmonic Dirichlet solves, Dirichlet energies and boundary fluxes.

Discretisation
--------------
Unknowns live on the active nodes (inside the domain and in U). Each active
node has four edges. An edge to another active node has length ``h``; an
edge that leaves the active set is cut at the boundary crossing, at fraction
``theta`` of ``h``, where the Dirichlet value is imposed (the boundary datum on
the outer boundary, zero on the free boundary). With edge differences
``g = du / (theta h)`` and weights ``w = theta`` the quadratic energy
``h^2 sum w g^2 / 2`` yields the symmetric cut-cell five-point Laplacian
(Gibou et al. 2002), which is second order accurate on curved boundaries.

For p != 2 the lattice squares are clipped at the same crossings and
fan-triangulated; the energy ``sum_T |T| (1/p) (|grad u_T|^2 + eta^2)^(p/2)``
over linear elements is convex and exact for linear functions, so
lagged-coefficient (Picard) steps and Newton steps with a backtracking line
search both decrease it monotonically.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import ndimage

from .mesh import Grid
from .phase import Phase

log = logging.getLogger(__name__)

TOL_NEG = 1e-10
THETA_MIN = 1e-3

# +x, -x, +y, -y
DIRS = ((1, 0), (-1, 0), (0, 1), (0, -1))


class SolverError(RuntimeError):
    def __init__(self, msg, residual=float("nan")):
        super().__init__(f"{msg} (last residual {residual:.3e})")
        self.residual = residual


# --------------------------------------------------------------------------
# boundary data


class ConstantProfile:
    def __init__(self, value: float):
        self.value = float(value)

    def __call__(self, pts):
        return np.full(np.shape(pts)[:-1], self.value)


class FourierProfile:
    """a0 + a1 cos(theta), theta the polar angle about the origin."""

    def __init__(self, a0: float, a1: float = 0.0):
        self.a0, self.a1 = float(a0), float(a1)

    def __call__(self, pts):
        pts = np.asarray(pts, dtype=float)
        return self.a0 + self.a1 * np.cos(np.arctan2(pts[..., 1], pts[..., 0]))


class SampledProfile:
    """Values at the grid's boundary samples, interpolated in arc length."""

    def __init__(self, grid: Grid, values):
        self.grid = grid
        self.values = np.asarray(values, dtype=float)

    def __call__(self, pts):
        pts = np.asarray(pts, dtype=float)
        proj = self.grid.shape.project(pts)[0] if pts.size else pts
        return self.grid.interp_periodic(self.grid.shape.arclength(proj), self.values)


@dataclass(frozen=True)
class BoundaryData:
    profiles: tuple

    @classmethod
    def constant(cls, values):
        return cls(tuple(ConstantProfile(v) for v in np.atleast_1d(values)))

    @classmethod
    def fourier(cls, coeffs):
        return cls(tuple(FourierProfile(*c) for c in coeffs))

    @classmethod
    def from_samples(cls, grid: Grid, values):
        values = np.atleast_2d(values)
        return cls(tuple(SampledProfile(grid, v) for v in values))

    @property
    def m(self) -> int:
        return len(self.profiles)

    def __call__(self, pts) -> np.ndarray:
        return np.stack([f(pts) for f in self.profiles])

    def on_boundary(self, grid: Grid) -> np.ndarray:
        return self(grid.boundary_points)

    def c0(self, grid: Grid) -> float:
        return float(self.on_boundary(grid).min())

    def C0(self, grid: Grid) -> float:
        return float(np.linalg.norm(self.on_boundary(grid), axis=0).max())

    def ratios(self, grid: Grid, rtol: float = 1e-13):
        """Factors c with phi_i = c_i phi_1 on the boundary, or None."""
        b = self.on_boundary(grid)
        c = b[:, 0] / b[0, 0]
        if np.all(np.abs(b - c[:, None] * b[0]) <= rtol * np.abs(b)):
            return c
        return None

    def check_positive(self, grid: Grid):
        if not self.c0(grid) > 0:
            raise ValueError("boundary data must be strictly positive")

    def tangential_derivative(self, pts, normals, delta=1e-5) -> np.ndarray:
        tau = np.stack([-normals[:, 1], normals[:, 0]], axis=1)
        return (self(pts + delta * tau) - self(pts - delta * tau)) / (2 * delta)


# --------------------------------------------------------------------------
# solver configuration and results


@dataclass(frozen=True)
class SolverConfig:
    p: float = 2.0
    tol: float = 1e-8
    max_iter: int = 200
    eta: float | None = None  # default 1e-6 / h
    relax: float = 0.7
    newton_switch: float = 1e-3
    linear_solver: str = "direct"  # or "cg"
    cg_rtol: float = 1e-10

    def __post_init__(self):
        if not self.p > 1:
            raise ValueError("p must exceed 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.eta is not None and self.eta < 0:
            raise ValueError("eta must be nonnegative")
        if self.eta == 0 and self.p != 2:
            raise ValueError("eta = 0 is only allowed for p = 2")
        if not 0 < self.relax <= 1:
            raise ValueError("relax must lie in (0, 1]")
        if self.linear_solver not in ("direct", "cg"):
            raise ValueError(f"unknown linear solver {self.linear_solver!r}")

    def eta_for(self, grid: Grid) -> float:
        return 1e-6 / grid.h if self.eta is None else self.eta


@dataclass
class SolveStats:
    iterations: int = 0
    residual: float = 0.0
    energy_trace: list = field(default_factory=list)
    raw_energy: float = 0.0
    newton_steps: int = 0


@dataclass(eq=False)
class Field:
    """m temperature components over the grid nodes (zero off the support)."""

    values: np.ndarray  # (m, ny, nx)
    phase: Phase
    bdata: BoundaryData
    p: float = 2.0
    stats: list = field(default_factory=list)

    @property
    def m(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, i):
        return self.values[i]


@dataclass
class FluxTrace:
    location: str  # "outer" or "free"
    points: np.ndarray  # (K, 2)
    normals: np.ndarray  # (K, 2)
    ds: np.ndarray  # (K,)
    values: np.ndarray  # (m, K) A_nu u^i
    dnu: np.ndarray  # (m, K) plain normal derivatives
    dropped: int = 0
    clamped: int = 0
    u_node: np.ndarray | None = None  # free boundary: flat id of the U node
    e_node: np.ndarray | None = None  # free boundary: flat id of the E node

    @property
    def n(self) -> int:
        return self.points.shape[0]


# --------------------------------------------------------------------------
# discretisation


class Discretization:
    """Active-node numbering, edge operators and the p = 2 system for a phase."""

    def __init__(self, grid: Grid, phase: Phase):
        self.grid = grid
        self.phase = phase
        active = grid.inside_mask & phase.chi
        if not active.any():
            raise SolverError("empty active set")
        self.active = active
        flat = active.ravel()
        self.nodes = np.flatnonzero(flat)
        self.n = self.nodes.size
        ids = np.full(grid.n_nodes, -1, dtype=np.int64)
        ids[self.nodes] = np.arange(self.n)
        self.ids = ids
        self._build_edges()

    def _build_edges(self):
        g = self.grid
        nx = g.nx
        jj, ii = np.divmod(self.nodes, nx)
        pts = g.points
        inside = g.inside_mask.ravel()
        level = None if self.phase.level is None else self.phase.level.ravel()

        # per direction: neighbour status for every active node
        a_list, b_list, axis_list = [], [], []
        cut_a, cut_dir, cut_theta, cut_pt, cut_outer, cut_nb = [], [], [], [], [], []
        self.edge_of = np.full((self.n, 4), -1, dtype=np.int64)
        for d, (di, dj) in enumerate(DIRS):
            nb = (jj + dj) * nx + (ii + di)
            nb_id = self.ids[nb]
            is_act = nb_id >= 0
            if d in (0, 2):  # interior edges stored once, along +x / +y
                sel = np.flatnonzero(is_act)
                a_list.append(sel)
                b_list.append(nb_id[sel])
                axis_list.append(np.full(sel.size, d // 2))
            sel = np.flatnonzero(~is_act)
            if sel.size == 0:
                continue
            src = self.nodes[sel]
            dst = nb[sel]
            outer = ~inside[dst]
            theta = np.full(sel.size, 0.5)
            if outer.any():
                theta[outer] = g.shape.crossing(pts[src[outer]], pts[dst[outer]])
            inner = ~outer
            if level is not None and inner.any():
                la, lb = level[src[inner]], level[dst[inner]]
                with np.errstate(divide="ignore", invalid="ignore"):
                    th = la / (la - lb)
                theta[inner] = np.where(np.isfinite(th) & (la > 0) & (lb <= 0), th, 0.5)
            theta = np.clip(theta, THETA_MIN, 1.0)
            step = np.array([di, dj], dtype=float) * g.h
            cut_a.append(sel)
            cut_dir.append(np.full(sel.size, d))
            cut_theta.append(theta)
            cut_pt.append(pts[src] + theta[:, None] * step)
            cut_outer.append(outer)
            cut_nb.append(dst)

        ia = np.concatenate(a_list)
        ib = np.concatenate(b_list)
        iaxis = np.concatenate(axis_list)
        self.int_a, self.int_b, self.int_axis = ia, ib, iaxis
        self.cut_a = np.concatenate(cut_a) if cut_a else np.zeros(0, np.int64)
        self.cut_dir = np.concatenate(cut_dir) if cut_dir else np.zeros(0, np.int64)
        self.cut_theta = np.concatenate(cut_theta) if cut_theta else np.zeros(0)
        self.cut_pt = np.concatenate(cut_pt) if cut_pt else np.zeros((0, 2))
        self.cut_outer = np.concatenate(cut_outer) if cut_outer else np.zeros(0, bool)
        self.cut_nb = np.concatenate(cut_nb) if cut_nb else np.zeros(0, np.int64)

        n_int, n_cut = ia.size, self.cut_a.size
        self.n_edges = n_int + n_cut
        # incidence: which edge sits in each direction of each node
        eid_int = np.arange(n_int)
        for d in range(4):
            m = iaxis == d // 2
            if d in (0, 2):
                self.edge_of[ia[m], d] = eid_int[m]
            else:
                self.edge_of[ib[m], d] = eid_int[m]
        self.edge_of[self.cut_a, self.cut_dir] = n_int + np.arange(n_cut)

        # g = G u + g0, oriented along +axis
        h = g.h
        sign = np.where(np.isin(self.cut_dir, (0, 2)), 1.0, -1.0)
        rows = np.concatenate([eid_int, eid_int, n_int + np.arange(n_cut)])
        cols = np.concatenate([ia, ib, self.cut_a])
        vals = np.concatenate(
            [np.full(n_int, -1.0 / h), np.full(n_int, 1.0 / h), -sign / (self.cut_theta * h)]
        )
        self.G = sp.csr_matrix((vals, (rows, cols)), shape=(self.n_edges, self.n))
        self.cut_sign = sign
        self.w = np.concatenate([np.ones(n_int), self.cut_theta])
        self.edge_axis = np.concatenate([iaxis, np.isin(self.cut_dir, (2, 3)).astype(int)])

        # p = 2 system: A u = b, in units where an interior edge contributes 1
        diag = np.bincount(ia, minlength=self.n) + np.bincount(ib, minlength=self.n)
        diag = diag.astype(float) + np.bincount(
            self.cut_a, weights=1.0 / self.cut_theta, minlength=self.n
        )
        A = sp.coo_matrix(
            (
                np.concatenate([diag, -np.ones(2 * n_int)]),
                (
                    np.concatenate([np.arange(self.n), ia, ib]),
                    np.concatenate([np.arange(self.n), ib, ia]),
                ),
            ),
            shape=(self.n, self.n),
        )
        self.A = A.tocsc()

    # -- boundary values on cut edges
    def cut_values(self, bdata: BoundaryData | None) -> np.ndarray:
        """(m, n_cut) Dirichlet values at the crossings (zero on the free boundary)."""
        m = 1 if bdata is None else bdata.m
        vals = np.zeros((m, self.cut_a.size))
        if bdata is not None and self.cut_outer.any():
            vals[:, self.cut_outer] = bdata(self.cut_pt[self.cut_outer])
        return vals

    def rhs(self, cut_vals: np.ndarray) -> np.ndarray:
        """p = 2 right-hand sides, (m, n)."""
        w = cut_vals / self.cut_theta
        return np.stack([np.bincount(self.cut_a, weights=row, minlength=self.n) for row in w])

    def g0(self, cut_vals: np.ndarray) -> np.ndarray:
        """(m, n_edges) constant part of the edge differences."""
        n_int = self.int_a.size
        out = np.zeros((cut_vals.shape[0], self.n_edges))
        out[:, n_int:] = self.cut_sign * cut_vals / (self.cut_theta * self.grid.h)
        return out

    def scatter(self, vec: np.ndarray) -> np.ndarray:
        full = np.zeros(self.grid.n_nodes)
        full[self.nodes] = vec
        return full.reshape(self.grid.ny, self.grid.nx)

    def gather(self, arr: np.ndarray) -> np.ndarray:
        return np.asarray(arr).ravel()[self.nodes]

    # -- p != 2: P1 elements on the cut-cell triangulation
    def _build_fem(self):
        """Clip every lattice square to the active side and fan-triangulate.

        Polygon vertices are active corners and the crossings on the square's
        edges, so neighbouring squares share vertices and the mesh conforms.
        """
        g = self.grid
        nx, ny, n = g.nx, g.ny, self.n
        # crossing index per lattice edge, keyed by its lower/left node
        cross = np.full((2, g.n_nodes), -1, dtype=np.int64)
        own = self.nodes[self.cut_a]
        lower = np.where(np.isin(self.cut_dir, (0, 2)), own, self.cut_nb)
        cross[np.isin(self.cut_dir, (2, 3)).astype(int), lower] = np.arange(self.cut_a.size)

        jj, ii = np.mgrid[0 : ny - 1, 0 : nx - 1]
        f = (jj * nx + ii).ravel()
        corners = np.stack([f, f + 1, f + nx + 1, f + nx], axis=1)
        edges = np.stack(
            [cross[0, f], cross[1, f + 1], cross[0, f + nx], cross[1, f]], axis=1
        )
        vid = np.where(edges >= 0, n + edges, -1)
        cid = self.ids[corners]
        act = cid >= 0
        pattern = act @ (1 << np.arange(4))
        tris = []
        for pat in range(1, 16):
            sel = np.flatnonzero(pattern == pat)
            if sel.size == 0:
                continue
            on = [(pat >> k) & 1 for k in range(4)]
            if pat in (5, 10):
                polys = [[("c", k), ("e", k), ("e", (k - 1) % 4)] for k in range(4) if on[k]]
            else:
                poly = []
                for k in range(4):
                    if on[k]:
                        poly.append(("c", k))
                    if on[k] != on[(k + 1) % 4]:
                        poly.append(("e", k))
                polys = [[poly[0], poly[i], poly[i + 1]] for i in range(1, len(poly) - 1)]
            for tri in polys:
                tris.append(
                    np.stack([cid[sel, k] if t == "c" else vid[sel, k] for t, k in tri], axis=1)
                )
        tri = np.concatenate(tris)
        if (tri < 0).any():
            raise SolverError("inconsistent cut-cell triangulation")
        coords = np.concatenate([g.points[self.nodes], self.cut_pt])[tri]  # (T, 3, 2)
        M = np.stack([coords[:, 1] - coords[:, 0], coords[:, 2] - coords[:, 0]], axis=1)
        det = M[:, 0, 0] * M[:, 1, 1] - M[:, 0, 1] * M[:, 1, 0]
        keep = np.abs(det) > 1e-12 * g.h**2
        tri, M, det = tri[keep], M[keep], det[keep]
        Minv = np.linalg.inv(M)  # grad = Minv @ (u1 - u0, u2 - u0)
        coef = np.stack([-Minv.sum(axis=2), Minv[:, :, 0], Minv[:, :, 1]], axis=2)  # (T, 2, 3)
        nt = tri.shape[0]
        rows = np.repeat(np.arange(nt), 3)
        cols = tri.ravel()
        unk = cols < n
        ops = []
        for ax in (0, 1):
            v = coef[:, ax, :].ravel()
            ops.append(sp.csr_matrix((v[unk], (rows[unk], cols[unk])), shape=(nt, n)))
            ops.append(
                sp.csr_matrix((v[~unk], (rows[~unk], cols[~unk] - n)), shape=(nt, self.cut_a.size))
            )
        self.Gx, self.Kx, self.Gy, self.Ky = ops
        self.tri = tri
        self.tri_area = 0.5 * np.abs(det)
        # element-by-element Hessian assembly pattern (unknown-unknown pairs)
        self._coef = coef
        r = np.broadcast_to(tri[:, :, None], (nt, 3, 3)).ravel()
        c = np.broadcast_to(tri[:, None, :], (nt, 3, 3)).ravel()
        self._hsel = np.flatnonzero((r < n) & (c < n))
        self._hr, self._hc = r[self._hsel], c[self._hsel]

    def fem_data(self, cut_vals_1: np.ndarray):
        """Constant parts of the element gradients for one component."""
        if not hasattr(self, "Gx"):
            self._build_fem()
        return self.Kx @ cut_vals_1, self.Ky @ cut_vals_1

    def p_energy(self, u, gx0, gy0, p, eta):
        gx = self.Gx @ u + gx0
        gy = self.Gy @ u + gy0
        s = gx * gx + gy * gy + eta * eta
        return float(np.sum(self.tri_area * s ** (p / 2) / p))

    def p_derivs(self, u, gx0, gy0, p, eta, hessian="newton"):
        gx = self.Gx @ u + gx0
        gy = self.Gy @ u + gy0
        s = gx * gx + gy * gy + eta * eta
        k = s ** ((p - 2) / 2)
        c = self.tri_area
        grad = self.Gx.T @ (c * k * gx) + self.Gy.T @ (c * k * gy)
        energy = float(np.sum(c * s ** (p / 2) / p))
        if hessian == "picard":
            a11 = a22 = c * k
            a12 = np.zeros_like(k)
        else:
            k2 = (p - 2) * s ** ((p - 4) / 2)
            a11 = c * (k + k2 * gx * gx)
            a12 = c * k2 * gx * gy
            a22 = c * (k + k2 * gy * gy)
        bx, by = self._coef[:, 0, :], self._coef[:, 1, :]  # (T, 3)
        loc = (
            a11[:, None, None] * bx[:, :, None] * bx[:, None, :]
            + a12[:, None, None] * (bx[:, :, None] * by[:, None, :] + by[:, :, None] * bx[:, None, :])
            + a22[:, None, None] * by[:, :, None] * by[:, None, :]
        )
        M = sp.csc_matrix((loc.ravel()[self._hsel], (self._hr, self._hc)), shape=(self.n, self.n))
        return energy, grad, M


def _linsolve(A, b, cfg: SolverConfig, x0=None, atol=0.0):
    if cfg.linear_solver == "direct":
        return spla.spsolve(A, b)
    d = A.diagonal()
    pre = spla.LinearOperator(A.shape, matvec=lambda v: v / d)
    rtol = 0.0 if atol > 0 else cfg.cg_rtol
    x, info = spla.cg(A, b, x0=x0, rtol=rtol, atol=atol, M=pre, maxiter=20 * A.shape[0])
    if info != 0:
        raise SolverError("conjugate gradients did not converge", float(np.linalg.norm(b - A @ x)))
    return x


# --------------------------------------------------------------------------
# solves


def solve_linear(disc: Discretization, cut_vals: np.ndarray, cfg: SolverConfig | None = None):
    """p = 2 solve for every row of ``cut_vals``; returns (m, n) unknown values."""
    cfg = cfg or SolverConfig()
    b = disc.rhs(cut_vals)
    if cfg.linear_solver == "direct":
        lu = spla.splu(disc.A)
        u = np.stack([lu.solve(bi) for bi in b])
    else:
        # absolute target: the residual check is max|b - A u| / h^2 <= tol
        atol = 0.5 * cfg.tol * disc.grid.h**2
        u = np.stack([_linsolve(disc.A, bi, cfg, atol=atol) for bi in b])
    return u


def _p_solve(disc: Discretization, cut_vals_1: np.ndarray, cfg: SolverConfig, u0=None):
    """Nonlinear solve for one component. Returns (u, stats)."""
    p = cfg.p
    eta = cfg.eta_for(disc.grid)
    h2 = disc.grid.h**2
    g0, t0 = disc.fem_data(cut_vals_1)
    if u0 is None:
        u0 = solve_linear(disc, cut_vals_1[None], SolverConfig(linear_solver=cfg.linear_solver))[0]
    u = np.array(u0, dtype=float)
    stats = SolveStats()
    mode = "picard"
    energy, grad, M = disc.p_derivs(u, g0, t0, p, eta, hessian=mode)
    stats.energy_trace.append(energy)
    for it in range(cfg.max_iter):
        res = float(np.abs(grad).max()) / h2
        stats.residual = res
        if res <= cfg.tol:
            break
        d = -_linsolve(M, grad, cfg)
        slope = float(grad @ d)
        if slope >= 0:  # not a descent direction; fall back to a Picard step
            _, _, Mp = disc.p_derivs(u, g0, t0, p, eta, hessian="picard")
            d = -_linsolve(Mp, grad, cfg)
            slope = float(grad @ d)
        alpha = cfg.relax if mode == "picard" else 1.0
        while True:
            e_try = disc.p_energy(u + alpha * d, g0, t0, p, eta)
            if e_try <= energy + 1e-4 * alpha * slope:
                break
            if alpha < 1e-10:
                break
            alpha *= 0.5
        if e_try > energy + 1e-12 * abs(energy):
            # round-off floor: only accept if the gradient shrinks
            e2, g2, _ = disc.p_derivs(u + alpha * d, g0, t0, p, eta, hessian=mode)
            if np.abs(g2).max() >= np.abs(grad).max():
                raise SolverError("energy line search failed", res)
            raise SolverError("energy increased beyond 1e-12 relative", res)
        u = u + alpha * d
        step = alpha * float(np.abs(d).max())
        if mode == "picard" and step < cfg.newton_switch:
            mode = "newton"
        if mode == "newton":
            stats.newton_steps += 1
        energy, grad, M = disc.p_derivs(u, g0, t0, p, eta, hessian=mode)
        if energy > stats.energy_trace[-1] + 1e-12 * abs(stats.energy_trace[-1]):
            raise SolverError("energy increased beyond 1e-12 relative", res)
        stats.energy_trace.append(energy)
        stats.iterations = it + 1
    else:
        res = float(np.abs(grad).max()) / h2
        if res > cfg.tol:
            raise SolverError(f"no convergence in {cfg.max_iter} iterations", res)
    stats.residual = float(np.abs(grad).max()) / h2
    stats.raw_energy = disc.p_energy(u, g0, t0, p, 0.0)
    return u, stats


def linear_residual(disc: Discretization, u: np.ndarray, cut_vals_1: np.ndarray) -> float:
    """max |b - A u| / h^2 (five-point Laplacian residual)."""
    b = disc.rhs(cut_vals_1[None])[0]
    return float(np.abs(b - disc.A @ u).max()) / disc.grid.h**2


def solve_component(grid: Grid, active: Phase, bdata, cfg: SolverConfig, u0=None,
                    disc: Discretization | None = None):
    """Solve one p-harmonic component with Dirichlet data on the support.

    ``bdata`` is a single-component BoundaryData (or a profile callable).
    Returns the node field (ny, nx), zero off the support, and solver stats.
    """
    if not isinstance(bdata, BoundaryData):
        bdata = BoundaryData((bdata,))
    if bdata.m != 1:
        raise ValueError("solve_component takes single-component data")
    disc = disc or Discretization(grid, active)
    cv = disc.cut_values(bdata)[0]
    if cfg.p == 2:
        u = solve_linear(disc, cv[None], cfg)[0]
        stats = SolveStats(iterations=1, residual=linear_residual(disc, u, cv))
        g0 = disc.g0(cv[None])[0]
        gg = disc.G @ u + g0
        stats.raw_energy = grid.h**2 * float(np.sum(0.5 * disc.w * gg * gg / 2))
        stats.energy_trace = [stats.raw_energy]
        if stats.residual > max(cfg.tol, 1e3 * np.finfo(float).eps / grid.h**2):
            raise SolverError("linear solve residual above tolerance", stats.residual)
    else:
        u0v = None if u0 is None else disc.gather(u0)
        u, stats = _p_solve(disc, cv, cfg, u0=u0v)
    return disc.scatter(u), stats


# --------------------------------------------------------------------------
# energies


def _node_diff_ops(grid: Grid, mask: np.ndarray):
    """Sparse node-gradient operators over ``mask`` (central where possible)."""
    nx, ny = grid.nx, grid.ny
    flat = mask.ravel()
    nodes = np.flatnonzero(flat)
    jj, ii = np.divmod(nodes, nx)
    ops = []
    for di, dj in ((1, 0), (0, 1)):
        ip, jp = ii + di, jj + dj
        im, jm = ii - di, jj - dj
        okp = (ip < nx) & (jp < ny)
        okm = (im >= 0) & (jm >= 0)
        fp = np.where(okp, jp * nx + ip, 0)
        fm = np.where(okm, jm * nx + im, 0)
        hp = okp & flat[fp]
        hm = okm & flat[fm]
        rows, cols, vals = [], [], []
        k = np.arange(nodes.size)
        both = hp & hm
        rows += [k[both], k[both]]
        cols += [fp[both], fm[both]]
        vals += [np.full(both.sum(), 0.5 / grid.h), np.full(both.sum(), -0.5 / grid.h)]
        onlyp = hp & ~hm
        rows += [k[onlyp], k[onlyp]]
        cols += [fp[onlyp], nodes[onlyp]]
        vals += [np.full(onlyp.sum(), 1 / grid.h), np.full(onlyp.sum(), -1 / grid.h)]
        onlym = hm & ~hp
        rows += [k[onlym], k[onlym]]
        cols += [nodes[onlym], fm[onlym]]
        vals += [np.full(onlym.sum(), 1 / grid.h), np.full(onlym.sum(), -1 / grid.h)]
        ops.append(
            sp.csr_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(nodes.size, grid.n_nodes),
            )
        )
    return ops


def dirichlet_energy(u: np.ndarray, grid: Grid, p: float, mask=None) -> float:
    """sum over cells of |grad u|^p h^2 with centred node gradients."""
    mask = grid.inside_mask if mask is None else mask
    Dx, Dy = _node_diff_ops(grid, mask)
    v = np.asarray(u, dtype=float).ravel()
    s = (Dx @ v) ** 2 + (Dy @ v) ** 2
    return float(np.sum(s ** (p / 2))) * grid.cell_area


def dirichlet_energy_grad(u: np.ndarray, grid: Grid, p: float, mask=None) -> np.ndarray:
    mask = grid.inside_mask if mask is None else mask
    Dx, Dy = _node_diff_ops(grid, mask)
    v = np.asarray(u, dtype=float).ravel()
    gx, gy = Dx @ v, Dy @ v
    s = gx * gx + gy * gy
    with np.errstate(divide="ignore", invalid="ignore"):
        k = np.where(s > 0, p * s ** ((p - 2) / 2), 0.0) if p < 2 else p * s ** ((p - 2) / 2)
    grad = Dx.T @ (k * gx) + Dy.T @ (k * gy)
    return (grad * grid.cell_area).reshape(grid.ny, grid.nx)


# --------------------------------------------------------------------------
# fluxes


def interp_rows(grid: Grid, pts: np.ndarray, allowed: np.ndarray):
    """Bilinear interpolation rows (K x n_nodes) and a validity flag per point."""
    ox, oy = grid.origin
    fx = (pts[:, 0] - ox) / grid.h
    fy = (pts[:, 1] - oy) / grid.h
    i = np.floor(fx).astype(np.int64)
    j = np.floor(fy).astype(np.int64)
    tx, ty = fx - i, fy - j
    ok = (i >= 0) & (j >= 0) & (i + 1 < grid.nx) & (j + 1 < grid.ny)
    i = np.where(ok, i, 0)
    j = np.where(ok, j, 0)
    allowed = allowed.ravel()
    corners = []
    for di, dj, wt in (
        (0, 0, (1 - tx) * (1 - ty)),
        (1, 0, tx * (1 - ty)),
        (0, 1, (1 - tx) * ty),
        (1, 1, tx * ty),
    ):
        f = (j + dj) * grid.nx + (i + di)
        ok &= allowed[f] | (wt < 1e-14)
        corners.append((f, wt))
    K = pts.shape[0]
    rows = np.concatenate([np.arange(K)] * 4)
    cols = np.concatenate([c[0] for c in corners])
    vals = np.concatenate([c[1] for c in corners])
    return sp.csr_matrix((vals, (rows, cols)), shape=(K, grid.n_nodes)), ok


class OuterFluxOperator:
    """Normal derivative on the outer boundary as an affine map of node values.

    d_nu u(x_b) = (3 phi(x_b) - 4 u(x_b - s nu) + u(x_b - 2 s nu)) / (2 s).
    """

    def __init__(self, grid: Grid, active: np.ndarray, step: float | None = None):
        s = 2 * grid.h if step is None else step
        x, nu = grid.boundary_points, grid.boundary_normals
        I1, ok1 = interp_rows(grid, x - s * nu, active)
        I2, ok2 = interp_rows(grid, x - 2 * s * nu, active)
        self.valid = ok1 & ok2
        self.S = ((-4 * I1 + I2) / (2 * s)).tocsr()
        self.c_phi = 3 / (2 * s)
        self.grid = grid

    def dnu(self, values: np.ndarray, phi_b: np.ndarray) -> np.ndarray:
        """(m, K) from node values (m, ny, nx) and boundary data (m, K)."""
        flat = values.reshape(values.shape[0], -1)
        return (self.S @ flat.T).T + self.c_phi * phi_b


def _a_nu(dnu, tang, p):
    if p == 2:
        return dnu
    return (dnu * dnu + tang * tang) ** ((p - 2) / 2) * dnu


def outer_flux(field: Field, grid: Grid, p: float | None = None) -> FluxTrace:
    p = field.p if p is None else p
    active = grid.inside_mask & field.phase.chi
    op = OuterFluxOperator(grid, active)
    phi_b = field.bdata.on_boundary(grid)
    dnu = op.dnu(field.values, phi_b)
    tang = field.bdata.tangential_derivative(grid.boundary_points, grid.boundary_normals)
    vals = _a_nu(dnu, tang, p)
    keep = op.valid
    return FluxTrace(
        "outer",
        grid.boundary_points[keep],
        grid.boundary_normals[keep],
        grid.boundary_ds[keep],
        vals[:, keep],
        dnu[:, keep],
        dropped=int((~keep).sum()),
    )


def _support_normals(grid: Grid, phase: Phase, pts: np.ndarray, nu0: np.ndarray):
    """Unit normals into U at ``pts`` from the level set, else a smoothed indicator."""
    if phase.level is not None:
        f = np.where(grid.inside_mask, phase.level, np.maximum(phase.level, 0.0))
    else:
        f = ndimage.gaussian_filter(phase.chi.astype(float), 1.5)
    gy, gx = np.gradient(f, grid.h)
    I, _ = interp_rows(grid, pts, np.ones_like(phase.chi))
    vec = np.stack([I @ gx.ravel(), I @ gy.ravel()], axis=1)
    nrm = np.linalg.norm(vec, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        nu = vec / nrm[:, None]
    bad = ~(nrm > 0) | (np.einsum("ij,ij->i", np.nan_to_num(nu), nu0) <= 0)
    nu[bad] = nu0[bad]
    return nu


def free_boundary_samples(grid: Grid, phase: Phase, guide: np.ndarray | None = None):
    """Crossings of U -> E edges, with normals pointing from E into U.

    ``guide`` (ny, nx) is a field vanishing on E whose gradient fixes the
    normal; without it the normal is the edge direction.
    Returns points, normals, face weights ds, U node ids, E node ids.
    """
    disc = Discretization(grid, phase)
    free = ~disc.cut_outer
    a = disc.nodes[disc.cut_a[free]]
    e = disc.cut_nb[free]
    pts = disc.cut_pt[free]
    edge_dir = np.array(DIRS, dtype=float)[disc.cut_dir[free]]
    nu0 = -edge_dir
    active = grid.inside_mask & phase.chi
    nu = _support_normals(grid, phase, pts, nu0)
    if guide is not None and pts.size:
        h = grid.h
        c = pts + 3 * h * nu
        vals = guide.ravel()
        grads = []
        ok = np.ones(len(pts), dtype=bool)
        for dxy in ((h, 0.0), (0.0, h)):
            off = np.array(dxy)
            Ip, okp = interp_rows(grid, c + off, active)
            Im, okm = interp_rows(grid, c - off, active)
            grads.append((Ip @ vals - Im @ vals) / (2 * h))
            ok &= okp & okm
        gvec = np.stack(grads, axis=1)
        nrm = np.linalg.norm(gvec, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            cand = np.nan_to_num(gvec / nrm[:, None])
        good = ok & (nrm > 0) & (np.einsum("ij,ij->i", cand, nu) > 0.5)
        nu[good] = cand[good]
    ds = grid.h * np.einsum("ij,ij->i", nu, nu0)
    return pts, nu, ds, a, e


def free_flux(field: Field, grid: Grid, p: float | None = None, others=()) -> FluxTrace:
    """A_nu on the free boundary; ``others`` are extra fields sampled alike.

    d_nu u at a crossing x_c comes from the quadratic through u(x_c + k s nu),
    k = 1, 2, 3, s = 2h: (-5 u1 + 8 u2 - 3 u3) / (2 s). Where that stencil
    leaves the support (thin layers) shorter ones are tried, ending with the
    quadratic through u(x_c) = 0, u1, u2: (4 u1 - u2) / (2 s).
    """
    p = field.p if p is None else p
    phase = field.phase
    guide = np.abs(field.values).sum(axis=0)
    pts, nu, ds, a, e = free_boundary_samples(grid, phase, guide)
    active = grid.inside_mask & phase.chi
    h = grid.h
    stencils = [
        (2 * h, (-5, 8, -3)),
        (1.5 * h, (-5, 8, -3)),
        (2 * h, (4, -1)),
        (1.5 * h, (4, -1)),
        (h, (4, -1)),
    ]
    K = len(pts)
    D = sp.csr_matrix((K, grid.n_nodes))
    ok = np.zeros(K, dtype=bool)
    for s, coef in stencils:
        op = sp.csr_matrix((K, grid.n_nodes))
        okc = ~ok
        for k, c in enumerate(coef, start=1):
            I, okk = interp_rows(grid, pts + k * s * nu, active)
            op = op + c * I
            okc &= okk
        D = D + sp.diags(okc.astype(float)) @ op / (2 * s)
        ok |= okc
    D = D.tocsr()

    def dn(values):
        flat = values.reshape(values.shape[0], -1)
        return (D @ flat.T).T

    dnu = dn(field.values)
    keep = ok
    dnu = dnu[:, keep]
    clamped = int((dnu < 0).sum())
    dnu = np.maximum(dnu, 0.0)
    vals = dnu if p == 2 else dnu ** (p - 1)
    trace = FluxTrace(
        "free",
        pts[keep],
        nu[keep],
        np.maximum(ds[keep], 0.0),
        vals,
        dnu,
        dropped=int((~keep).sum()),
        clamped=clamped,
        u_node=a[keep],
        e_node=e[keep],
    )
    extra = [np.maximum(dn(o)[:, keep], 0.0) for o in others]
    return (trace, extra) if others else trace


def boundary_flux(field: Field, grid: Grid, p: float | None = None, location: str = "outer"):
    if location == "outer":
        return outer_flux(field, grid, p)
    if location == "free":
        return free_flux(field, grid, p)
    raise ValueError(f"unknown flux location {location!r}")


def flux_balance(field: Field, grid: Grid, p: float | None = None) -> float:
    """max_i |outer flux - free-boundary flux| / outer flux."""
    outer = outer_flux(field, grid, p)
    free = free_flux(field, grid, p)
    out_i = outer.values @ outer.ds
    free_i = free.values @ free.ds if free.n else np.zeros(field.m)
    pp = field.p if p is None else p
    scale = field.bdata.C0(grid) ** max(pp - 1, 1.0) * float(outer.ds.sum())
    if np.any(np.abs(out_i) <= 1e-9 * scale):
        raise ValueError("zero outer flux: degenerate boundary data")
    return float(np.max(np.abs(out_i - free_i) / np.abs(out_i)))
