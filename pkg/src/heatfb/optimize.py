"""Minimisation of J_eps over support configurations.

Two optimisers share the state solve:

* ``greedy_flip`` moves single cells across the free boundary and stops at a
  1-flip local minimum. For p = 2 every candidate's exact change in J_eps is
  obtained from a low-rank update of the current factorisation, and
  non-interacting improving flips are applied together after a verifying
  re-solve. Other p use a plain re-solve per candidate.
* ``shape_gradient_optimize`` (p = 2) moves the free boundary by thresholding
  the adjoint velocity sum_i d_nu h^i d_nu u^i against the penalty slope.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla
from scipy import ndimage

from .functional import GammaModel, JBreakdown, PenaltyParams, f_eps, gamma_grad, j_eps
from .mesh import Grid
from .phase import FOUR, Phase, enforce
from .plap import (
    DIRS,
    THETA_MIN,
    BoundaryData,
    Discretization,
    Field,
    OuterFluxOperator,
    SolverConfig,
    SolverError,
    SolveStats,
    free_flux,
    linear_residual,
    outer_flux,
    solve_component,
    solve_linear,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizeConfig:
    max_iter: int = 5000
    accept_tol: float | None = None  # default 1e-10 * J(start)
    batch: bool = True  # greedy: apply independent improving flips together
    lazy_radius: int = 3  # p != 2 greedy: cells around the last flips whose gains are re-solved; 0 = all
    band: float = 0.1
    polish: bool = True  # shape gradient: finish with greedy when it stalls or cycles
    max_time: float | None = None

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")
        if self.accept_tol is not None and not self.accept_tol > 0:
            raise ValueError("accept_tol must be positive")
        if self.lazy_radius < 0:
            raise ValueError("lazy_radius must be nonnegative")
        if not 0 <= self.band < 1:
            raise ValueError("band must lie in [0, 1)")


@dataclass
class OptimizeReport:
    method: str
    energy_trace: list = field(default_factory=list)
    volume_trace: list = field(default_factory=list)
    added: int = 0
    removed: int = 0
    pruned: int = 0
    iterations: int = 0
    termination: str = ""
    wall_time: float = 0.0
    accept_tol: float = 0.0
    notes: list = field(default_factory=list)
    fb_stats: dict | None = None
    final: JBreakdown | None = None

    def check_monotone(self):
        tr = np.asarray(self.energy_trace)
        if tr.size > 1 and np.any(np.diff(tr) > -self.accept_tol):
            raise AssertionError("accepted energies are not strictly decreasing")


# --------------------------------------------------------------------------
# state


def solve_state(grid: Grid, phase: Phase, bdata: BoundaryData, cfg: SolverConfig,
                u0: Field | None = None, disc: Discretization | None = None) -> Field:
    """All components on the common support; islands are pruned first."""
    bdata.check_positive(grid)
    if not np.all(phase.chi[grid.collar_mask]):
        raise ValueError("phase does not contain the collar")
    phase, _ = enforce(grid, phase)
    disc = disc or Discretization(grid, phase)
    if cfg.p == 2:
        cv = disc.cut_values(bdata)
        u = solve_linear(disc, cv, cfg)
        stats = []
        for i in range(bdata.m):
            res = linear_residual(disc, u[i], cv[i])
            if res > max(cfg.tol, 1e3 * np.finfo(float).eps / grid.h**2):
                raise SolverError("linear solve residual above tolerance", res)
            stats.append(SolveStats(iterations=1, residual=res))
        values = np.stack([disc.scatter(ui) for ui in u])
    elif bdata.m > 1 and (c := bdata.ratios(grid)) is not None:
        # proportional data: u_i = c_i u_1 by 1-homogeneity (exact up to the eta regularisation)
        start = None if u0 is None else u0.values[0]
        u1, st = solve_component(grid, phase, BoundaryData((bdata.profiles[0],)), cfg,
                                 u0=start, disc=disc)
        values = c[:, None, None] * u1[None]
        stats = [st] * bdata.m
    else:
        vals, stats = [], []
        for i in range(bdata.m):
            start = None if u0 is None else u0.values[i]
            ui, st = solve_component(grid, phase, BoundaryData((bdata.profiles[i],)), cfg,
                                     u0=start, disc=disc)
            vals.append(ui)
            stats.append(st)
        values = np.stack(vals)
    return Field(values, phase, bdata, cfg.p, stats)


def evaluate(grid, phase, bdata, model, params, cfg, u0=None):
    """(repaired phase, field, J breakdown)."""
    fld = solve_state(grid, phase, bdata, cfg, u0=u0)
    return fld.phase, fld, j_eps(fld, fld.phase, grid, model, params, cfg.p)


def _protected(grid: Grid) -> np.ndarray:
    """Cells that may never leave U: the collar and the outer-flux stencils."""
    op = OuterFluxOperator(grid, grid.inside_mask)
    S = op.S.tocoo()
    mask = np.zeros(grid.n_nodes, dtype=bool)
    mask[S.col[np.abs(S.data) > 0]] = True
    return grid.collar_mask | mask.reshape(grid.ny, grid.nx)


def _candidates(grid: Grid, phase: Phase, protected: np.ndarray):
    """Flat ids of removable U cells and of addable E cells."""
    E = phase.zero_set(grid)
    if E.any():
        rem = phase.free_boundary_cells(grid) & ~protected
    else:  # nothing to move yet: any free cell may open the first hole
        rem = phase.chi & grid.inside_mask & ~protected
    add = phase.front_cells(grid)
    return np.flatnonzero(rem.ravel()), np.flatnonzero(add.ravel())


def _flip(phase: Phase, rem, add) -> Phase:
    chi = phase.chi.copy().ravel()
    chi[np.asarray(rem, dtype=np.int64)] = False
    chi[np.asarray(add, dtype=np.int64)] = True
    return Phase(chi.reshape(phase.chi.shape))


# --------------------------------------------------------------------------
# exact low-rank flip evaluation (p = 2)


class _LinearState:
    """Factorised p = 2 state and the pieces needed for exact flip updates."""

    PAD = 5  # a node and its four neighbours

    def __init__(self, grid, phase, fld, jb, model, params):
        self.grid, self.phase, self.field, self.jb = grid, phase, fld, jb
        self.model, self.params = model, params
        disc = Discretization(grid, phase)
        self.disc = disc
        self.lu = spla.splu(disc.A)
        self.u = np.stack([disc.gather(v) for v in fld.values])  # (m, n)
        self.b = disc.rhs(disc.cut_values(fld.bdata))
        op = OuterFluxOperator(grid, grid.inside_mask & phase.chi)
        if not op.valid.all():
            raise SolverError("outer flux stencil leaves the support")
        S_act = op.S[:, disc.nodes]
        self.X = self.lu.solve(S_act.T.toarray())  # A^-1 S^T, (n, K)
        trace = outer_flux(fld, grid, 2)
        self.dnu = trace.dnu  # (m, K)
        self.pts, self.ds = trace.points, trace.ds
        self.psi = model.weights(self.pts)
        self.base = np.stack([model.profiles[i](self.dnu[i]) for i in range(model.m)])

    def _rows(self, flats, adding):
        """Per candidate: padded local index set C, its Delta block and rhs change."""
        g, disc = self.grid, self.disc
        nx = g.nx
        active = (g.inside_mask & self.phase.chi).ravel()
        inside = g.inside_mask.ravel()
        n, P, m = disc.n, self.PAD, self.u.shape[0]
        K = flats.size
        C = np.full((K, P), -1, dtype=np.int64)  # -1 pad, n = the added node
        D = np.zeros((K, P, P))
        db = np.zeros((K, P, m))
        jj, ii = np.divmod(flats, nx)
        if adding:
            C[:, 0] = n
            diag = np.zeros(K)
        else:
            C[:, 0] = disc.ids[flats]
            D[:, 0, 0] = 1 - disc.A.diagonal()[C[:, 0]]
            db[:, 0, :] = -self.b[:, C[:, 0]].T
        for d, (di, dj) in enumerate(DIRS):
            nb = (jj + dj) * nx + (ii + di)
            act = active[nb]
            slot = d + 1
            C[act, slot] = disc.ids[nb[act]]
            if adding:
                D[act, 0, slot] = D[act, slot, 0] = -1.0
                D[act, slot, slot] = -1.0  # half cut (1/theta = 2) becomes an interior edge
                diag += np.where(act, 1.0, 0.0)
                e_in = ~act & inside[nb]
                diag += np.where(e_in, 2.0, 0.0)
                out = ~inside[nb]
                if out.any():
                    a_pt, b_pt = g.points[flats[out]], g.points[nb[out]]
                    th = np.clip(g.shape.crossing(a_pt, b_pt), THETA_MIN, 1.0)
                    step = np.array([di, dj], dtype=float) * g.h
                    phi = self.field.bdata(a_pt + th[:, None] * step)  # (m, k)
                    diag[out] += 1 / th
                    db[out, 0, :] += (phi / th).T
            else:
                D[act, 0, slot] = D[act, slot, 0] = 1.0  # coupling -1 removed
                D[act, slot, slot] = 1.0  # interior edge becomes a half cut
        if adding:
            D[:, 0, 0] = diag - 1.0
        return C, D, db

    def _gsub(self, C):
        """Entries of A^-1 (extended by an identity for the added node) on each C."""
        n = self.disc.n
        cols = np.unique(C[(C >= 0) & (C < n)])
        K, P = C.shape
        G = np.zeros((K, P, P))
        idx = np.eye(P, dtype=bool)
        G[:, idx] = 1.0  # pads and the added node
        if cols.size:
            rhs = np.zeros((n, cols.size))
            rhs[cols, np.arange(cols.size)] = 1.0
            Ginv = self.lu.solve(rhs)[cols]  # (c, c)
            pos = np.full(n + 1, -1, dtype=np.int64)
            pos[cols] = np.arange(cols.size)
            real = (C >= 0) & (C < n)
            pc = np.where(real, pos[np.clip(C, 0, n)], 0)
            block = Ginv[pc[:, :, None], pc[:, None, :]]
            both = real[:, :, None] & real[:, None, :]
            G = np.where(both, block, G)
        return G

    def delta_j(self, flats, adding, chunk=400):
        """Exact J_eps change for flipping each cell in ``flats`` on its own."""
        out = np.empty(flats.size)
        for s in range(0, flats.size, chunk):
            f = flats[s : s + chunk]
            C, D, db = self._rows(f, adding)
            G = self._gsub(C)
            real = (C >= 0) & (C < self.disc.n)
            uC = np.where(real[:, :, None], self.u.T[np.clip(C, 0, self.disc.n - 1)], 0.0)
            M = np.eye(self.PAD)[None] + G @ D
            y = np.linalg.solve(M, uC + G @ db)
            z = db - D @ y  # (k, P, m)
            XC = np.where(real[:, :, None], self.X[np.clip(C, 0, self.disc.n - 1)], 0.0)
            dd = np.einsum("kpj,kpi->kij", XC, z)  # (k, m, K)
            new = self.dnu[None] + dd
            loss = sum(
                self.psi[i] * self.model.profiles[i](new[:, i]) for i in range(self.model.m)
            )
            dh = (loss - (self.psi * self.base).sum(axis=0)) @ self.ds
            vol = self.jb.volume
            dv = self.grid.cell_area * (1 if adding else -1)
            out[s : s + chunk] = dh + f_eps(vol + dv, self.params) - f_eps(vol, self.params)
        return out


def _independent(order_flats, nx, ny, gap=3):
    """Greedy independent subset: chosen cells are >= gap apart (Chebyshev)."""
    blocked = np.zeros((ny + 2 * gap, nx + 2 * gap), dtype=bool)
    keep = []
    for f in order_flats:
        j, i = divmod(int(f), nx)
        if blocked[j + gap, i + gap]:
            continue
        keep.append(f)
        blocked[j + 1 : j + 2 * gap, i + 1 : i + 2 * gap] = True
    return np.array(keep, dtype=np.int64)


# --------------------------------------------------------------------------
# greedy


def _start(grid, phase0, bdata, model, params, cfg, report):
    chi = phase0.chi | _protected(grid)
    if (chi != phase0.chi).any():
        report.notes.append(f"start phase extended by {int((chi != phase0.chi).sum())} stencil cells")
    phase, changed = enforce(grid, Phase(chi))
    if changed:
        report.notes.append(f"start phase repaired: {changed} cells")
    return evaluate(grid, phase, bdata, model, params, cfg)


def greedy_flip(grid: Grid, phase0: Phase, bdata: BoundaryData, model: GammaModel,
                params: PenaltyParams, cfg: SolverConfig, opt: OptimizeConfig = OptimizeConfig(),
                _start_state=None):
    """Cell-flip descent on J_eps down to a 1-flip local minimum."""
    t0 = time.perf_counter()
    report = OptimizeReport("greedy")
    phase, fld, jb = _start_state or _start(grid, phase0, bdata, model, params, cfg, report)
    report.accept_tol = opt.accept_tol or 1e-10 * abs(jb.value)
    report.energy_trace.append(jb.value)
    report.volume_trace.append(jb.volume)
    protected = _protected(grid)
    fast = cfg.p == 2
    cache = {}
    it = 0
    while True:
        if it >= opt.max_iter:
            report.termination = "budget"
            break
        if opt.max_time is not None and time.perf_counter() - t0 > opt.max_time:
            report.termination = "budget"
            break
        rem, add = _candidates(grid, phase, protected)
        if fast:
            step = _fast_step(grid, phase, fld, jb, bdata, model, params, cfg, opt, report, rem, add)
        else:
            step = _plain_step(grid, phase, fld, jb, bdata, model, params, cfg, opt, report, rem,
                               add, cache)
        if step is None:
            report.termination = "local_minimum"
            break
        phase, fld, jb, n_rem, n_add, pruned = step
        report.removed += n_rem
        report.added += n_add
        report.pruned += pruned
        report.energy_trace.append(jb.value)
        report.volume_trace.append(jb.volume)
        it += 1
    if np.any(~phase.chi[grid.collar_mask]):
        raise AssertionError("collar cell left the support")
    report.iterations = it
    report.final = jb
    report.wall_time = time.perf_counter() - t0
    report.check_monotone()
    return phase, fld, report


def _try(grid, phase, fld, jb, rem, add, bdata, model, params, cfg, tol):
    new = _flip(phase, rem, add)
    new, pruned = enforce(grid, new)
    try:
        nphase, nfld, njb = evaluate(grid, new, bdata, model, params, cfg, u0=fld)
    except (SolverError, ValueError) as exc:
        log.debug("candidate rejected: %s", exc)
        return None
    if njb.value - jb.value <= -tol:
        return nphase, nfld, njb, len(rem), len(add), pruned
    return None


def _plain_step(grid, phase, fld, jb, bdata, model, params, cfg, opt, report, rem, add, cache):
    """Re-solve the candidates, then apply the improving flips as in the fast step.

    Gains of candidates far from the previous step's flips are reused from ``cache``;
    a stale gain only orders the trials, since every accepted move is re-solved.
    A local minimum is declared only after a pass with every gain fresh.
    """
    flats = np.concatenate([rem, add])
    adding = np.concatenate([np.zeros(rem.size, bool), np.ones(add.size, bool)])
    old = cache.get("dj", {})
    near = cache.get("near")
    dj = np.full(flats.size, np.inf)
    fresh = np.ones(flats.size, bool)
    if near is not None:
        for k, (f, a) in enumerate(zip(flats, adding)):
            if not near.flat[f] and (f, a) in old:
                dj[k] = old[(f, a)]
                fresh[k] = False
    for k in np.flatnonzero(fresh):
        f, a = flats[k], adding[k]
        new, _ = enforce(grid, _flip(phase, [] if a else [f], [f] if a else []))
        try:
            _, _, njb = evaluate(grid, new, bdata, model, params, cfg, u0=fld)
        except (SolverError, ValueError):
            continue
        dj[k] = njb.value - jb.value
    res = _apply_gains(grid, phase, fld, jb, bdata, model, params, cfg, opt, report,
                       flats, adding, dj)
    if res is None and not fresh.all():
        cache.pop("near", None)
        return _plain_step(grid, phase, fld, jb, bdata, model, params, cfg, opt, report, rem, add,
                           cache)
    if res is not None:
        changed = res[0].chi != phase.chi
        r = opt.lazy_radius
        cache["near"] = ndimage.binary_dilation(changed, np.ones((2 * r + 1, 2 * r + 1), bool)) \
            if r > 0 else np.ones_like(changed)
        cache["dj"] = {(f, a): d for f, a, d in zip(flats, adding, dj) if np.isfinite(d)}
    return res


def _fast_step(grid, phase, fld, jb, bdata, model, params, cfg, opt, report, rem, add):
    st = _LinearState(grid, phase, fld, jb, model, params)
    dj = np.concatenate([st.delta_j(rem, False), st.delta_j(add, True)])
    flats = np.concatenate([rem, add])
    adding = np.concatenate([np.zeros(rem.size, bool), np.ones(add.size, bool)])
    return _apply_gains(grid, phase, fld, jb, bdata, model, params, cfg, opt, report,
                        flats, adding, dj)


def _apply_gains(grid, phase, fld, jb, bdata, model, params, cfg, opt, report, flats, adding, dj):
    """Accept a verified batch of independent improving flips, else the best single flip."""
    good = np.flatnonzero(dj <= -report.accept_tol)
    if good.size == 0:
        return None
    good = good[np.lexsort((flats[good], dj[good]))]
    tol = report.accept_tol
    if opt.batch and good.size > 1:
        sel = _independent(flats[good], grid.nx, grid.ny)
        pick = good[np.isin(flats[good], sel)]
        while pick.size > 1:
            res = _try(grid, phase, fld, jb, flats[pick[~adding[pick]]], flats[pick[adding[pick]]],
                       bdata, model, params, cfg, tol)
            if res is not None:
                return res
            pick = pick[: pick.size // 2]
    for k in good:  # single flips in order of gain
        res = _try(grid, phase, fld, jb, flats[[k]] if not adding[k] else [],
                   flats[[k]] if adding[k] else [], bdata, model, params, cfg, tol)
        if res is not None:
            return res
        report.notes.append(f"predicted flip at cell {int(flats[k])} failed verification")
    return None


def exact_flip_gains(grid, phase, fld, jb, model, params):
    """(flats, adding, dJ) for every candidate flip from the low-rank update (p = 2)."""
    st = _LinearState(grid, phase, fld, jb, model, params)
    rem, add = _candidates(grid, phase, _protected(grid))
    return (
        np.concatenate([rem, add]),
        np.concatenate([np.zeros(rem.size, bool), np.ones(add.size, bool)]),
        np.concatenate([st.delta_j(rem, False), st.delta_j(add, True)]),
    )


# --------------------------------------------------------------------------
# adjoint and velocity (p = 2)


@dataclass(eq=False)
class AdjointField:
    values: np.ndarray  # (m, ny, nx)
    phase: Phase
    c_bound: float  # smallest c with h^i <= c u^i on the support


def adjoint_solve(grid: Grid, phase: Phase, fld: Field, model: GammaModel) -> AdjointField:
    """h^i harmonic on U, zero on E, dGamma/dxi_i(x, d_nu u) on the outer boundary."""
    if fld.p != 2:
        raise NotImplementedError("the adjoint system is implemented for p = 2 only")
    trace = outer_flux(fld, grid, 2)
    if trace.dropped:
        raise SolverError("outer flux trace incomplete; adjoint data undefined")
    data = gamma_grad(model, trace.points, trace.values)  # (m, K) at every boundary sample
    hb = BoundaryData.from_samples(grid, data)
    disc = Discretization(grid, phase)
    h = solve_linear(disc, disc.cut_values(hb))
    values = np.stack([disc.scatter(v) for v in h])
    act = grid.inside_mask & phase.chi
    u = fld.values[:, act]
    hv = values[:, act]
    pos = u > 1e-6 * fld.bdata.c0(grid)
    c = float(np.max(hv[pos] / u[pos])) if pos.any() else float("nan")
    return AdjointField(values, phase, c)


@dataclass
class FBVelocity:
    points: np.ndarray
    normals: np.ndarray
    ds: np.ndarray
    v: np.ndarray
    u_node: np.ndarray
    e_node: np.ndarray
    dropped: int = 0
    clamped: int = 0

    def stats(self) -> dict:
        if self.v.size == 0:
            return {"n": 0, "mean": float("nan"), "rel_std": float("nan"),
                    "min": float("nan"), "max": float("nan")}
        mean = float(self.v.mean())
        return {
            "n": int(self.v.size),
            "mean": mean,
            "rel_std": float(self.v.std() / abs(mean)) if mean else float("inf"),
            "min": float(self.v.min()),
            "max": float(self.v.max()),
            "dropped": self.dropped,
            "clamped": self.clamped,
        }


def fb_velocity(grid: Grid, phase: Phase, fld: Field, adjoint: AdjointField) -> FBVelocity:
    """v = sum_i d_nu h^i d_nu u^i at the free-boundary samples."""
    if fld.p != 2:
        raise NotImplementedError("the free-boundary velocity is implemented for p = 2 only")
    trace, (dh,) = free_flux(fld, grid, 2, others=(adjoint.values,))
    v = np.sum(trace.dnu * dh, axis=0)
    clamped = trace.clamped + int((dh <= 0).sum())
    return FBVelocity(trace.points, trace.normals, trace.ds, v, trace.u_node, trace.e_node,
                      trace.dropped, clamped)


def cell_velocity(vel: FBVelocity, n_nodes: int):
    """Mean velocity per U cell and per E cell touching the free boundary."""
    out = []
    for nodes in (vel.u_node, vel.e_node):
        s = np.bincount(nodes, weights=vel.v, minlength=n_nodes)
        c = np.bincount(nodes, minlength=n_nodes)
        with np.errstate(invalid="ignore", divide="ignore"):
            out.append(np.where(c > 0, s / np.maximum(c, 1), np.nan))
    return out


def fb_statistics(grid, phase, fld, model):
    adj = adjoint_solve(grid, phase, fld, model)
    return fb_velocity(grid, phase, fld, adj).stats()


# --------------------------------------------------------------------------
# shape gradient (p = 2)


def shape_gradient_optimize(grid: Grid, phase0: Phase, bdata: BoundaryData, model: GammaModel,
                            params: PenaltyParams, cfg: SolverConfig,
                            opt: OptimizeConfig = OptimizeConfig()):
    if cfg.p != 2:
        raise NotImplementedError("the shape-gradient optimiser requires p = 2")
    t0 = time.perf_counter()
    report = OptimizeReport("shape_gradient")
    phase, fld, jb = _start(grid, phase0, bdata, model, params, cfg, report)
    report.accept_tol = opt.accept_tol or 1e-10 * abs(jb.value)
    report.energy_trace.append(jb.value)
    report.volume_trace.append(jb.volume)
    protected = _protected(grid).ravel()
    seen = {phase.key()}
    tol = report.accept_tol
    polish = False
    it = 0
    while True:
        if it >= opt.max_iter or (
            opt.max_time is not None and time.perf_counter() - t0 > opt.max_time
        ):
            report.termination = "budget"
            break
        if not phase.zero_set(grid).any():
            # no free boundary yet: open the first hole with one exact greedy step
            rem, add = _candidates(grid, phase, protected.reshape(grid.ny, grid.nx))
            step = _fast_step(grid, phase, fld, jb, bdata, model, params, cfg,
                              OptimizeConfig(batch=False), report, rem, add)
            if step is None:
                report.termination = "converged"
                break
            report.notes.append("nucleated the zero set with a greedy step")
            moves = None
        else:
            adj = adjoint_solve(grid, phase, fld, model)
            vel = fb_velocity(grid, phase, fld, adj)
            vu, ve = cell_velocity(vel, grid.n_nodes)
            mu_up = params.slope_up(jb.volume)
            mu_dn = params.slope_down(jb.volume)
            add_c = np.flatnonzero(ve > mu_up * (1 + opt.band))
            rem_c = np.flatnonzero((vu < mu_dn * (1 - opt.band)) & ~protected)
            score = np.concatenate([ve[add_c] / mu_up - 1, 1 - vu[rem_c] / mu_dn])
            flats = np.concatenate([add_c, rem_c])
            adding = np.concatenate([np.ones(add_c.size, bool), np.zeros(rem_c.size, bool)])
            if flats.size == 0:
                report.termination = "converged"
                break
            order = np.lexsort((flats, -score))
            moves = (flats[order], adding[order])
            step = None
            k = flats.size
            while k >= 1:
                f, a = moves[0][:k], moves[1][:k]
                step = _try(grid, phase, fld, jb, f[~a], f[a], bdata, model, params, cfg, tol)
                if step is not None:
                    break
                k //= 2
            if step is None:
                report.termination = "stagnation"
                polish = opt.polish
                break
        phase, fld, jb, n_rem, n_add, pruned = step
        report.removed += n_rem
        report.added += n_add
        report.pruned += pruned
        report.energy_trace.append(jb.value)
        report.volume_trace.append(jb.volume)
        it += 1
        if phase.key() in seen:
            report.termination = "oscillation"
            report.notes.append("phase revisited; finishing with greedy polish")
            polish = True
            break
        seen.add(phase.key())
    report.iterations = it
    if polish:
        gphase, gfld, grep = greedy_flip(grid, phase, bdata, model, params, cfg, opt,
                                         _start_state=(phase, fld, jb))
        report.notes.append(
            f"greedy polish: {grep.iterations} steps, {grep.added} added, {grep.removed} removed"
        )
        report.energy_trace += grep.energy_trace[1:]
        report.volume_trace += grep.volume_trace[1:]
        report.added += grep.added
        report.removed += grep.removed
        phase, fld, jb = gphase, gfld, grep.final
        report.termination += "+polish"
    if np.any(~phase.chi[grid.collar_mask]):
        raise AssertionError("collar cell left the support")
    report.final = jb
    report.fb_stats = fb_statistics(grid, phase, fld, model)
    report.wall_time = time.perf_counter() - t0
    report.check_monotone()
    return phase, fld, report


def optimize(method: str, grid, phase0, bdata, model, params, cfg, opt=OptimizeConfig()):
    if method == "greedy":
        phase, fld, rep = greedy_flip(grid, phase0, bdata, model, params, cfg, opt)
        if cfg.p == 2:
            rep.fb_stats = fb_statistics(grid, phase, fld, model)
        return phase, fld, rep
    if method == "shape_gradient":
        return shape_gradient_optimize(grid, phase0, bdata, model, params, cfg, opt)
    raise ValueError(f"unknown optimiser {method!r}")
