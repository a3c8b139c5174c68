"""Checks of the structural properties of computed minimisers, and eps sweeps."""
from __future__ import annotations

import itertools
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .functional import GammaModel, PenaltyParams
from .mesh import Grid, distance_to_cells
from .optimize import (
    AdjointField,
    OptimizeConfig,
    adjoint_solve,
    evaluate,
    fb_velocity,
    optimize,
)
from .phase import Phase, enforce, volume_seed_phase
from .plap import BoundaryData, Field, SolverConfig, flux_balance, free_boundary_samples

log = logging.getLogger(__name__)


@dataclass
class PropertyReport:
    name: str
    status: str  # "pass", "fail" or "inconclusive"
    stats: dict = field(default_factory=dict)
    n_samples: int = 0
    params: dict = field(default_factory=dict)
    violation: dict | None = None

    @property
    def passed(self) -> bool:
        return self.status != "fail"

    def to_dict(self) -> dict:
        return asdict(self)


def _fail(name, stats, n, params, violation):
    if violation is None:
        raise ValueError("a failing report must carry the violating sample")
    return PropertyReport(name, "fail", stats, n, params, violation)


def _theta_pos(fld: Field, grid: Grid) -> float:
    return 1e-6 * fld.bdata.c0(grid)


def verify_nondegeneracy(grid: Grid, phase: Phase, fld: Field, ratio_cap: float = 50.0,
                         band: float = 0.2) -> PropertyReport:
    """Percentiles of |u| / dist(x, E) over U nodes within band * diam of E."""
    name = "nondegeneracy"
    params = {"ratio_cap": ratio_cap, "band": band}
    E = phase.zero_set(grid)
    if not E.any():
        return PropertyReport(name, "inconclusive", {"reason": "empty zero set"}, 0, params)
    dist = distance_to_cells(grid, E)
    U = grid.inside_mask & phase.chi
    sel = U & (dist <= band * grid.shape.diameter) & (dist > 0)
    n = int(sel.sum())
    if n < 20:
        return PropertyReport(name, "inconclusive", {"reason": "fewer than 20 samples"}, n, params)
    mag = np.linalg.norm(fld.values[:, sel], axis=0)
    ratio = mag / dist[sel]
    c_est = float(np.percentile(ratio, 5))
    C_est = float(np.percentile(ratio, 95))
    stats = {"c_est": c_est, "C_est": C_est, "ratio_min": float(ratio.min()),
             "ratio_max": float(ratio.max())}
    stats["C_over_c"] = C_est / c_est if c_est > 0 else float("inf")
    if c_est > 0 and C_est / c_est <= ratio_cap:
        return PropertyReport(name, "pass", stats, n, params)
    k = int(np.argmin(ratio))
    pts = grid.xy[sel]
    return _fail(name, stats, n, params,
                 {"x": pts[k].tolist(), "ratio": float(ratio[k]), "dist": float(dist[sel][k])})


def _disk_kernel(r_cells: float) -> np.ndarray:
    R = int(np.floor(r_cells))
    j, i = np.mgrid[-R : R + 1, -R : R + 1]
    return (i * i + j * j <= r_cells * r_cells).astype(float)


def verify_density(grid: Grid, phase: Phase, radii, c_density: float = 0.05) -> PropertyReport:
    """E-volume fraction of balls centred on free-boundary cells."""
    name = "density"
    radii = [float(r) for r in radii]
    params = {"radii": radii, "c_density": c_density}
    if any(r < 3 * grid.h - 1e-12 for r in radii):
        raise ValueError("radii must be at least 3h")
    E = phase.zero_set(grid).astype(float)
    centres = phase.free_boundary_cells(grid)
    if not centres.any():
        return PropertyReport(name, "inconclusive", {"reason": "no free boundary"}, 0, params)
    dbnd = grid.dist_to_boundary()
    lo, hi, worst, skipped, n = np.inf, -np.inf, None, 0, 0
    per_r = {}
    for r in radii:
        cnt = ndimage.convolve(E, _disk_kernel(r / grid.h), mode="constant")
        frac = cnt * grid.cell_area / (np.pi * r * r)
        inside = centres & (dbnd >= r)
        skipped += int((centres & ~inside).sum())
        vals = frac[inside]
        if vals.size == 0:
            continue
        n += vals.size
        per_r[str(r)] = {"min": float(vals.min()), "max": float(vals.max()),
                         "mean": float(vals.mean())}
        for v, op in ((vals.min(), "min"), (vals.max(), "max")):
            if (op == "min" and v < lo) or (op == "max" and v > hi):
                k = np.argmin(vals) if op == "min" else np.argmax(vals)
                x = grid.xy[inside][k].tolist()
                if op == "min":
                    lo = float(v)
                    if v < c_density:
                        worst = {"x": x, "r": r, "ratio": float(v)}
                else:
                    hi = float(v)
                    if v > 1 - c_density:
                        worst = worst or {"x": x, "r": r, "ratio": float(v)}
    stats = {"min": lo, "max": hi, "skipped": skipped, "per_radius": per_r}
    if n == 0:
        return PropertyReport(name, "inconclusive", stats, 0, params)
    if lo >= c_density and hi <= 1 - c_density:
        return PropertyReport(name, "pass", stats, n, params)
    return _fail(name, stats, n, params, worst)


def verify_fb_condition(grid: Grid, phase: Phase, fld: Field, adjoint: AdjointField | None = None,
                        model: GammaModel | None = None, fb_tol: float = 0.15) -> PropertyReport:
    """Spread of sum_i d_nu h^i d_nu u^i along the free boundary (p = 2)."""
    name = "fb_condition"
    params = {"fb_tol": fb_tol}
    if fld.p != 2:
        return PropertyReport(name, "inconclusive", {"reason": "p != 2: skipped"}, 0, params)
    if adjoint is None:
        adjoint = adjoint_solve(grid, phase, fld, model or GammaModel.uniform(fld.m))
    vel = fb_velocity(grid, phase, fld, adjoint)
    stats = vel.stats()
    stats["adjoint_c"] = adjoint.c_bound
    if vel.v.size < 10:
        return PropertyReport(name, "inconclusive", stats, int(vel.v.size), params)
    if stats["rel_std"] <= fb_tol:
        return PropertyReport(name, "pass", stats, int(vel.v.size), params)
    k = int(np.argmax(np.abs(vel.v - vel.v.mean())))
    return _fail(name, stats, int(vel.v.size), params,
                 {"x": vel.points[k].tolist(), "v": float(vel.v[k])})


def verify_support_equality(fld: Field, threshold: float, grid: Grid | None = None,
                            tol: float = 0.01) -> PropertyReport:
    name = "support_equality"
    params = {"threshold": threshold, "tol": tol}
    if fld.m < 2:
        return PropertyReport(name, "pass", {"reason": "single component"}, 0, params)
    active = fld.phase.chi if grid is None else fld.phase.chi & grid.inside_mask
    n = int(active.sum())
    sets = [(fld.values[i] > threshold) & active for i in range(fld.m)]
    worst, where = 0.0, None
    for a, b in itertools.combinations(range(fld.m), 2):
        diff = sets[a] ^ sets[b]
        frac = diff.sum() / max(n, 1)
        if frac >= worst:
            worst = float(frac)
            if diff.any():
                where = {"pair": [a, b], "node": int(np.flatnonzero(diff.ravel())[0])}
    stats = {"max_sym_diff_fraction": worst}
    if worst <= tol:
        return PropertyReport(name, "pass", stats, n, params)
    return _fail(name, stats, n, params, where)


def verify_collar(grid: Grid, fld: Field, delta0: float | None = None,
                  theta_pos: float | None = None) -> PropertyReport:
    name = "collar"
    theta_pos = _theta_pos(fld, grid) if theta_pos is None else theta_pos
    params = {"delta0": delta0, "theta_pos": theta_pos}
    if delta0 is None:
        mask = grid.collar_mask
    else:
        mask = grid.inside_mask & (grid.dist_to_boundary() < delta0)
    if not mask.any():
        return PropertyReport(name, "inconclusive", {"reason": "empty collar"}, 0, params)
    mag = np.linalg.norm(fld.values[:, mask], axis=0)
    k = int(np.argmin(mag))
    stats = {"min_abs_u": float(mag[k])}
    if mag[k] >= theta_pos:
        return PropertyReport(name, "pass", stats, int(mask.sum()), params)
    return _fail(name, stats, int(mask.sum()), params,
                 {"x": grid.xy[mask][k].tolist(), "abs_u": float(mag[k])})


def estimate_growth_constants(grid: Grid, phase: Phase, fld: Field,
                              radii_cells=(4, 8, 16)) -> PropertyReport:
    """sup over B_{r/2}(x) of |u| / r at free-boundary cells x (informational)."""
    name = "growth_constants"
    centres = phase.free_boundary_cells(grid)
    mag = np.linalg.norm(fld.values, axis=0)
    dbnd = grid.dist_to_boundary()
    per, hi, lo, n = {}, 0.0, np.inf, 0
    for rc in radii_cells:
        r = rc * grid.h
        sup = ndimage.maximum_filter(mag, footprint=_disk_kernel(rc / 2).astype(bool),
                                     mode="constant")
        sel = centres & (dbnd >= r / 2)
        if not sel.any():
            continue
        vals = sup[sel] / r
        n += vals.size
        per[str(rc)] = {"max": float(vals.max()), "min": float(vals.min()),
                        "median": float(np.median(vals))}
        hi, lo = max(hi, float(vals.max())), min(lo, float(vals.min()))
    stats = {"M_est": hi, "m_est": lo if np.isfinite(lo) else 0.0, "per_radius": per}
    return PropertyReport(name, "pass", stats, n, {"radii_cells": list(radii_cells)})


def free_boundary_perimeter(grid: Grid, phase: Phase) -> float:
    if not phase.zero_set(grid).any():
        return 0.0
    _, _, ds, _, _ = free_boundary_samples(grid, phase)
    return float(np.abs(ds).sum())


def hausdorff_to_circle(grid: Grid, phase: Phase, radius: float) -> float:
    """Hausdorff distance between the staircase free boundary and a centred circle."""
    if not phase.zero_set(grid).any():
        return float("inf")
    pts, _, _, _, _ = free_boundary_samples(grid, phase)
    r = np.hypot(pts[:, 0], pts[:, 1])
    d1 = float(np.abs(r - radius).max())
    # every point of the circle must be near some sample
    t = np.linspace(0, 2 * np.pi, 720, endpoint=False)
    circ = radius * np.stack([np.cos(t), np.sin(t)], axis=1)
    d = np.sqrt(((circ[:, None, :] - pts[None]) ** 2).sum(-1)).min(axis=1)
    return max(d1, float(d.max()))


def property_suite(grid, phase, fld, model=None, radii=None, ratio_cap=50.0, c_density=0.05,
                   fb_tol=0.15):
    """All applicable verifiers for a converged run."""
    radii = radii or [4 * grid.h, 8 * grid.h]
    reps = [
        verify_nondegeneracy(grid, phase, fld, ratio_cap),
        verify_density(grid, phase, radii, c_density),
        verify_support_equality(fld, _theta_pos(fld, grid), grid),
        verify_collar(grid, fld),
        estimate_growth_constants(grid, phase, fld),
    ]
    if fld.p == 2:
        reps.append(verify_fb_condition(grid, phase, fld, model=model, fb_tol=fb_tol))
    else:
        reps.append(PropertyReport("fb_condition", "inconclusive",
                                   {"reason": "p != 2: skipped"}, 0, {"fb_tol": fb_tol}))
    try:
        bal = flux_balance(fld, grid)
        cap = 0.02 if fld.p == 2 else 0.05
        st = "pass" if bal <= cap else "fail"
        reps.append(PropertyReport("flux_balance", st, {"imbalance": bal}, fld.m, {"cap": cap},
                                   None if st == "pass" else {"imbalance": bal}))
    except ValueError as exc:
        reps.append(PropertyReport("flux_balance", "inconclusive", {"reason": str(exc)}, 0, {}))
    return reps


# --------------------------------------------------------------------------
# eps sweep


@dataclass
class SweepResult:
    rows: list
    checks: dict


def _sweep_row(args):
    grid, bdata, model, eps, cfg, method, opt, phase0 = args
    t0 = time.perf_counter()
    try:
        params = PenaltyParams(eps)
        start = phase0 if phase0 is not None else volume_seed_phase(grid)
        phase, fld, rep = optimize(method, grid, start, bdata, model, params, cfg, opt)
        jb = rep.final
        fb = rep.fb_stats or {}
        return {
            "eps": eps, "status": "ok", "vol": jb.volume, "J": jb.value,
            "heat_loss": jb.heat_loss, "penalty": jb.penalty,
            "perimeter_E": free_boundary_perimeter(grid, phase),
            "fb_mean": fb.get("mean", float("nan")), "fb_rel_std": fb.get("rel_std", float("nan")),
            "iterations": rep.iterations, "termination": rep.termination,
            "wall_time": time.perf_counter() - t0, "phase": phase, "field": fld, "report": rep,
        }
    except Exception as exc:  # a failed row must not abort the sweep
        log.warning("sweep row eps=%g failed: %s", eps, exc)
        return {"eps": eps, "status": f"error: {exc}", "wall_time": time.perf_counter() - t0}


def eps_sweep(grid: Grid, bdata: BoundaryData, model: GammaModel, eps_list, cfg: SolverConfig,
              method: str = "greedy", opt: OptimizeConfig = OptimizeConfig(),
              phase0: Phase | None = None, jobs: int = 1) -> SweepResult:
    eps_list = [float(e) for e in eps_list]
    if not eps_list:
        raise ValueError("empty eps list")
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps list must be strictly decreasing")
    args = [(grid, bdata, model, e, cfg, method, opt, phase0) for e in eps_list]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            rows = list(ex.map(_sweep_row, args))
        # fields are heavy; keep them only when computed in process
    else:
        rows = [_sweep_row(a) for a in args]
    return SweepResult(rows, sweep_checks(grid, rows))


def sweep_checks(grid: Grid, rows) -> dict:
    ok = [r for r in rows if r["status"] == "ok"]
    h = grid.h
    lower = [r["vol"] >= 1 - 4 * h * r["perimeter_E"] for r in ok]
    excess = [max(r["vol"] - 1, 0.0) for r in ok]
    mono = all(b <= a + 1e-12 for a, b in zip(excess, excess[1:]))
    eps = np.array([r["eps"] for r in ok])
    ex = np.array(excess)
    C = float(eps @ ex / (eps @ eps)) if ok else float("nan")
    Js = [r["J"] for r in ok]
    j_mono = all(b >= a - 1e-9 for a, b in zip(Js, Js[1:]))
    return {
        "rows_ok": len(ok),
        "rows_failed": len(rows) - len(ok),
        "volume_lower_bound": bool(all(lower)),
        "excess_nonincreasing": bool(mono),
        "C_fit": C,
        "C_finite": bool(np.isfinite(C)),
        "J_nondecreasing": bool(j_mono),
        "J_nondecreasing_note": "" if j_mono else "warning: optimiser reached another local minimum",
    }


# --------------------------------------------------------------------------
# exhaustive oracle for tiny domains


def exhaustive_minimum(grid: Grid, bdata: BoundaryData, model: GammaModel, params: PenaltyParams,
                       cfg: SolverConfig, max_free: int = 12):
    """Evaluate J_eps over every admissible phase of the free (non-collar) cells."""
    free = np.flatnonzero((grid.inside_mask & ~grid.collar_mask).ravel())
    if free.size > max_free:
        raise ValueError(f"{free.size} free cells: too many to enumerate")
    best, seen = None, set()
    for bits in itertools.product((False, True), repeat=free.size):
        chi = grid.inside_mask.copy().ravel()
        chi[free] = bits
        phase, _ = enforce(grid, Phase(chi.reshape(grid.ny, grid.nx)))
        if phase.key() in seen:
            continue
        seen.add(phase.key())
        try:
            _, _, jb = evaluate(grid, phase, bdata, model, params, cfg)
        except ValueError:
            continue
        if best is None or jb.value < best[1].value:
            best = (phase, jb)
    return best[0], best[1], len(seen)
