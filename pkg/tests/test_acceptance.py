"""Acceptance suite: one test per criterion, each printing a PASS or FAIL line.

Expensive runs are cached per module and shared between criteria.
Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines as they happen.
"""
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import CRITERIA, R_F, radius
from heatfb.analysis import (
    eps_sweep,
    exhaustive_minimum,
    hausdorff_to_circle,
    property_suite,
    verify_density,
)
from heatfb.analytic import (
    RadialConfig,
    hopf_barrier,
    hopf_barrier_plap,
    hopf_lambda_threshold,
    plap_fd,
    radial_profile,
)
from heatfb.cli import main
from heatfb.functional import GammaModel, PenaltyParams
from heatfb.mesh import DomainSpec, build_grid
from heatfb.optimize import optimize
from heatfb.phase import Phase, annulus_phase, full_phase, volume_seed_phase
from heatfb.plap import BoundaryData, SolverConfig, flux_balance, solve_component

pytestmark = pytest.mark.acceptance

LIN = GammaModel.uniform(1)
Q2 = (1 / (R_F * math.log(1 / R_F))) ** 2
CONFIGS = Path(__file__).resolve().parents[1] / "scripts" / "configs"


def report(n, ok, detail):
    line = f"CRITERION {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    CRITERIA.append(line)
    print(line)
    return ok


def _timed(fn, *a, **kw):
    t0 = time.perf_counter()
    out = fn(*a, **kw)
    return out, time.perf_counter() - t0


# --------------------------------------------------------------------------
# shared runs


@pytest.fixture(scope="module")
def disk64():
    return build_grid(DomainSpec(resolution=64, collar_width=0.1))


@pytest.fixture(scope="module")
def sweep(disk64):
    """Radial eps sweep; its eps = 0.05 row is the criterion-4 run."""
    res, dt = _timed(eps_sweep, disk64, BoundaryData.constant([1.0]), LIN, [0.2, 0.1, 0.05],
                     SolverConfig())
    res.wall = dt
    return res


@pytest.fixture(scope="module")
def radial(sweep):
    row = sweep.rows[-1]
    assert row["status"] == "ok" and row["eps"] == 0.05
    return row["phase"], row["field"], row["report"]


@pytest.fixture(scope="module")
def radial_sg(disk64):
    return _timed(optimize, "shape_gradient", disk64, volume_seed_phase(disk64),
                  BoundaryData.constant([1.0]), LIN, PenaltyParams(0.05), SolverConfig())


ASYM = BoundaryData.fourier([[1.0, 0.3]])


@pytest.fixture(scope="module")
def asym(disk64):
    return _timed(optimize, "greedy", disk64, volume_seed_phase(disk64), ASYM, LIN,
                  PenaltyParams(0.05), SolverConfig())


@pytest.fixture(scope="module")
def asym_sg(disk64):
    return _timed(optimize, "shape_gradient", disk64, volume_seed_phase(disk64), ASYM, LIN,
                  PenaltyParams(0.05), SolverConfig())


M2_EPS = 2e-4  # below 1 / (marginal heat loss at vol 1) for p = 3 and phi = (1, 2)


@pytest.fixture(scope="module")
def disk32():
    return build_grid(DomainSpec(resolution=32, collar_width=0.1))


@pytest.fixture(scope="module", params=[2.0, 3.0], ids=["p2", "p3"])
def coop(request, disk32):
    p = request.param
    (res, dt) = _timed(optimize, "greedy", disk32, volume_seed_phase(disk32),
                       BoundaryData.constant([1.0, 2.0]), GammaModel.uniform(2),
                       PenaltyParams(M2_EPS), SolverConfig(p=p))
    return p, res, dt


# --------------------------------------------------------------------------
# 1-3: solver and closed forms


def _annulus_error(res, p):
    g = build_grid(DomainSpec(resolution=res, collar_width=0.1))
    ph = annulus_phase(g, R_F)
    u, _ = solve_component(g, ph, BoundaryData.constant([1.0]), SolverConfig(p=p))
    act = g.inside_mask & ph.chi
    exact = radial_profile(np.clip(radius(g)[act], R_F, 1), RadialConfig(p=p, r_inner=R_F))
    return float(np.abs(u[act] - exact).max() / np.abs(exact).max())


def test_c01_state_solver_p2():
    err, dt = _timed(_annulus_error, 128, 2)
    ok = err <= 5e-3 and dt < 10
    report(1, ok, f"p=2 annulus res 128: rel Linf {err:.3e} (<= 5e-3), {dt:.1f} s")
    assert ok


def test_c02_state_solver_p3():
    t0 = time.perf_counter()
    e64, e128 = _annulus_error(64, 3), _annulus_error(128, 3)
    dt = time.perf_counter() - t0
    ok = e128 <= 2e-2 and e64 / e128 >= 1.7 and dt < 60
    report(2, ok, f"p=3 annulus: rel Linf {e64:.3e} (res 64), {e128:.3e} (res 128), "
                  f"ratio {e64 / e128:.2f} (>= 1.7), {dt:.1f} s")
    assert ok


def test_c03_hopf_identity():
    rng = np.random.default_rng(0)
    worst = 0.0
    for p, lam in ((2, 4), (3, 6), (1.5, 8)):
        r = rng.uniform(0.4, 0.95, 50)
        t = rng.uniform(0, 2 * math.pi, 50)
        x = np.stack([r * np.cos(t), r * np.sin(t)], axis=1)
        exact = hopf_barrier_plap(x, lam, p)
        fd = plap_fd(lambda y: hopf_barrier(y, lam), x, p)
        worst = max(worst, float(np.max(np.abs(fd - exact) / np.abs(exact))))
    pos = True
    rr = np.linspace(0.5, 1.0, 201)
    for p in (1.5, 2.0, 3.0, 4.0, 6.0):
        lam = hopf_lambda_threshold(p) + 1
        for ang in np.linspace(0, 2 * math.pi, 8, endpoint=False):
            x = np.stack([rr * math.cos(ang), rr * math.sin(ang)], axis=1)
            pos &= bool(np.all(hopf_barrier_plap(x, lam, p) > 0))
    ok = worst <= 1e-3 and pos
    report(3, ok, f"Hopf closed form vs FD: worst rel error {worst:.2e} (<= 1e-3); "
                  f"positive above threshold: {pos}")
    assert ok


# --------------------------------------------------------------------------
# 4-7: optimisers


def test_c04_radial_ground_truth(disk64, radial, sweep):
    phase, fld, rep = radial
    h = disk64.h
    hd = hausdorff_to_circle(disk64, phase, R_F)
    C = sweep.checks["C_fit"]
    lo, hi = 1 - 4 * h * 2 * math.pi * R_F, 1 + C * 0.05
    vol = rep.final.volume
    ok_h, ok_v = hd <= 2 * h, lo <= vol <= hi
    ok = ok_h and ok_v and sweep.wall < 600
    r_eq = math.sqrt(max(math.pi - vol, 0) / math.pi)
    report(4, ok, f"radial eps=0.05 res 64: Hausdorff to r={R_F:.6f} is {hd / h:.2f} cells "
                  f"(<= 2); vol {vol:.4f} in [{lo:.4f}, {hi:.4f}] (C={C:.3f}): {ok_v}; "
                  f"equal-area radius {r_eq:.4f}")
    assert ok


def test_c04_supplement_small_eps(disk64):
    """Informational: at eps below 1/q^2 the volume constraint binds and the circle is recovered."""
    eps = 0.02
    (phase, fld, rep), dt = _timed(optimize, "greedy", disk64, volume_seed_phase(disk64),
                                   BoundaryData.constant([1.0]), LIN, PenaltyParams(eps),
                                   SolverConfig())
    hd = hausdorff_to_circle(disk64, phase, R_F)
    fb = rep.fb_stats
    line = (f"  info eps={eps}: vol {rep.final.volume:.4f}, Hausdorff {hd / disk64.h:.2f} cells, "
            f"fb mean {fb['mean']:.2f} (q^2={Q2:.2f}), rel std {fb['rel_std']:.3f}, {dt:.1f} s")
    CRITERIA.append(line)
    print(line)
    assert abs(rep.final.volume - 1) <= 4 * disk64.h * 2 * math.pi * R_F
    assert hd <= 2 * disk64.h


TOY_EPS = (0.2, 0.1, 0.05)
TOY_INFO_EPS = (0.9, 0.01, 0.006, 0.001)


def _toy_match(toy, eps):
    bd = BoundaryData.fourier([[1.0, 0.3]])
    params = PenaltyParams(eps)
    best, jb, _ = exhaustive_minimum(toy, bd, LIN, params, SolverConfig())
    out = []
    for start in (volume_seed_phase(toy), full_phase(toy)):
        ph, _, rep = optimize("greedy", toy, start, bd, LIN, params, SolverConfig())
        out.append(bool(np.array_equal(ph.chi, best.chi))
                   and abs(rep.final.value - jb.value) <= 1e-12 * abs(jb.value))
    return out


def test_c05_shape_gradient_vs_greedy(disk64, radial, radial_sg, asym, asym_sg):
    lines, ok = [], True
    gr = radial[2].final.value
    (_, _, rs), t_rs = radial_sg
    (_, _, ag), t_ag = asym
    (_, _, asg), t_asg = asym_sg
    for name, a, b in (("radial", gr, rs.final.value), ("asymmetric", ag.final.value,
                                                          asg.final.value)):
        d = abs(b - a) / a
        ok &= d <= 0.02
        lines.append(f"{name} J greedy {a:.4f} vs shape gradient {b:.4f} ({100 * d:.2f}%)")
    toy = build_grid(DomainSpec(shape="rectangle", lx=1.25, ly=1.25, resolution=16,
                                collar_width=0.55))
    n_free = int((toy.inside_mask & ~toy.collar_mask).sum())
    toy_ok = n_free == 4 and all(all(_toy_match(toy, e)) for e in TOY_EPS)
    ok &= toy_ok
    lines.append(f"toy 2x2 exhaustive match at eps {TOY_EPS} from both starts: {toy_ok}")
    wall = radial[2].wall_time + t_rs + t_ag + t_asg
    ok &= wall < 900
    report(5, ok, "; ".join(lines) + f"; {wall:.0f} s")
    info = {e: _toy_match(toy, e) for e in TOY_INFO_EPS}
    line = "  info toy match (seed start, full start) at other eps: " + ", ".join(
        f"{e}: {v}" for e, v in info.items())
    CRITERIA.append(line)
    print(line)
    assert ok


def test_c06_volume_adjustment(sweep, disk64):
    ch = sweep.checks
    rows = [r for r in sweep.rows if r["status"] == "ok"]
    ok = (ch["rows_ok"] == 3 and ch["volume_lower_bound"] and ch["excess_nonincreasing"]
          and ch["C_finite"] and sweep.wall < 1800)
    vols = ", ".join(f"{r['eps']}: {r['vol']:.4f}" for r in rows)
    report(6, ok, f"sweep vols {{{vols}}}; lower bound {ch['volume_lower_bound']}; "
                  f"excess nonincreasing {ch['excess_nonincreasing']}; C = {ch['C_fit']:.4f}; "
                  f"{sweep.wall:.0f} s")
    assert ok


def test_c07_free_boundary_condition(radial, asym):
    fb = radial[2].fb_stats
    fa = asym[0][2].fb_stats
    ok_std = fb["rel_std"] <= 0.10
    ok_mean = abs(fb["mean"] - Q2) / Q2 <= 0.10
    ok_asym = fa["rel_std"] <= 0.15
    ok = ok_std and ok_mean and ok_asym
    slope = PenaltyParams(0.05).slope_up(radial[2].final.volume)
    report(7, ok, f"radial fb rel std {fb['rel_std']:.3f} (<= 0.10): {ok_std}; mean "
                  f"{fb['mean']:.2f} vs q^2 {Q2:.2f} (10%): {ok_mean} [penalty slope "
                  f"{slope:.1f}]; asymmetric rel std {fa['rel_std']:.3f} (<= 0.15): {ok_asym}")
    assert ok


# --------------------------------------------------------------------------
# 8-10: properties of the computed minimisers


def test_c08_cooperative_supports(coop, disk32):
    p, (phase, fld, rep), dt = coop
    act = phase.chi & disk32.inside_mask
    thr = 1e-6 * fld.bdata.c0(disk32)
    sym = float(np.mean((fld.values[0] > thr)[act] != (fld.values[1] > thr)[act]))
    dev = float(np.abs(fld.values[1] - 2 * fld.values[0]).max())
    ok = sym <= 0.01 and (p != 2 or dev <= 1e-8) and dt < 600 and phase.zero_set(disk32).any()
    report(8, ok, f"m=2 phi=(1,2) p={p:g} res 32 eps={M2_EPS}: support sym diff {sym:.4f} "
                  f"(<= 0.01); max|u2-2u1| {dev:.1e}; vol {rep.final.volume:.4f}; "
                  f"{rep.termination} after {rep.iterations} steps; {dt:.1f} s")
    assert ok


def _runs(disk64, disk32, radial, radial_sg, asym, asym_sg, coop):
    out = [("radial greedy", disk64, radial[0], radial[1]),
           ("radial shape gradient", disk64, *radial_sg[0][:2]),
           ("asymmetric greedy", disk64, *asym[0][:2]),
           ("asymmetric shape gradient", disk64, *asym_sg[0][:2])]
    p, (ph, fl, _), _ = coop
    out.append((f"m=2 p={p:g}", disk32, ph, fl))
    return out


def test_c09_nondegeneracy_and_density(disk64, disk32, radial, radial_sg, asym, asym_sg, coop):
    ok, parts = True, []
    for name, g, ph, fl in _runs(disk64, disk32, radial, radial_sg, asym, asym_sg, coop):
        t0 = time.perf_counter()
        reps = {r.name: r for r in property_suite(g, ph, fl, radii=[4 * g.h, 8 * g.h])}
        nd, de = reps["nondegeneracy"], reps["density"]
        good = (nd.status == "pass" and nd.stats["c_est"] > 0 and nd.stats["C_over_c"] <= 50
                and de.status == "pass" and time.perf_counter() - t0 < 60)
        ok &= good
        parts.append(f"{name}: c {nd.stats.get('c_est', 0):.2f}, C/c "
                     f"{nd.stats.get('C_over_c', float('nan')):.2f}, density "
                     f"[{de.stats['min']:.3f}, {de.stats['max']:.3f}]")
    hp = build_grid(DomainSpec(shape="rectangle", lx=2, ly=2, resolution=64, collar_width=0.0))
    hph = Phase(hp.inside_mask & (hp.xy[..., 0] > 0))
    hp_ok = True
    for rc in (4, 8):
        r = rc * hp.h
        st = verify_density(hp, hph, [r]).stats["per_radius"][str(r)]
        hp_ok &= abs(st["min"] - 0.5) <= hp.h / r and abs(st["max"] - 0.5) <= hp.h / r
    ok &= hp_ok
    report(9, ok, "; ".join(parts) + f"; half-plane 0.5 +- h/r: {hp_ok}")
    assert ok


def test_c10_conservation(disk64, disk32, radial, radial_sg, asym, asym_sg, coop):
    ok, parts = True, []
    for name, g, ph, fl in _runs(disk64, disk32, radial, radial_sg, asym, asym_sg, coop):
        bal = flux_balance(fl, g)
        cap = 0.02 if fl.p == 2 else 0.05
        ok &= bal <= cap
        parts.append(f"{name}: {bal:.4f} (<= {cap})")
    report(10, ok, "flux balance " + "; ".join(parts))
    assert ok


# --------------------------------------------------------------------------
# 11: determinism through the CLI


def test_c11_determinism(tmp_path, monkeypatch):
    cfg = CONFIGS / "radial.json"
    outs, t0 = [], time.perf_counter()
    for k in range(2):
        d = tmp_path / f"run{k}"
        monkeypatch.setenv("OUTPUT_DIR", str(d))
        assert main(["solve", "--config", str(cfg)]) == 0
        outs.append(d)
    dt = time.perf_counter() - t0
    same_phase = (outs[0] / "phase.csv").read_bytes() == (outs[1] / "phase.csv").read_bytes()
    same_field = (outs[0] / "field.csv").read_bytes() == (outs[1] / "field.csv").read_bytes()
    j = [json.loads((d / "report.json").read_text())["J"] for d in outs]
    ok = same_phase and same_field and j[0] == j[1] and dt < 1200
    report(11, ok, f"two CLI runs of the radial config: phase.csv identical {same_phase}, "
                   f"field.csv identical {same_field}, J {j[0]!r} vs {j[1]!r}; {dt:.0f} s")
    assert ok
