"""Command-line entry points: solve, sweep, verify, reference."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis, analytic
from .functional import GammaModel, PenaltyParams, Profile, j_eps
from .mesh import DomainSpec, Grid, build_grid
from .optimize import OptimizeConfig, optimize
from .phase import Phase, annulus_phase, enforce, full_phase, volume_seed_phase
from .plap import BoundaryData, Field, SolverConfig, SolverError, free_flux, outer_flux

log = logging.getLogger("heatfb")

EXIT_OK, EXIT_SOLVER, EXIT_CONFIG = 0, 2, 3


class ConfigError(ValueError):
    pass


def fmt(v) -> str:
    return f"{float(v):.17g}"


# --------------------------------------------------------------------------
# configuration


def _strict(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    extra = sorted(set(data) - names)
    if extra:
        raise ConfigError(f"{where}: unknown keys {extra}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass(frozen=True)
class BoundarySpec:
    kind: str = "constant"  # or "fourier"
    values: tuple = (1.0,)  # constant: one value per component
    coeffs: tuple = ((1.0, 0.0),)  # fourier: (a0, a1) per component

    def build(self, m: int) -> BoundaryData:
        if self.kind == "constant":
            vals = [float(v) for v in self.values]
            if len(vals) != m:
                raise ConfigError(f"boundary: {len(vals)} values for m = {m}")
            if min(vals) <= 0:
                raise ConfigError("boundary: values must be positive")
            return BoundaryData.constant(vals)
        if self.kind == "fourier":
            cs = [tuple(float(x) for x in c) for c in self.coeffs]
            if len(cs) != m or any(len(c) != 2 for c in cs):
                raise ConfigError(f"boundary: need {m} (a0, a1) pairs")
            if any(a0 - abs(a1) <= 0 for a0, a1 in cs):
                raise ConfigError("boundary: a0 - |a1| must be positive")
            return BoundaryData.fourier(cs)
        raise ConfigError(f"boundary: unknown kind {self.kind!r}")


@dataclass(frozen=True)
class GammaSpec:
    profiles: tuple = ({"kind": "linear", "a": 1.0},)
    psi: tuple = (1.0,)

    def build(self, m: int) -> GammaModel:
        profs = [_strict(Profile, dict(p), "gamma.profiles") for p in self.profiles]
        psi = [float(w) for w in self.psi]
        if len(profs) == 1 and m > 1:
            profs = profs * m
        if len(psi) == 1 and m > 1:
            psi = psi * m
        if len(profs) != m or len(psi) != m:
            raise ConfigError(f"gamma: need 1 or {m} profiles and psi weights")
        try:
            return GammaModel(tuple(profs), tuple(psi))
        except ValueError as exc:
            raise ConfigError(f"gamma: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    domain: dict = field(default_factory=dict)
    boundary: dict = field(default_factory=dict)
    gamma: dict = field(default_factory=dict)
    p: float = 2.0
    m: int = 1
    eps: float = 0.05
    eps_list: tuple = (0.2, 0.1, 0.05)
    optimizer: str = "greedy"  # greedy, shape_gradient or both
    initial_phase: str = "volume_seed"  # volume_seed, full or annulus:<radius>
    solver: dict = field(default_factory=dict)
    optimize: dict = field(default_factory=dict)
    output_dir: str = "runs/latest"
    seed: int = 0

    # built pieces
    def domain_spec(self) -> DomainSpec:
        spec = _strict(DomainSpec, self.domain, "domain")
        try:
            spec.validate()
        except ValueError as exc:
            raise ConfigError(f"domain: {exc}") from exc
        return spec

    def bdata(self) -> BoundaryData:
        return _strict(BoundarySpec, self.boundary, "boundary").build(self.m)

    def model(self) -> GammaModel:
        return _strict(GammaSpec, self.gamma, "gamma").build(self.m)

    def solver_cfg(self) -> SolverConfig:
        return _strict(SolverConfig, {"p": self.p, **self.solver}, "solver")

    def opt_cfg(self) -> OptimizeConfig:
        return _strict(OptimizeConfig, self.optimize, "optimize")

    def params(self, eps=None) -> PenaltyParams:
        return _strict(PenaltyParams, {"eps": self.eps if eps is None else eps}, "eps")

    def start_phase(self, grid: Grid) -> Phase:
        ip = self.initial_phase
        if ip == "volume_seed":
            return volume_seed_phase(grid)
        if ip == "full":
            return full_phase(grid)
        if ip.startswith("annulus:"):
            r = float(ip.split(":", 1)[1])
            return enforce(grid, annulus_phase(grid, r, exact=False))[0]
        raise ConfigError(f"initial_phase: unknown value {ip!r}")

    def validate(self):
        if self.optimizer not in ("greedy", "shape_gradient", "both"):
            raise ConfigError(f"optimizer: unknown value {self.optimizer!r}")
        if self.optimizer != "greedy" and self.p != 2:
            raise ConfigError("optimizer: shape_gradient requires p = 2")
        if not isinstance(self.m, int) or self.m < 1:
            raise ConfigError("m must be a positive integer")
        if not isinstance(self.seed, int):
            raise ConfigError("seed must be an integer")
        if not self.eps_list:
            raise ConfigError("eps_list must be nonempty")
        self.domain_spec()
        self.bdata()
        self.model()
        self.solver_cfg()
        self.opt_cfg()
        self.params()
        for e in self.eps_list:
            self.params(e)
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    for key in ("eps_list",):
        if key in data and isinstance(data[key], list):
            data[key] = tuple(data[key])
    return _strict(RunConfig, data, "config").validate()


def out_dir(cfg: RunConfig) -> Path:
    d = Path(os.environ.get("OUTPUT_DIR") or cfg.output_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


# --------------------------------------------------------------------------
# file formats


def write_field(path, grid: Grid, fld: Field):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "x", "y", "inside", "chi"] + [f"u{k}" for k in range(fld.m)])
        chi = fld.phase.chi
        for j in range(grid.ny):
            for i in range(grid.nx):
                x, y = grid.xy[j, i]
                w.writerow([i, j, fmt(x), fmt(y), int(grid.inside_mask[j, i]), int(chi[j, i])]
                           + [fmt(fld.values[k, j, i]) for k in range(fld.m)])


def write_phase(path, grid: Grid, phase: Phase):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "x", "y", "chi"])
        for j in range(grid.ny):
            for i in range(grid.nx):
                if grid.inside_mask[j, i]:
                    x, y = grid.xy[j, i]
                    w.writerow([i, j, fmt(x), fmt(y), int(phase.chi[j, i])])


def read_phase(path, grid: Grid) -> Phase:
    chi = np.zeros((grid.ny, grid.nx), dtype=bool)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or set(rows[0]) != {"i", "j", "x", "y", "chi"}:
        raise ConfigError("phase.csv: bad header")
    for r in rows:
        try:
            i, j, c = int(r["i"]), int(r["j"]), int(r["chi"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"phase.csv: bad row {r}") from exc
        if not (0 <= i < grid.nx and 0 <= j < grid.ny) or c not in (0, 1):
            raise ConfigError("phase.csv: bad row")
        chi[j, i] = bool(c)
    return Phase(chi & grid.inside_mask)


def read_field(path, grid: Grid, m: int) -> np.ndarray:
    vals = np.zeros((m, grid.ny, grid.nx))
    with open(path, newline="") as fh:
        rdr = csv.DictReader(fh)
        cols = [f"u{k}" for k in range(m)]
        if rdr.fieldnames is None or any(c not in rdr.fieldnames for c in cols):
            raise ConfigError("field.csv: bad header")
        n = 0
        for r in rdr:
            try:
                i, j = int(r["i"]), int(r["j"])
                for k, c in enumerate(cols):
                    vals[k, j, i] = float(r[c])
            except (TypeError, ValueError, IndexError) as exc:
                raise ConfigError(f"field.csv: bad row {r}") from exc
            n += 1
    if n != grid.nx * grid.ny:
        raise ConfigError("field.csv: wrong row count")
    return vals


def write_fluxes(path, grid: Grid, fld: Field):
    traces = [outer_flux(fld, grid)]
    if fld.phase.zero_set(grid).any():
        traces.append(free_flux(fld, grid))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["location", "x", "y", "nx", "ny", "ds"] + [f"A_nu_u{k}" for k in range(fld.m)])
        for tr in traces:
            for k in range(tr.n):
                w.writerow([tr.location, fmt(tr.points[k, 0]), fmt(tr.points[k, 1]),
                            fmt(tr.normals[k, 0]), fmt(tr.normals[k, 1]), fmt(tr.ds[k])]
                           + [fmt(tr.values[c, k]) for c in range(fld.m)])


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    raise TypeError(f"not serialisable: {type(o)}")


def _clean(o):
    """Replace non-finite floats so the JSON stays standard."""
    if isinstance(o, float):
        return o if math.isfinite(o) else None
    if isinstance(o, dict):
        return {k: _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    return o


def write_json(path, obj):
    txt = json.dumps(_clean(json.loads(json.dumps(obj, default=_json_default))), indent=2)
    Path(path).write_text(txt + "\n")


def _svg_boundary(path, grid: Grid, fld: Field):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    mag = np.linalg.norm(fld.values, axis=0)
    mag = np.where(grid.inside_mask, mag, np.nan)
    fig, ax = plt.subplots(figsize=(5, 5))
    x, y = grid.xy[..., 0], grid.xy[..., 1]
    pc = ax.pcolormesh(x, y, mag, shading="nearest", cmap="viridis")
    fig.colorbar(pc, ax=ax, label="|u|")
    bp = grid.boundary_points
    order = np.argsort(grid.boundary_s)
    loop = np.vstack([bp[order], bp[order][:1]])
    ax.plot(loop[:, 0], loop[:, 1], "k-", lw=1, label="outer boundary")
    E = fld.phase.zero_set(grid)
    if E.any():
        ax.contour(x, y, E.astype(float), levels=[0.5], colors="r", linewidths=1)
    ax.set_aspect("equal")
    ax.set_title("support and free boundary")
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _svg_sweep(path, rows):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ok = [r for r in rows if r["status"] == "ok"]
    fig, ax = plt.subplots(figsize=(5, 4))
    if ok:
        ax.plot([r["eps"] for r in ok], [r["vol"] for r in ok], "o-")
    ax.axhline(1.0, color="k", lw=0.8, ls="--")
    ax.set_xlabel("eps")
    ax.set_ylabel("volume of the support")
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# --------------------------------------------------------------------------
# commands


def _report_dict(rep, jb, props, cfg: RunConfig, extra=None):
    d = {
        "J": jb.value,
        "heat_loss": jb.heat_loss,
        "penalty": jb.penalty,
        "volume": jb.volume,
        "coercivity_gap": jb.coercivity_gap,
        "method": rep.method,
        "termination": rep.termination,
        "iterations": rep.iterations,
        "added": rep.added,
        "removed": rep.removed,
        "pruned": rep.pruned,
        "accept_tol": rep.accept_tol,
        "energy_trace": rep.energy_trace,
        "volume_trace": rep.volume_trace,
        "wall_time": rep.wall_time,
        "notes": rep.notes,
        "fb_stats": rep.fb_stats,
        "properties": [p.to_dict() for p in props],
        "seed": cfg.seed,
    }
    if extra:
        d.update(extra)
    return d


def run_one(cfg: RunConfig, grid: Grid, eps: float, dest: Path):
    bdata, model = cfg.bdata(), cfg.model()
    scfg, ocfg = cfg.solver_cfg(), cfg.opt_cfg()
    params = cfg.params(eps)
    start = cfg.start_phase(grid)
    methods = ["greedy", "shape_gradient"] if cfg.optimizer == "both" else [cfg.optimizer]
    results = {}
    for meth in methods:
        results[meth] = optimize(meth, grid, start, bdata, model, params, scfg, ocfg)
    best = min(methods, key=lambda k: (results[k][2].final.value, methods.index(k)))
    phase, fld, rep = results[best]
    props = analysis.property_suite(grid, phase, fld, model)
    extra = {"eps": eps, "p": cfg.p, "m": cfg.m, "h": grid.h}
    if len(methods) > 1:
        extra["compare"] = {k: results[k][2].final.value for k in methods}
        extra["selected"] = best
    dest.mkdir(parents=True, exist_ok=True)
    write_field(dest / "field.csv", grid, fld)
    write_phase(dest / "phase.csv", grid, phase)
    write_fluxes(dest / "fluxes.csv", grid, fld)
    write_json(dest / "report.json", _report_dict(rep, rep.final, props, cfg, extra))
    _svg_boundary(dest / "boundary.svg", grid, fld)
    return phase, fld, rep


def cmd_solve(args) -> int:
    cfg = load_config(args.config)
    dest = out_dir(cfg)
    write_json(dest / "config.json", cfg.to_dict())
    grid = build_grid(cfg.domain_spec())
    _, _, rep = run_one(cfg, grid, cfg.eps, dest)
    print(f"J_eps = {fmt(rep.final.value)}  vol = {fmt(rep.final.volume)}  "
          f"({rep.termination}, {rep.iterations} steps) -> {dest}")
    return EXIT_OK


def _row_job(payload):
    cfg_dict, eps, dest = payload
    cfg = RunConfig(**cfg_dict)
    grid = build_grid(cfg.domain_spec())
    import time

    t0 = time.perf_counter()
    try:
        phase, fld, rep = run_one(cfg, grid, eps, Path(dest))
    except Exception as exc:  # recorded per row
        return {"eps": eps, "status": f"error: {exc}", "wall_time": time.perf_counter() - t0}
    fb = rep.fb_stats or {}
    return {
        "eps": eps, "status": "ok", "vol": rep.final.volume, "J": rep.final.value,
        "heat_loss": rep.final.heat_loss, "penalty": rep.final.penalty,
        "perimeter_E": analysis.free_boundary_perimeter(grid, phase),
        "fb_mean": fb.get("mean", float("nan")), "fb_rel_std": fb.get("rel_std", float("nan")),
        "iterations": rep.iterations, "termination": rep.termination,
        "wall_time": time.perf_counter() - t0,
    }


SWEEP_COLS = ["eps", "status", "vol", "J", "heat_loss", "penalty", "perimeter_E", "fb_mean",
              "fb_rel_std", "iterations", "termination", "wall_time"]


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    dest = out_dir(cfg)
    write_json(dest / "config.json", cfg.to_dict())
    eps_list = [float(e) for e in cfg.eps_list]
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ConfigError("eps_list must be strictly decreasing")
    grid = build_grid(cfg.domain_spec())
    payload = [(cfg.to_dict(), e, str(dest / f"eps_{e:g}")) for e in eps_list]
    if args.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            rows = list(ex.map(_row_job, payload))
    else:
        rows = [_row_job(p) for p in payload]
    with open(dest / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLS)
        for r in rows:
            w.writerow([fmt(r[c]) if isinstance(r.get(c), float) else r.get(c, "")
                        for c in SWEEP_COLS])
    checks = analysis.sweep_checks(grid, rows)
    write_json(dest / "sweep.json", {"rows": rows, "checks": checks})
    _svg_sweep(dest / "sweep.svg", rows)
    for r in rows:
        print(f"eps={r['eps']:g} {r['status']}" + (f" vol={r['vol']:.6f} J={r['J']:.6f}"
                                                   if r["status"] == "ok" else ""))
    print(f"fitted C = {checks['C_fit']:.6g}")
    return EXIT_SOLVER if checks["rows_ok"] == 0 else EXIT_OK


def cmd_verify(args) -> int:
    run = Path(args.run_dir)
    try:
        cfg = _strict(RunConfig, json.loads((run / "config.json").read_text()), "config")
        cfg = dataclasses.replace(cfg, eps_list=tuple(cfg.eps_list)).validate()
        report = json.loads((run / "report.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read run directory: {exc}") from exc
    grid = build_grid(cfg.domain_spec())
    phase = read_phase(run / "phase.csv", grid)
    values = read_field(run / "field.csv", grid, cfg.m)
    eps = report.get("eps", cfg.eps)
    props = []
    repaired, changed = enforce(grid, phase)
    if changed:
        props.append(analysis.PropertyReport(
            "support_connectivity", "fail", {"cells_changed": changed}, int(phase.n_active()),
            {}, {"node": int(np.flatnonzero((repaired.chi != phase.chi).ravel())[0])}))
    else:
        props.append(analysis.PropertyReport("support_connectivity", "pass", {}, phase.n_active()))
    off = np.abs(values[:, ~(phase.chi & grid.inside_mask)]).max(initial=0.0)
    fld = Field(values, phase, cfg.bdata(), cfg.p)
    props.append(analysis.PropertyReport(
        "field_vanishes_off_support", "pass" if off <= 1e-10 else "fail", {"max_abs": off},
        int((~phase.chi).sum()), {}, None if off <= 1e-10 else {"max_abs": off}))
    props += analysis.property_suite(grid, phase, fld, cfg.model())
    out = {"properties": [p.to_dict() for p in props]}
    try:
        jb = j_eps(fld, phase, grid, cfg.model(), cfg.params(eps), cfg.p)
        out["J_reloaded"] = jb.value
        out["J_reported"] = report.get("J")
        out["J_roundtrip_error"] = abs(jb.value - report["J"]) if "J" in report else None
    except ValueError as exc:
        out["J_reloaded"] = None
        out["J_error"] = str(exc)
    out["all_pass"] = all(p.passed for p in props)
    out["inconclusive"] = [p.name for p in props if p.status == "inconclusive"]
    write_json(run / "verify.json", out)
    for p in props:
        print(f"{p.name}: {p.status}")
    return EXIT_OK if out["all_pass"] else 1


def _parse_params(items, allowed):
    out = {}
    for it in items:
        if "=" not in it:
            raise ConfigError(f"parameter {it!r} is not key=value")
        k, v = it.split("=", 1)
        if k not in allowed:
            raise ConfigError(f"unknown parameter {k!r}; allowed: {sorted(allowed)}")
        try:
            out[k] = float(v)
        except ValueError as exc:
            raise ConfigError(f"parameter {k!r} is not a number") from exc
    return out


def cmd_reference(args) -> int:
    w = csv.writer(sys.stdout, lineterminator="\n")
    if args.kind == "annulus":
        prm = {"r_outer": 1.0, "vol": 1.0, "p": 2.0, "phi": 1.0, "samples": 11}
        prm.update(_parse_params(args.params, set(prm)))
        try:
            rf = analytic.annulus_optimal_Rf(prm["r_outer"], prm["vol"])
            rc = analytic.RadialConfig(p=prm["p"], r_inner=rf, r_outer=prm["r_outer"],
                                       phi=prm["phi"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        fo = float(analytic.radial_flux(rc.r_outer, rc))
        fi = float(analytic.radial_flux(rf, rc))
        w.writerow(["R_f", "r_outer", "vol", "p", "phi", "flux_outer", "flux_inner",
                    "heat_loss_linear"])
        w.writerow([fmt(rf), fmt(rc.r_outer), fmt(prm["vol"]), fmt(rc.p), fmt(rc.phi), fmt(fo),
                    fmt(fi), fmt(2 * math.pi * rc.r_outer * fo)])
        w.writerow([])
        w.writerow(["r", "u", "A_nu_u"])
        for r in np.linspace(rf, rc.r_outer, int(prm["samples"])):
            w.writerow([fmt(r), fmt(analytic.radial_profile(r, rc)),
                        fmt(analytic.radial_flux(r, rc))])
        return EXIT_OK
    if args.kind == "hopf":
        prm = {"p": 2.0, "lam": 4.0, "n": 2.0, "samples": 11}
        prm.update(_parse_params(args.params, set(prm)))
        if not prm["p"] > 1 or not prm["lam"] > 0:
            raise ConfigError("hopf needs p > 1 and lam > 0")
        w.writerow(["abs_x", "g", "plap_g", "lambda_threshold"])
        thr = analytic.hopf_lambda_threshold(prm["p"], int(prm["n"]))
        for r in np.linspace(0.5, 1.0, int(prm["samples"])):
            x = np.array([[r, 0.0]])
            w.writerow([fmt(r), fmt(analytic.hopf_barrier(x, prm["lam"])[0]),
                        fmt(analytic.hopf_barrier_plap(x, prm["lam"], prm["p"], int(prm["n"]))[0]),
                        fmt(thr)])
        return EXIT_OK
    raise ConfigError(f"unknown reference kind {args.kind!r} (annulus or hopf)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="heatfb", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    s = sub.add_parser("solve", help="run one optimisation")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_solve)
    s = sub.add_parser("sweep", help="run the eps list")
    s.add_argument("--config", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_sweep)
    s = sub.add_parser("verify", help="re-check a run directory")
    s.add_argument("run_dir")
    s.set_defaults(func=cmd_verify)
    s = sub.add_parser("reference", help="closed-form values as CSV")
    s.add_argument("kind")
    s.add_argument("params", nargs="*", help="key=value")
    s.set_defaults(func=cmd_reference)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, ValueError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except NotImplementedError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
