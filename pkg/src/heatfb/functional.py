"""Heat-loss integrand, volume penalty and the penalised energy J_eps."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import Grid
from .phase import Phase
from .plap import Field, FluxTrace, outer_flux


@dataclass(frozen=True)
class Profile:
    """One-dimensional heat-loss profile gamma(s).

    kind is "linear" (a s), "power" (a s^k, k >= 1) or "exp" (a (e^{b s} - 1)).
    """

    kind: str = "linear"
    a: float = 1.0
    k: float = 2.0
    b: float = 1.0

    def __post_init__(self):
        if self.kind not in ("linear", "power", "exp"):
            raise ValueError(f"unknown profile {self.kind!r}")
        if not self.a > 0:
            raise ValueError("profile coefficient a must be positive")
        if self.kind == "power" and not self.k >= 1:
            raise ValueError("power profile needs k >= 1")
        if self.kind == "exp" and not self.b > 0:
            raise ValueError("exp profile needs b > 0")

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        if self.kind == "linear":
            return self.a * s
        if self.kind == "power":
            return self.a * np.abs(s) ** self.k
        return self.a * np.expm1(self.b * s)

    def deriv(self, s):
        s = np.asarray(s, dtype=float)
        if self.kind == "linear":
            return np.full(s.shape, self.a)
        if self.kind == "power":
            return self.a * self.k * np.abs(s) ** (self.k - 1)
        return self.a * self.b * np.exp(self.b * s)


@dataclass(frozen=True)
class GammaModel:
    """Separable Gamma(x, xi) = sum_i psi_i(x) gamma_i(xi_i).

    ``psi`` holds one entry per component: a positive constant or a callable
    of boundary points (K, 2) returning (K,) positive weights.
    """

    profiles: tuple = (Profile(),)
    psi: tuple = (1.0,)

    def __post_init__(self):
        if len(self.profiles) != len(self.psi):
            raise ValueError("need one psi per profile")
        for w in self.psi:
            if not callable(w) and not w > 0:
                raise ValueError("psi weights must be positive")

    @property
    def m(self) -> int:
        return len(self.profiles)

    @classmethod
    def uniform(cls, m: int, profile: Profile = Profile(), psi: float = 1.0):
        return cls(tuple([profile] * m), tuple([psi] * m))

    def weights(self, pts) -> np.ndarray:
        """(m, K) psi values at boundary points; must be positive."""
        pts = np.asarray(pts, dtype=float)
        out = np.stack(
            [np.asarray(w(pts), dtype=float) if callable(w) else np.full(len(pts), float(w))
             for w in self.psi]
        )
        if np.any(out <= 0):
            raise ValueError("psi must be positive at every boundary node")
        return out

    def check_profiles(self, max_flux: float, n: int = 100) -> None:
        """gamma' > 0 and nondecreasing secant slopes on [0, 2 max_flux].

        gamma'(0) = 0 is allowed (power profiles with k > 1 still increase strictly).
        """
        s = np.linspace(0.0, 2 * max(max_flux, 1e-12), n)
        for prof in self.profiles:
            d = prof.deriv(s)
            if d[0] < 0 or np.any(d[1:] <= 0):
                raise ValueError(f"{prof.kind} profile is not strictly increasing")
            sec = np.diff(prof(s)) / np.diff(s)
            if np.any(np.diff(sec) < -1e-9 * np.abs(sec[1:]).max()):
                raise ValueError(f"{prof.kind} profile is not convex")


def gamma_eval(model: GammaModel, x, xi) -> np.ndarray:
    """Gamma at points x (K, 2) with fluxes xi (m, K). Scalar input is accepted."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    xi = np.asarray(xi, dtype=float).reshape(model.m, -1)
    w = model.weights(x)
    return sum(w[i] * model.profiles[i](xi[i]) for i in range(model.m))


def gamma_grad(model: GammaModel, x, xi) -> np.ndarray:
    """d Gamma / d xi_i, shape (m, K)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    xi = np.asarray(xi, dtype=float).reshape(model.m, -1)
    w = model.weights(x)
    return np.stack([w[i] * model.profiles[i].deriv(xi[i]) for i in range(model.m)])


def coercivity_gap(model: GammaModel, x, xi) -> float:
    """min of Gamma(x, xi) - sum psi_i gamma_i'(0) xi_i - Gamma(x, 0); >= 0 for convex gamma."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    xi = np.asarray(xi, dtype=float).reshape(model.m, -1)
    w = model.weights(x)
    lin = sum(w[i] * model.profiles[i].deriv(np.zeros(1))[0] * xi[i] for i in range(model.m))
    gap = gamma_eval(model, x, xi) - lin - gamma_eval(model, x, np.zeros_like(xi))
    return float(gap.min()) if gap.size else 0.0


@dataclass(frozen=True)
class PenaltyParams:
    eps: float = 0.1
    target_volume: float = 1.0

    def __post_init__(self):
        if not 0 < self.eps < 1:
            raise ValueError("eps must lie in (0, 1)")
        if self.target_volume != 1.0:
            raise ValueError("the target volume is fixed at 1")

    def slope_up(self, t: float) -> float:
        """Right derivative of f_eps at t."""
        return 1 / self.eps if t >= self.target_volume else self.eps

    def slope_down(self, t: float) -> float:
        """Left derivative of f_eps at t."""
        return 1 / self.eps if t > self.target_volume else self.eps


def f_eps(t, params: PenaltyParams):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("volume must be nonnegative")
    d = t - params.target_volume
    out = 1 + np.where(d >= 0, d / params.eps, params.eps * d)
    return float(out) if out.ndim == 0 else out


def heat_loss(trace: FluxTrace, model: GammaModel, grid: Grid | None = None) -> float:
    """Boundary quadrature sum_k Gamma(x_k, A_nu u(x_k)) ds_k over the outer boundary."""
    if trace.location != "outer":
        raise ValueError("heat loss is an outer-boundary integral")
    expected = grid.boundary_points.shape[0] if grid is not None else trace.n
    if trace.dropped or trace.n != expected:
        raise ValueError(f"flux trace misses {trace.dropped or expected - trace.n} boundary samples")
    if trace.values.shape[0] != model.m:
        raise ValueError("flux components do not match the Gamma model")
    return float(gamma_eval(model, trace.points, trace.values) @ trace.ds)


@dataclass
class JBreakdown:
    value: float
    heat_loss: float
    penalty: float
    volume: float
    coercivity_gap: float = 0.0
    extras: dict = field(default_factory=dict)


def j_eps(field_: Field, phase: Phase, grid: Grid, model: GammaModel, params: PenaltyParams,
          p: float | None = None, trace: FluxTrace | None = None) -> JBreakdown:
    trace = trace or outer_flux(field_, grid, p)
    hl = heat_loss(trace, model, grid)
    vol = phase.vol(grid)
    pen = f_eps(vol, params)
    gap = coercivity_gap(model, trace.points, trace.values)
    if gap < -1e-10 * max(1.0, abs(hl)):
        raise ValueError(f"coercivity witness violated by {gap:.3e}")
    return JBreakdown(hl + pen, hl, pen, vol, gap)
