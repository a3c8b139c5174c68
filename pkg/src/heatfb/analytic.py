"""Closed-form radial solutions and the Gaussian barrier used as oracles."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RadialConfig:
    p: float = 2.0
    r_inner: float = math.sqrt(1 - 1 / math.pi)
    r_outer: float = 1.0
    phi: float = 1.0
    n: int = 2

    def __post_init__(self):
        if not 0 < self.r_inner < self.r_outer:
            raise ValueError("need 0 < r_inner < r_outer")
        if not self.phi > 0:
            raise ValueError("boundary value must be positive")
        if not self.p > 1:
            raise ValueError("p must exceed 1")


def _g(t, p, n, r0):
    """Radial p-harmonic function in n dimensions vanishing at r0."""
    t = np.asarray(t, dtype=float)
    if p == n:
        return np.log(t) - math.log(r0)
    a = (p - n) / (p - 1)
    if p > n:
        return t**a - r0**a
    return r0**a - t**a


def _dg(t, p, n):
    t = np.asarray(t, dtype=float)
    if p == n:
        return 1 / t
    a = (p - n) / (p - 1)
    return abs(a) * t ** (a - 1)


def radial_profile(t, cfg: RadialConfig):
    """u(t) = phi g(t) / g(R0), zero at the inner radius, phi at the outer."""
    t = np.asarray(t, dtype=float)
    lo, hi = cfg.r_inner, cfg.r_outer
    if np.any(t < lo * (1 - 1e-12)) or np.any(t > hi * (1 + 1e-12)):
        raise ValueError("radius outside [r_inner, r_outer]")
    return cfg.phi * _g(t, cfg.p, cfg.n, lo) / _g(hi, cfg.p, cfg.n, lo)


def radial_derivative(t, cfg: RadialConfig):
    return cfg.phi * _dg(t, cfg.p, cfg.n) / _g(cfg.r_outer, cfg.p, cfg.n, cfg.r_inner)


def radial_flux(r, cfg: RadialConfig):
    """A_nu u = |u'|^(p-2) u' at r, oriented away from the zero set (+r)."""
    du = radial_derivative(r, cfg)
    return np.abs(du) ** (cfg.p - 2) * du


def annulus_optimal_Rf(r_outer: float, target_vol: float = 1.0) -> float:
    """Inner radius of the annulus of area ``target_vol`` inside the disk."""
    if target_vol > math.pi * r_outer**2 + 1e-15 or target_vol < 0:
        raise ValueError("infeasible volume for this disk")
    return math.sqrt(max(r_outer**2 - target_vol / math.pi, 0.0))


def hopf_barrier(x, lam: float):
    """g(x) = exp(-lam |x|^2) - exp(-lam)."""
    x = np.asarray(x, dtype=float)
    r2 = np.sum(x * x, axis=-1)
    return np.exp(-lam * r2) - math.exp(-lam)


def hopf_barrier_plap(x, lam: float, p: float, n: int = 2):
    """Closed form of div(|grad g|^(p-2) grad g) for the barrier above:

    (2 lam)^(p-1) |x|^(p-2) (2 (p-1) lam |x|^2 - n - p + 2) exp(-(p-1) lam |x|^2)
    """
    x = np.asarray(x, dtype=float)
    r = np.sqrt(np.sum(x * x, axis=-1))
    if p < 2 and np.any(r == 0):
        raise ValueError("the p-Laplacian of the barrier is singular at the origin for p < 2")
    return (
        (2 * lam) ** (p - 1)
        * r ** (p - 2)
        * (2 * (p - 1) * lam * r * r - n - p + 2)
        * np.exp(-(p - 1) * lam * r * r)
    )


def hopf_lambda_threshold(p: float, n: int = 2) -> float:
    """Above this lam the barrier is strictly p-subharmonic on 1/2 <= |x| <= 1."""
    return 2 * (n + p - 2) / (p - 1)


def plap_fd(fun, x, p: float, step: float = 1e-3):
    """Centred finite-difference div(|grad f|^(p-2) grad f) at points x (K, 2).

    Fluxes are evaluated at half-step points, their gradients by centred
    differences of ``fun``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    hs = step / 2

    def flux(pt, axis):
        ex = np.array([hs, 0.0])
        ey = np.array([0.0, hs])
        gx = (fun(pt + ex) - fun(pt - ex)) / step
        gy = (fun(pt + ey) - fun(pt - ey)) / step
        mag = np.sqrt(gx * gx + gy * gy)
        return mag ** (p - 2) * (gx if axis == 0 else gy)

    out = np.zeros(x.shape[0])
    for axis in (0, 1):
        e = np.zeros(2)
        e[axis] = hs
        out += (flux(x + e, axis) - flux(x - e, axis)) / step
    return out
