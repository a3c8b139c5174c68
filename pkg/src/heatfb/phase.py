"""Support indicator (the set U where the temperature is positive).

A phase marks every interior cell as belonging to U (``chi`` True) or to the
zero set E. An optional ``level`` array places the U/E interface inside a
grid edge (positive in U, negative in E); without it the interface sits on
the cell face, halfway between nodes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .mesh import Grid

FOUR = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass(eq=False)
class Phase:
    chi: np.ndarray
    level: np.ndarray | None = None

    def copy(self) -> "Phase":
        return Phase(self.chi.copy(), None if self.level is None else self.level.copy())

    def n_active(self) -> int:
        return int(self.chi.sum())

    def vol(self, grid: Grid) -> float:
        return self.n_active() * grid.cell_area

    def zero_set(self, grid: Grid) -> np.ndarray:
        return grid.inside_mask & ~self.chi

    def key(self) -> bytes:
        return np.packbits(self.chi).tobytes()

    def free_boundary_cells(self, grid: Grid) -> np.ndarray:
        """U cells with at least one E cell among their four neighbours."""
        return self.chi & ndimage.binary_dilation(self.zero_set(grid), FOUR)

    def front_cells(self, grid: Grid) -> np.ndarray:
        """E cells with at least one U neighbour."""
        return self.zero_set(grid) & ndimage.binary_dilation(self.chi, FOUR)


def _anchor(grid: Grid) -> np.ndarray:
    if grid.collar_mask.any():
        return grid.collar_mask
    # no collar: anything next to the outer boundary anchors the support
    outside = ~grid.inside_mask
    return grid.inside_mask & ndimage.binary_dilation(outside, FOUR)


def enforce(grid: Grid, phase: Phase) -> tuple[Phase, int]:
    """Force the collar into U and drop U islands cut off from it.

    Returns the repaired phase and the number of cells changed.
    """
    chi = (phase.chi | grid.collar_mask) & grid.inside_mask
    labels, n = ndimage.label(chi, structure=FOUR)
    keep = np.unique(labels[_anchor(grid) & chi])
    keep = keep[keep > 0]
    chi = np.isin(labels, keep) & chi
    changed = int((chi != phase.chi).sum())
    level = phase.level if changed == 0 else None
    return Phase(chi, level), changed


def full_phase(grid: Grid) -> Phase:
    return Phase(grid.inside_mask.copy())


def phase_from_level(grid: Grid, level: np.ndarray) -> Phase:
    chi = grid.inside_mask & (level > 0)
    return Phase(chi, np.array(level, dtype=float))


def annulus_phase(grid: Grid, r_inner: float, exact: bool = True) -> Phase:
    """E = disk of radius ``r_inner`` about the origin.

    ``exact`` keeps the analytic circle as the interface (sub-cell accurate);
    otherwise the interface falls on cell faces.
    """
    r = np.hypot(grid.xy[..., 0], grid.xy[..., 1])
    level = r - r_inner
    if exact:
        return phase_from_level(grid, level)
    return Phase(grid.inside_mask & (level > 0))


def volume_seed_phase(grid: Grid, target: float = 1.0) -> Phase:
    """U = the ``target``-volume layer of cells nearest the outer boundary.

    Cells are ranked by distance to the boundary (ties by index), so the seed
    is deterministic. The collar always stays in U.
    """
    d = grid.dist_to_boundary().ravel()
    inside = grid.inside_mask.ravel()
    idx = np.flatnonzero(inside)
    order = idx[np.lexsort((idx, d[idx]))]
    n_keep = int(round(target / grid.cell_area))
    n_keep = min(max(n_keep, 0), idx.size)
    chi = np.zeros(grid.n_nodes, dtype=bool)
    chi[order[:n_keep]] = True
    chi = chi.reshape(grid.ny, grid.nx) | grid.collar_mask
    return enforce(grid, Phase(chi))[0]
