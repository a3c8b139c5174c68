"""Structured 2-D grids over a disk or a rectangle.

Nodes sit on a uniform lattice of spacing ``h``. Each node also owns the
square control cell of side ``h`` centred on it, so "cell" and "node" share
an index. Interior nodes come from a staircase mask; boundary quadrature uses
the analytic shape (projected points, exact normals, arc-length weights).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree


class Disk:
    kind = "disk"

    def __init__(self, radius: float):
        self.radius = float(radius)

    @property
    def area(self) -> float:
        return math.pi * self.radius**2

    @property
    def perimeter(self) -> float:
        return 2 * math.pi * self.radius

    @property
    def diameter(self) -> float:
        return 2 * self.radius

    def bbox(self):
        r = self.radius
        return -r, r, -r, r

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        """Signed distance, negative inside."""
        return np.hypot(pts[..., 0], pts[..., 1]) - self.radius

    def project(self, pts: np.ndarray):
        r = np.hypot(pts[..., 0], pts[..., 1])
        nrm = pts / r[..., None]
        return self.radius * nrm, nrm

    def arclength(self, pts: np.ndarray) -> np.ndarray:
        theta = np.arctan2(pts[..., 1], pts[..., 0]) % (2 * math.pi)
        return self.radius * theta

    def crossing(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Fraction t in (0, 1] with |a + t(b - a)| = R, for a inside, b outside."""
        d = b - a
        qa = np.einsum("...i,...i", d, d)
        qb = 2 * np.einsum("...i,...i", a, d)
        qc = np.einsum("...i,...i", a, a) - self.radius**2
        t = (-qb + np.sqrt(qb * qb - 4 * qa * qc)) / (2 * qa)
        return np.clip(t, 0.0, 1.0)


class Rectangle:
    kind = "rectangle"

    def __init__(self, lx: float, ly: float):
        self.lx = float(lx)
        self.ly = float(ly)

    @property
    def area(self) -> float:
        return self.lx * self.ly

    @property
    def perimeter(self) -> float:
        return 2 * (self.lx + self.ly)

    @property
    def diameter(self) -> float:
        return math.hypot(self.lx, self.ly)

    def bbox(self):
        return -self.lx / 2, self.lx / 2, -self.ly / 2, self.ly / 2

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        qx = np.abs(pts[..., 0]) - self.lx / 2
        qy = np.abs(pts[..., 1]) - self.ly / 2
        outside = np.hypot(np.maximum(qx, 0), np.maximum(qy, 0))
        return outside + np.minimum(np.maximum(qx, qy), 0)

    def project(self, pts: np.ndarray, corner_tol: float = 0.0):
        """Nearest boundary point; within ``corner_tol`` of both sides -> corner."""
        x, y = pts[..., 0], pts[..., 1]
        ax, ay = self.lx / 2, self.ly / 2
        sx = np.where(x >= 0, 1.0, -1.0)
        sy = np.where(y >= 0, 1.0, -1.0)
        cx = np.abs(x) - ax
        cy = np.abs(y) - ay
        eps = 1e-12 * max(ax, ay)
        corner = (cx >= -eps) & (cy >= -eps) & (cx <= corner_tol) & (cy <= corner_tol)
        use_x = (cx >= cy) & ~corner
        use_y = ~use_x & ~corner
        proj = np.empty_like(pts, dtype=float)
        nrm = np.zeros_like(pts, dtype=float)
        proj[..., 0] = np.where(use_x | corner, sx * ax, np.clip(x, -ax, ax))
        proj[..., 1] = np.where(use_y | corner, sy * ay, np.clip(y, -ay, ay))
        nrm[..., 0] = np.where(use_x, sx, 0.0) + np.where(corner, sx / math.sqrt(2), 0.0)
        nrm[..., 1] = np.where(use_y, sy, 0.0) + np.where(corner, sy / math.sqrt(2), 0.0)
        return proj, nrm

    def arclength(self, pts: np.ndarray) -> np.ndarray:
        # counter-clockwise from the corner (ax, -ay)
        x, y = pts[..., 0], pts[..., 1]
        ax, ay = self.lx / 2, self.ly / 2
        tol = 1e-9 * max(ax, ay)
        s = np.empty(x.shape)
        right = np.abs(x - ax) <= tol
        top = ~right & (np.abs(y - ay) <= tol)
        left = ~right & ~top & (np.abs(x + ax) <= tol)
        bottom = ~right & ~top & ~left
        s[right] = y[right] + ay
        s[top] = self.ly + (ax - x[top])
        s[left] = self.ly + self.lx + (ay - y[left])
        s[bottom] = 2 * self.ly + self.lx + (x[bottom] + ax)
        return s % self.perimeter

    def crossing(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        d = b - a
        ax, ay = self.lx / 2, self.ly / 2
        t = np.ones(a.shape[:-1])
        with np.errstate(divide="ignore", invalid="ignore"):
            for comp, half in ((0, ax), (1, ay)):
                dc = d[..., comp]
                tp = np.where(dc > 0, (half - a[..., comp]) / dc, np.inf)
                tm = np.where(dc < 0, (-half - a[..., comp]) / dc, np.inf)
                t = np.minimum(t, np.minimum(tp, tm))
        return np.clip(t, 0.0, 1.0)


@dataclass(frozen=True)
class DomainSpec:
    shape: str = "disk"
    radius: float = 1.0
    lx: float = 2.0
    ly: float = 2.0
    resolution: int = 64
    collar_width: float = 0.1

    def make_shape(self):
        if self.shape == "disk":
            return Disk(self.radius)
        if self.shape == "rectangle":
            return Rectangle(self.lx, self.ly)
        raise ValueError(f"unknown shape {self.shape!r}")

    def validate(self):
        shp = self.make_shape()
        if shp.area <= 1.0:
            raise ValueError(f"domain area {shp.area:.6g} must exceed 1")
        if self.resolution < 8:
            raise ValueError("resolution must be at least 8 cells per unit length")
        h = 1.0 / self.resolution
        if self.collar_width < 0:
            raise ValueError("collar width must be nonnegative")
        if 0 < self.collar_width < 2 * h - 1e-12:
            raise ValueError(
                f"collar width {self.collar_width} is below two grid spacings ({2 * h})"
            )
        return shp


@dataclass(frozen=True, eq=False)
class Grid:
    spec: DomainSpec
    shape: object
    nx: int
    ny: int
    h: float
    origin: tuple
    inside_mask: np.ndarray
    collar_mask: np.ndarray
    on_boundary_mask: np.ndarray
    boundary_index: np.ndarray  # flat node ids
    boundary_points: np.ndarray  # projections onto the boundary
    boundary_normals: np.ndarray
    boundary_ds: np.ndarray
    boundary_s: np.ndarray  # arc-length parameter of each sample
    xy: np.ndarray = field(repr=False)  # (ny, nx, 2) node coordinates

    @property
    def cell_area(self) -> float:
        return self.h * self.h

    @property
    def n_nodes(self) -> int:
        return self.nx * self.ny

    @property
    def points(self) -> np.ndarray:
        return self.xy.reshape(-1, 2)

    @property
    def boundary_nodes(self):
        """List of (flat node index, outward normal, ds)."""
        return list(zip(self.boundary_index.tolist(), self.boundary_normals, self.boundary_ds))

    def counted_area(self) -> float:
        return float(self.inside_mask.sum()) * self.cell_area

    def dist_to_boundary(self) -> np.ndarray:
        return -self.shape.sdf(self.xy)

    def ravel(self, i, j):
        return np.asarray(j) * self.nx + np.asarray(i)

    def interp_periodic(self, s_query: np.ndarray, values: np.ndarray) -> np.ndarray:
        """Periodic linear interpolation of per-sample ``values`` in arc length."""
        per = self.shape.perimeter
        s = self.boundary_s
        order = np.argsort(s, kind="stable")
        s_sorted = s[order]
        v_sorted = np.asarray(values)[..., order]
        xp = np.concatenate([s_sorted[-1:] - per, s_sorted, s_sorted[:1] + per])
        fp = np.concatenate([v_sorted[..., -1:], v_sorted, v_sorted[..., :1]], axis=-1)
        q = np.asarray(s_query) % per
        if fp.ndim == 1:
            return np.interp(q, xp, fp)
        return np.stack([np.interp(q, xp, row) for row in fp])


def build_grid(spec: DomainSpec) -> Grid:
    shp = spec.validate()
    h = 1.0 / spec.resolution
    xmin, xmax, ymin, ymax = shp.bbox()
    # disks: lattice through the centre; rectangles: cell faces on the sides
    ax = 0.0 if shp.kind == "disk" else xmin + h / 2
    ay = 0.0 if shp.kind == "disk" else ymin + h / 2
    i0 = math.floor((xmin - ax) / h + 1e-9) - 1
    i1 = math.ceil((xmax - ax) / h - 1e-9) + 1
    j0 = math.floor((ymin - ay) / h + 1e-9) - 1
    j1 = math.ceil((ymax - ay) / h - 1e-9) + 1
    xs = ax + np.arange(i0, i1 + 1) * h
    ys = ay + np.arange(j0, j1 + 1) * h
    X, Y = np.meshgrid(xs, ys)
    xy = np.stack([X, Y], axis=-1)
    sdf = shp.sdf(xy)
    tol = 1e-9 * h
    inside = sdf < -tol
    on_boundary = np.abs(sdf) <= tol

    labels, ncomp = ndimage.label(inside)
    if ncomp != 1:
        raise ValueError(f"interior mask has {ncomp} components, expected one")

    collar = inside & (-sdf < spec.collar_width) if spec.collar_width > 0 else np.zeros_like(inside)

    band = (sdf > -h / 2 + tol) & (sdf <= h / 2 + tol)
    if shp.kind == "rectangle":
        cx = np.abs(xy[..., 0]) - shp.lx / 2
        cy = np.abs(xy[..., 1]) - shp.ly / 2
        band |= (cx >= -tol) & (cy >= -tol) & (cx <= h / 2 + tol) & (cy <= h / 2 + tol)
    bidx = np.flatnonzero(band.ravel())
    pts = xy.reshape(-1, 2)[bidx]
    if shp.kind == "rectangle":
        proj, nrm = shp.project(pts, corner_tol=h / 2 + tol)
    else:
        proj, nrm = shp.project(pts)
    s = shp.arclength(proj)
    order = np.lexsort((bidx, s))
    bidx, proj, nrm, s = bidx[order], proj[order], nrm[order], s[order]
    per = shp.perimeter
    s_next = np.roll(s, -1)
    s_next[-1] += per
    s_prev = np.roll(s, 1)
    s_prev[0] -= per
    ds = 0.5 * (s_next - s_prev)

    return Grid(
        spec=spec,
        shape=shp,
        nx=xs.size,
        ny=ys.size,
        h=h,
        origin=(float(xs[0]), float(ys[0])),
        inside_mask=inside,
        collar_mask=collar,
        on_boundary_mask=on_boundary,
        boundary_index=bidx,
        boundary_points=proj,
        boundary_normals=nrm,
        boundary_ds=ds,
        boundary_s=s,
        xy=xy,
    )


def distance_to_set(grid: Grid, mask: np.ndarray) -> np.ndarray:
    """Euclidean distance from every node to the nearest cell centre in ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("distance to an empty set is undefined")
    tree = cKDTree(grid.points[mask.ravel()])
    d, _ = tree.query(grid.points)
    return d.reshape(grid.ny, grid.nx)


def distance_to_cells(grid: Grid, mask: np.ndarray, k: int = 8) -> np.ndarray:
    """Distance from every node to the union of the closed square cells in ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("distance to an empty set is undefined")
    centers = grid.points[mask.ravel()]
    tree = cKDTree(centers)
    kk = min(k, len(centers))
    _, idx = tree.query(grid.points, k=kk)
    idx = np.asarray(idx).reshape(len(grid.points), kk)
    off = np.abs(grid.points[:, None, :] - centers[idx]) - grid.h / 2
    box = np.hypot(np.maximum(off[..., 0], 0), np.maximum(off[..., 1], 0))
    return box.min(axis=1).reshape(grid.ny, grid.nx)
