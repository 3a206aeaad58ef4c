"""Uniform 2D grid with central finite-difference operators.

Cell-center collocation on an nx-by-ny lattice with spacing ``l``: cell
(ix, iy) has its center at ``origin + ((ix + 0.5) l, (iy + 0.5) l)`` and the
flattened index ``k = iy * nx + ix``.  All density vectors in this package
live in that flattened index space, and quadrature is the plain midpoint
rule ``l^2 * sum(values)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache

import numpy as np
from scipy import sparse

from .errors import DimensionError


class Boundary(Enum):
    PERIODIC = "periodic"
    NEUMANN = "neumann"


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centered 2D grid.

    Attributes
    ----------
    nx, ny : int
        Cell counts along x and y (each at least 3).
    spacing : float
        Cell edge length in meters.
    origin : tuple[float, float]
        Lower-left corner of the domain.
    boundary : Boundary
        Periodic wrap-around or Neumann (reflective, ghost-cell mirroring).
    """

    nx: int
    ny: int
    spacing: float
    origin: tuple[float, float] = (0.0, 0.0)
    boundary: Boundary = Boundary.PERIODIC

    def __post_init__(self):
        if self.nx < 3 or self.ny < 3:
            raise ValueError(f"grid needs nx, ny >= 3, got {self.nx}x{self.ny}")
        if not self.spacing > 0:
            raise ValueError(f"grid spacing must be positive, got {self.spacing}")

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def extent(self) -> tuple[float, float]:
        return (self.nx * self.spacing, self.ny * self.spacing)

    def flatten_index(self, ix: np.ndarray | int, iy: np.ndarray | int):
        return np.asarray(iy) * self.nx + np.asarray(ix)

    def unflatten_index(self, k: np.ndarray | int):
        k = np.asarray(k)
        return k % self.nx, k // self.nx

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Flattened arrays (xs, ys) of all cell-center coordinates."""
        xs = self.origin[0] + (np.arange(self.nx) + 0.5) * self.spacing
        ys = self.origin[1] + (np.arange(self.ny) + 0.5) * self.spacing
        gx, gy = np.meshgrid(xs, ys)
        return gx.ravel(), gy.ravel()

    def cell_of(self, point) -> int:
        """Flattened index of the cell containing ``point`` (clipped to the domain)."""
        ix = int((point[0] - self.origin[0]) / self.spacing)
        iy = int((point[1] - self.origin[1]) / self.spacing)
        ix = min(max(ix, 0), self.nx - 1)
        iy = min(max(iy, 0), self.ny - 1)
        return iy * self.nx + ix

    def contains(self, point) -> bool:
        lx, ly = self.extent
        return (
            self.origin[0] <= point[0] <= self.origin[0] + lx
            and self.origin[1] <= point[1] <= self.origin[1] + ly
        )

    def confine(self, point: np.ndarray) -> np.ndarray:
        """Map a point back into the domain: wrap (periodic) or reflect (Neumann)."""
        lx, ly = self.extent
        p = np.array(point, dtype=float)
        if self.boundary is Boundary.PERIODIC:
            p[0] = self.origin[0] + (p[0] - self.origin[0]) % lx
            p[1] = self.origin[1] + (p[1] - self.origin[1]) % ly
            return p
        for axis, span in ((0, lx), (1, ly)):
            r = (p[axis] - self.origin[axis]) % (2.0 * span)
            p[axis] = self.origin[axis] + (r if r <= span else 2.0 * span - r)
        return p


def _neighbor_indices(grid: Grid):
    """Per-direction neighbor index arrays and existence masks.

    Periodic grids wrap; Neumann grids mark out-of-domain neighbors as missing
    (ghost-cell mirroring makes their stencil contribution cancel).
    """
    nx, ny = grid.nx, grid.ny
    ix, iy = grid.unflatten_index(np.arange(grid.n_cells))
    out = []
    for dx, dy in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        jx, jy = ix + dx, iy + dy
        if grid.boundary is Boundary.PERIODIC:
            exists = np.ones(grid.n_cells, dtype=bool)
            jx, jy = jx % nx, jy % ny
        else:
            exists = (jx >= 0) & (jx < nx) & (jy >= 0) & (jy < ny)
            jx, jy = jx.clip(0, nx - 1), jy.clip(0, ny - 1)
        out.append((grid.flatten_index(jx, jy), exists))
    return out


@lru_cache(maxsize=8)
def build_laplacian(grid: Grid) -> sparse.csr_matrix:
    """Five-point Laplacian on the grid's flattened index space.

    Second-order accurate on smooth fields; rows sum to zero under both
    boundary modes, so constants are annihilated exactly.
    """
    n = grid.n_cells
    inv_l2 = 1.0 / grid.spacing**2
    rows, cols, vals = [], [], []
    diag = np.zeros(n)
    k = np.arange(n)
    for nbr, exists in _neighbor_indices(grid):
        rows.append(k[exists])
        cols.append(nbr[exists])
        vals.append(np.full(exists.sum(), inv_l2))
        diag -= exists * inv_l2
    rows.append(k)
    cols.append(k)
    vals.append(diag)
    mat = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    )
    return mat.tocsr()


@lru_cache(maxsize=8)
def build_gradient(grid: Grid) -> tuple[sparse.csr_matrix, sparse.csr_matrix]:
    """Central-difference operators (Dx, Dy) with the grid's boundary handling."""
    n = grid.n_cells
    inv_2l = 1.0 / (2.0 * grid.spacing)
    k = np.arange(n)
    nbrs = _neighbor_indices(grid)
    ops = []
    for minus, plus in ((nbrs[0], nbrs[1]), (nbrs[2], nbrs[3])):
        # Missing neighbors mirror the cell itself: the ghost value equals the
        # cell value, so the stencil keeps the (j_plus - j_minus) / 2l form
        # with the clipped index standing in for the ghost.
        (km, em), (kp, ep) = minus, plus
        km = np.where(em, km, k)
        kp = np.where(ep, kp, k)
        rows = np.concatenate([k, k])
        cols = np.concatenate([kp, km])
        vals = np.concatenate([np.full(n, inv_2l), np.full(n, -inv_2l)])
        ops.append(sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr())
    return ops[0], ops[1]


def build_advection(grid: Grid, kernel: np.ndarray) -> np.ndarray:
    """Columns of the per-robot advection operator, shape (n_cells, 2).

    Column j holds the central-difference approximation of the negative
    spatial derivative of ``kernel`` along axis j, so that ``A @ u``
    approximates ``-div(u * kernel)`` for a spatially constant velocity u.
    """
    kernel = np.asarray(kernel, dtype=float)
    if kernel.shape != (grid.n_cells,):
        raise DimensionError(
            f"kernel has shape {kernel.shape}, expected ({grid.n_cells},)"
        )
    dx_op, dy_op = build_gradient(grid)
    return np.stack([-(dx_op @ kernel), -(dy_op @ kernel)], axis=1)


def integrate(grid: Grid, values: np.ndarray, mask: "RegionMask | None" = None) -> float:
    """Midpoint quadrature ``l^2 * sum(values)`` over all cells or a mask."""
    values = np.asarray(values, dtype=float)
    if values.shape != (grid.n_cells,):
        raise DimensionError(
            f"values has shape {values.shape}, expected ({grid.n_cells},)"
        )
    total = values[mask.indices].sum() if mask is not None else values.sum()
    return float(grid.spacing**2 * total)


@dataclass(frozen=True)
class Disc:
    center: tuple[float, float]
    radius: float

    def contains(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        return (xs - self.center[0]) ** 2 + (ys - self.center[1]) ** 2 <= self.radius**2

    def bounds(self):
        cx, cy = self.center
        r = self.radius
        return (cx - r, cy - r, cx + r, cy + r)


@dataclass(frozen=True)
class Rect:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def contains(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        return (xs >= self.xmin) & (xs <= self.xmax) & (ys >= self.ymin) & (ys <= self.ymax)

    def bounds(self):
        return (self.xmin, self.ymin, self.xmax, self.ymax)


Shape = Disc | Rect


@dataclass
class RegionMask:
    """Set of flattened cell indices tied to the geometry it was built from.

    A cell belongs to the mask iff its center lies inside the union of the
    source shapes.
    """

    indices: np.ndarray
    source: tuple[Shape, ...]
    n_cells: int
    touches_boundary: bool = False
    _lookup: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.n_cells):
            raise ValueError("mask indices outside the flattened index space")
        object.__setattr__(self, "indices", np.unique(idx))
        lookup = np.zeros(self.n_cells, dtype=bool)
        lookup[self.indices] = True
        object.__setattr__(self, "_lookup", lookup)

    def __len__(self) -> int:
        return int(self.indices.size)

    def contains_index(self, k: int) -> bool:
        return bool(self._lookup[k])

    def contains_point(self, grid: Grid, point) -> bool:
        return bool(self._lookup[grid.cell_of(point)])

    @property
    def is_empty(self) -> bool:
        return self.indices.size == 0


def mask_from_geometry(grid: Grid, shapes) -> RegionMask:
    """Mask of all cells whose centers lie in the union of discs/rectangles.

    Shapes that poke outside the domain are allowed but flagged, since
    regions of interest are meant to sit strictly inside it.
    """
    xs, ys = grid.cell_centers()
    inside = np.zeros(grid.n_cells, dtype=bool)
    touches = False
    lx, ly = grid.extent
    x0, y0 = grid.origin
    for shape in shapes:
        inside |= shape.contains(xs, ys)
        bx0, by0, bx1, by1 = shape.bounds()
        if bx0 < x0 or by0 < y0 or bx1 > x0 + lx or by1 > y0 + ly:
            touches = True
    if touches:
        warnings.warn(
            "mask geometry touches or crosses the domain boundary", stacklevel=2
        )
    return RegionMask(
        indices=np.flatnonzero(inside),
        source=tuple(shapes),
        n_cells=grid.n_cells,
        touches_boundary=touches,
    )
