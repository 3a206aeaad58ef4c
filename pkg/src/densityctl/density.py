"""Belief-weighted team density and target density on the grid.

Each robot contributes an unnormalized Gaussian kernel centered at its
measured position, with width set by the shared localization precision
matrix.  The team density is the plain sum of the kernels; the target is a
weighted sum of Gaussian components, optionally rescaled so its mass equals
the team's total kernel mass.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ModelError
from .grid import Boundary, Grid, integrate


@dataclass(frozen=True)
class LocalizationModel:
    """Shared localization belief: a 2x2 symmetric positive-definite precision.

    The same precision applies to every robot (identical sensing hardware).
    """

    precision: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.precision, dtype=float)
        if p.shape != (2, 2):
            raise ModelError(f"precision must be 2x2, got {p.shape}")
        if not np.allclose(p, p.T, atol=1e-12):
            raise ModelError("precision matrix must be symmetric")
        eigvals = np.linalg.eigvalsh(p)
        if eigvals.min() <= 0:
            raise ModelError(f"precision matrix must be positive definite, eigvals={eigvals}")
        object.__setattr__(self, "precision", p)

    @classmethod
    def isotropic(cls, sigma: float) -> "LocalizationModel":
        """Precision sigma^-2 * I for a circular belief of width ``sigma`` meters."""
        if sigma <= 0:
            raise ModelError("sigma must be positive")
        return cls(np.eye(2) / sigma**2)

    @property
    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.precision).min())


@dataclass
class DensityField:
    """Flattened densities for one control step.

    ``team`` is the elementwise sum of the per-robot kernels; ``target`` may
    be filled in later by the harness.
    """

    per_robot: np.ndarray  # (n_robots, n_cells)
    team: np.ndarray  # (n_cells,)
    target: np.ndarray | None = None

    @property
    def n_robots(self) -> int:
        return self.per_robot.shape[0]

    def with_target(self, target: np.ndarray) -> "DensityField":
        return replace(self, target=np.asarray(target, dtype=float))


def _displacements(grid: Grid, position: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cell-center displacements from ``position``, wrapped on periodic grids."""
    xs, ys = grid.cell_centers()
    dx = xs - position[0]
    dy = ys - position[1]
    if grid.boundary is Boundary.PERIODIC:
        lx, ly = grid.extent
        dx -= lx * np.round(dx / lx)
        dy -= ly * np.round(dy / ly)
    return dx, dy


def kernel_values(grid: Grid, position, loc: LocalizationModel) -> np.ndarray:
    """Gaussian belief kernel exp(-0.5 d^T P d) sampled at every cell center."""
    dx, dy = _displacements(grid, np.asarray(position, dtype=float))
    p = loc.precision
    quad = p[0, 0] * dx * dx + 2.0 * p[0, 1] * dx * dy + p[1, 1] * dy * dy
    return np.exp(-0.5 * quad)


def evaluate_kernels(grid: Grid, positions, loc: LocalizationModel) -> DensityField:
    """Per-robot kernels and their sum for the given measured positions."""
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    per_robot = np.empty((positions.shape[0], grid.n_cells))
    for i, pos in enumerate(positions):
        per_robot[i] = kernel_values(grid, pos, loc)
    return DensityField(per_robot=per_robot, team=per_robot.sum(axis=0))


def single_kernel_mass(grid: Grid, loc: LocalizationModel) -> float:
    """Quadrature mass of one kernel placed at the domain center."""
    lx, ly = grid.extent
    center = (grid.origin[0] + lx / 2.0, grid.origin[1] + ly / 2.0)
    return integrate(grid, kernel_values(grid, center, loc))


@dataclass(frozen=True)
class TargetComponent:
    center: tuple[float, float]
    weight: float = 1.0
    sigma: float = 0.3  # isotropic width of this component, meters


@dataclass(frozen=True)
class TargetSpec:
    """Weighted Gaussian mixture describing the desired team distribution.

    With ``normalize`` set, the field is rescaled so its quadrature mass is
    ``n_robots`` times the single-kernel mass, which makes an exact density
    match achievable in principle.
    """

    components: tuple[TargetComponent, ...]
    normalize: bool = True


def build_target(
    grid: Grid,
    spec: TargetSpec,
    loc: LocalizationModel,
    n_robots: int,
) -> np.ndarray:
    """Evaluate the target density at cell centers, optionally mass-normalized."""
    values = np.zeros(grid.n_cells)
    for comp in spec.components:
        if not grid.contains(comp.center):
            raise ConfigError(f"target component center {comp.center} outside domain")
        if comp.sigma <= 0:
            raise ConfigError("target component sigma must be positive")
        dx, dy = _displacements(grid, np.asarray(comp.center, dtype=float))
        values += comp.weight * np.exp(-(dx * dx + dy * dy) / (2.0 * comp.sigma**2))
    if np.any(values < 0):
        raise ConfigError("target density must be nonnegative; check component weights")
    if spec.normalize:
        mass = integrate(grid, values)
        if mass > 0:
            values *= n_robots * single_kernel_mass(grid, loc) / mass
    return values
