"""Assembly of the per-step tracking and safety constraints.

The tracking functional is the squared mismatch between team and target
densities; the safety functional bounds the squared team density inside the
danger region.  Their discrete time derivatives are linear in the stacked
robot velocities through the per-robot advection operators, which yields one
slacked tracking row and one safety row; each robot additionally carries an
energy margin built from its planned path to the charger.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .density import DensityField
from .errors import AssemblyError
from .grid import Grid, RegionMask, integrate
from .planner import PlannedPath
from .qp import ConvexProgram
from .world import LINEAR, QUADRATIC, EnergyParams


@dataclass(frozen=True)
class ControllerGains:
    """Rates and weights of the per-step program.

    ``danger_mass_bound`` is the admissible squared-density mass inside the
    danger region (the safety functional's budget).
    """

    clf_rate: float = 0.5  # 1/s
    cbf_rate: float = 1.0  # 1/s
    energy_rate: float = 0.1  # 1/s
    slack_weight: float = 2000.0
    danger_mass_bound: float = 0.007

    def __post_init__(self):
        if min(
            self.clf_rate,
            self.cbf_rate,
            self.energy_rate,
            self.slack_weight,
            self.danger_mass_bound,
        ) <= 0:
            raise ValueError("all controller gains must be strictly positive")


@dataclass(frozen=True)
class EnergyTerm:
    """Per-robot data for the energy constraint row."""

    margin: float  # h_E = battery - e_min - energy_to_charge
    direction: np.ndarray  # unit first-segment direction (zero inside charger)
    kappa: float
    clamped: bool = False  # margin was negative and clamped for the program


@dataclass
class ConstraintRows:
    """Stacked linear rows plus per-robot energy data and diagnostics."""

    clf_g: np.ndarray  # (2n,); row reads clf_g . u + clf_offset <= s
    clf_offset: float
    cbf_a: np.ndarray  # (2n,); row reads cbf_a . u + cbf_offset >= 0
    cbf_offset: float
    energy: list[EnergyTerm]
    lyapunov_value: float
    barrier_value: float


def lyapunov(field: DensityField, grid: Grid) -> float:
    """Quadrature of the squared target-team mismatch; zero iff exact match."""
    if field.target is None:
        raise AssemblyError("density field has no target")
    residual = field.target - field.team
    return integrate(grid, residual * residual)


def spatial_barrier(
    field: DensityField, danger: RegionMask, grid: Grid, mass_bound: float
) -> float:
    """Safety margin: bound minus the squared team density mass in the danger region."""
    return mass_bound - integrate(grid, field.team * field.team, danger)


def assemble(
    field: DensityField,
    grid: Grid,
    advection: np.ndarray,
    laplacian,
    paths: list[PlannedPath],
    batteries: np.ndarray,
    gains: ControllerGains,
    energy: EnergyParams,
    danger: RegionMask,
    diffusion: float,
) -> ConstraintRows:
    """Build the constraint rows for the current step.

    ``advection`` has shape (n_robots, n_cells, 2): per robot, the columns of
    its advection operator.  ``laplacian`` is the shared sparse operator and
    ``diffusion`` its scalar coefficient.  Robots whose energy margin is
    already negative are clamped to a zero margin (forcing a full-speed
    return) and flagged.
    """
    if field.target is None:
        raise AssemblyError("density field has no target")
    n = field.n_robots
    if advection.shape != (n, grid.n_cells, 2):
        raise AssemblyError(
            f"advection stack has shape {advection.shape}, "
            f"expected ({n}, {grid.n_cells}, 2)"
        )
    if len(paths) != n or len(batteries) != n:
        raise AssemblyError("paths/batteries length must match the robot count")

    l2 = grid.spacing**2
    residual = field.target - field.team
    v_value = integrate(grid, residual * residual)
    diffusion_rate = diffusion * (laplacian @ field.team)

    # tracking row: alpha_v V + Vdot <= s, with Vdot = g.u + drift
    g = -2.0 * l2 * np.einsum("k,rkc->rc", residual, advection).ravel()
    drift_v = -2.0 * l2 * float(residual @ diffusion_rate)
    clf_offset = gains.clf_rate * v_value + drift_v

    # safety row: alpha_s h_s + hdot_s >= 0, restricted to danger cells
    idx = danger.indices
    h_value = gains.danger_mass_bound - integrate(
        grid, field.team * field.team, danger
    )
    if idx.size:
        rho_a = field.team[idx]
        a = -2.0 * l2 * np.einsum("k,rkc->rc", rho_a, advection[:, idx, :]).ravel()
        drift_s = -2.0 * l2 * float(rho_a @ diffusion_rate[idx])
    else:
        a = np.zeros(2 * n)
        drift_s = 0.0
    cbf_offset = gains.cbf_rate * h_value + drift_s

    terms = []
    for i in range(n):
        margin = float(batteries[i]) - energy.e_min - paths[i].energy_to_charge
        clamped = margin < 0.0
        terms.append(
            EnergyTerm(
                margin=max(margin, 0.0),
                direction=np.asarray(paths[i].first_dir, dtype=float),
                kappa=paths[i].kappa,
                clamped=clamped,
            )
        )
    return ConstraintRows(
        clf_g=g,
        clf_offset=clf_offset,
        cbf_a=a,
        cbf_offset=cbf_offset,
        energy=terms,
        lyapunov_value=v_value,
        barrier_value=h_value,
    )


def build_program(
    rows: ConstraintRows,
    gains: ControllerGains,
    energy: EnergyParams,
    u_max: float,
    pinned: dict[int, np.ndarray] | None = None,
) -> ConvexProgram:
    """Package constraint rows as the per-step convex program.

    Quadratic consumption completes the energy row to a disc per robot;
    linear consumption keeps it as a norm constraint.  Robots inside the
    charger (zero direction) keep the same algebraic form, which degenerates
    to a speed limit that relaxes as the battery refills.  ``pinned`` maps
    robot indices to fixed commands (zero-radius discs), used for docked
    robots running a station-keeping law instead of the optimizer.
    """
    n = len(rows.energy)
    dhat = np.array([t.direction for t in rows.energy], dtype=float).reshape(n, 2)
    margins = np.array([t.margin for t in rows.energy])
    if energy.model == QUADRATIC:
        kappas = np.array([t.kappa for t in rows.energy])
        mu = (kappas / (2.0 * energy.c1))[:, None] * dhat
        r_sq = (gains.energy_rate * margins - energy.c2) / energy.c1 + kappas**2 / (
            4.0 * energy.c1**2
        )
        if pinned:
            for i, cmd in pinned.items():
                cmd = np.asarray(cmd, dtype=float)
                mu[i] = cmd
                r_sq[i] = 0.0
                dhat[i] = cmd / u_max  # anchor u_max * dhat lands on the pin
        return ConvexProgram(
            gamma=gains.slack_weight,
            clf_g=rows.clf_g,
            clf_offset=rows.clf_offset,
            cbf_a=rows.cbf_a,
            cbf_offset=rows.cbf_offset,
            u_max=u_max,
            dhat=dhat,
            energy_mode=QUADRATIC,
            mu=mu,
            r_sq=r_sq,
        )
    kappa = energy.path_energy_rate(u_max)
    rhs = gains.energy_rate * margins - energy.c2
    # robots inside the charger recharge; an empty set there is an artifact
    # of the consumption-only model, so relax to the frozen command
    at_charger = np.hypot(dhat[:, 0], dhat[:, 1]) < 1e-12
    rhs[at_charger] = np.maximum(rhs[at_charger], 0.0)
    return ConvexProgram(
        gamma=gains.slack_weight,
        clf_g=rows.clf_g,
        clf_offset=rows.clf_offset,
        cbf_a=rows.cbf_a,
        cbf_offset=rows.cbf_offset,
        u_max=u_max,
        dhat=dhat,
        energy_mode=LINEAR,
        lin_c1=energy.c1,
        lin_kappa=kappa,
        lin_rhs=rhs,
    )
