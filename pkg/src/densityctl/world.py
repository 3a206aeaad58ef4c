"""Ground-truth robot simulation: noisy motion and battery dynamics.

Positions advance by Euler-Maruyama steps of the driftless-noise motion
model; the diffusion amplitude sqrt(2T) is chosen so the empirical
density evolution matches the advection-diffusion model with coefficient T.
Batteries drain with commanded speed and recharge inside the charging
region.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import CommandError, ModelError
from .grid import Grid, RegionMask

# Diffusion scale of Remark-style bounded actuation noise: a zero-mean
# Gaussian with 99% of its mass within +-(c u_max) has std 0.3 c u_max,
# giving T = (0.3^2 / 2) c u_max.
DIFFUSION_FACTOR = 0.045

QUADRATIC = "quadratic"
LINEAR = "linear"


@dataclass(frozen=True)
class NoiseModel:
    """Actuation and measurement noise parameters.

    ``diffusion`` defaults to 0.045 * c * u_max and should only be overridden
    deliberately (e.g. to switch noise off).
    """

    c: float = 0.1
    u_max: float = 1.0
    diffusion: float | None = None
    measurement_std: float = 0.01

    def __post_init__(self):
        if self.u_max <= 0:
            raise ModelError("u_max must be positive")
        if self.c < 0 or self.measurement_std < 0:
            raise ModelError("noise scales must be nonnegative")
        if self.diffusion is None:
            object.__setattr__(self, "diffusion", DIFFUSION_FACTOR * self.c * self.u_max)
        elif self.diffusion < 0:
            raise ModelError("diffusion coefficient must be nonnegative")

    def noise_free(self) -> "NoiseModel":
        return NoiseModel(c=self.c, u_max=self.u_max, diffusion=0.0, measurement_std=0.0)


@dataclass(frozen=True)
class EnergyParams:
    """Battery model coefficients (fractions of a full charge per second).

    ``model`` selects the consumption law: "quadratic" drains
    c1*|u|^2 + c2, "linear" drains c1*|u| + c2.  ``c3`` is the recharge rate
    inside the charging region; ``e_min`` the safety threshold.
    """

    c1: float = 0.005
    c2: float = 0.005
    c3: float = 0.05
    e_min: float = 0.1
    model: str = QUADRATIC

    def __post_init__(self):
        if min(self.c1, self.c2, self.c3) <= 0:
            raise ModelError("energy coefficients must be positive")
        if not 0 < self.e_min < 1:
            raise ModelError("e_min must lie in (0, 1)")
        if self.model not in (QUADRATIC, LINEAR):
            raise ModelError(f"unknown energy model {self.model!r}")

    def consumption(self, speed: float) -> float:
        """Drain rate at commanded speed, in battery fraction per second."""
        if self.model == QUADRATIC:
            return self.c1 * speed * speed + self.c2
        return self.c1 * speed + self.c2

    def path_energy_rate(self, u_max: float) -> float:
        """Energy per meter when traversing a path at maximum speed."""
        return self.consumption(u_max) / u_max


@dataclass
class RobotState:
    """One robot's ground truth plus what the controller is allowed to see."""

    position: np.ndarray  # measured position, meters
    true_position: np.ndarray
    battery: float  # fraction in [0, 1]


def step_motion(
    state: RobotState,
    u: np.ndarray,
    dt: float,
    noise: NoiseModel,
    grid: Grid,
    rng: np.random.Generator,
    measurement_rng: np.random.Generator,
) -> RobotState:
    """Advance the true position one Euler-Maruyama step and re-measure it.

    The Wiener increment has per-axis std sqrt(2 T dt); measurement noise is
    additive Gaussian on the true position.  Positions are wrapped or
    reflected at the boundary according to the grid mode.
    """
    u = np.asarray(u, dtype=float)
    if dt <= 0:
        raise ValueError("dt must be positive")
    speed = float(np.hypot(u[0], u[1]))
    if speed > noise.u_max + 1e-9:
        raise CommandError(f"command speed {speed:.6f} exceeds u_max={noise.u_max}")
    step = u * dt
    if noise.diffusion > 0:
        step = step + np.sqrt(2.0 * noise.diffusion * dt) * rng.standard_normal(2)
    true_pos = grid.confine(state.true_position + step)
    measured = true_pos
    if noise.measurement_std > 0:
        measured = grid.confine(
            true_pos + noise.measurement_std * measurement_rng.standard_normal(2)
        )
    return replace(state, position=measured, true_position=true_pos)


def step_battery(
    state: RobotState,
    u: np.ndarray,
    dt: float,
    params: EnergyParams,
    charger: RegionMask,
    grid: Grid,
) -> tuple[RobotState, float]:
    """Advance the battery one step.

    Returns the new state and the violation magnitude (how far the battery
    ended below e_min; 0.0 when none).  The level is capped at 1 while
    charging and floored at 0, but never silently clamped at e_min.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if charger.contains_point(grid, state.true_position):
        battery = min(1.0, state.battery + params.c3 * dt)
    else:
        speed = float(np.hypot(u[0], u[1]))
        battery = max(0.0, state.battery - params.consumption(speed) * dt)
    violation = max(0.0, params.e_min - battery) if battery < params.e_min else 0.0
    return replace(state, battery=battery), violation


@dataclass
class RobotStreams:
    """Independent random streams for one robot."""

    motion: np.random.Generator
    measurement: np.random.Generator
    planner: np.random.Generator


def robot_streams(entropy, n_robots: int) -> list[RobotStreams]:
    """Per-robot streams derived from a master seed by splitting.

    ``entropy`` may be an int seed or a sequence (e.g. (master_seed, run
    index) for batch runs).  Adding robots never reshuffles the streams of
    existing ones.
    """
    root = np.random.SeedSequence(entropy)
    streams = []
    for child in root.spawn(n_robots):
        motion, measurement, planner = child.spawn(3)
        streams.append(
            RobotStreams(
                motion=np.random.default_rng(motion),
                measurement=np.random.default_rng(measurement),
                planner=np.random.default_rng(planner),
            )
        )
    return streams
