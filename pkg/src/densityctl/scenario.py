"""Scenario configuration: parsing, validation, and the bundled experiment.

Configs are flat structured text with dotted keys (``grid.nx = 64``), one
assignment per line, ``#`` comments, and literal values (numbers, booleans,
quoted strings, bracketed lists).  The format is versioned through a
``schema_version`` key.
"""

from __future__ import annotations

import ast
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .controller import ControllerGains
from .density import (
    LocalizationModel,
    TargetComponent,
    TargetSpec,
    build_target,
    single_kernel_mass,
)
from .errors import ConfigError
from .grid import Boundary, Disc, Grid, Rect, RegionMask, mask_from_geometry
from .planner import DangerGauge, PlannerConfig, PlannerMode
from .world import EnergyParams, NoiseModel

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ShapeSpec:
    kind: str  # "disc" or "rect"
    center: tuple[float, float] | None = None
    radius: float | None = None
    bounds: tuple[float, float, float, float] | None = None  # xmin, ymin, xmax, ymax

    def to_shape(self):
        if self.kind == "disc":
            return Disc(tuple(self.center), float(self.radius))
        if self.kind == "rect":
            return Rect(*self.bounds)
        raise ConfigError(f"unknown shape kind {self.kind!r}")


@dataclass(frozen=True)
class ScenarioConfig:
    """Declarative description of one simulation setup."""

    domain_size: float = 4.0
    grid_nx: int = 64
    grid_ny: int = 64
    boundary: str = "periodic"
    dt: float = 0.05
    duration: float = 87.0
    seed: int = 12061
    localization_sigma: float = 0.15
    positions: tuple[tuple[float, float], ...] = ()
    batteries: tuple[float, ...] = ()
    target_components: tuple[TargetComponent, ...] = ()
    target_normalize: bool = True
    danger_shapes: tuple[ShapeSpec, ...] = ()
    charger_shapes: tuple[ShapeSpec, ...] = ()
    clf_rate: float = 0.5
    cbf_rate: float = 1.0
    energy_rate: float = 0.1
    slack_weight: float = 2000.0
    danger_mass_fraction: float = 0.05  # of the single-kernel mass
    danger_mass_bound: float | None = None  # absolute override
    noise_c: float = 0.1
    u_max: float = 1.0
    diffusion: float | None = None
    measurement_std: float = 0.01
    energy_c1: float = 0.005
    energy_c2: float = 0.005
    energy_c3: float = 0.05
    e_min: float = 0.1
    energy_model: str = "quadratic"
    depart_threshold: float = 0.75  # battery level that ends a charging dwell
    dock_margin: float = 0.06  # meters inside the charger before docking
    planner_max_iterations: int = 2000
    planner_steer_step: float = 0.25
    planner_goal_bias: float = 0.1
    planner_mode: str = "free"
    planner_margin: float = 0.5

    @property
    def n_robots(self) -> int:
        return len(self.positions)

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))

    def noise_free(self) -> "ScenarioConfig":
        return replace(self, diffusion=0.0, measurement_std=0.0)


class Scenario:
    """A config materialized into grid, masks, fields, and model objects."""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        spacing = cfg.domain_size / cfg.grid_nx
        spacing_y = cfg.domain_size / cfg.grid_ny
        if not math.isclose(spacing, spacing_y):
            raise ConfigError("grid cells must be square: nx and ny must match the domain")
        self.grid = Grid(
            cfg.grid_nx,
            cfg.grid_ny,
            spacing,
            boundary=Boundary(cfg.boundary),
        )
        self.loc = LocalizationModel.isotropic(cfg.localization_sigma)
        self.noise = NoiseModel(
            c=cfg.noise_c,
            u_max=cfg.u_max,
            diffusion=cfg.diffusion,
            measurement_std=cfg.measurement_std,
        )
        self.energy = EnergyParams(
            c1=cfg.energy_c1,
            c2=cfg.energy_c2,
            c3=cfg.energy_c3,
            e_min=cfg.e_min,
            model=cfg.energy_model,
        )
        self.danger = mask_from_geometry(
            self.grid, [s.to_shape() for s in cfg.danger_shapes]
        ) if cfg.danger_shapes else RegionMask(
            np.array([], dtype=np.int64), (), self.grid.n_cells
        )
        if not cfg.charger_shapes:
            raise ConfigError("scenario needs at least one charging shape")
        self.charger = mask_from_geometry(
            self.grid, [s.to_shape() for s in cfg.charger_shapes]
        )
        if self.charger.is_empty:
            raise ConfigError("charging region contains no cells")
        kernel_mass = single_kernel_mass(self.grid, self.loc)
        bound = (
            cfg.danger_mass_bound
            if cfg.danger_mass_bound is not None
            else cfg.danger_mass_fraction * kernel_mass
        )
        self.gains = ControllerGains(
            clf_rate=cfg.clf_rate,
            cbf_rate=cfg.cbf_rate,
            energy_rate=cfg.energy_rate,
            slack_weight=cfg.slack_weight,
            danger_mass_bound=bound,
        )
        self.planner_cfg = PlannerConfig(
            max_iterations=cfg.planner_max_iterations,
            steer_step=cfg.planner_steer_step,
            goal_bias=cfg.planner_goal_bias,
            mode=PlannerMode(cfg.planner_mode),
            feasibility_margin=cfg.planner_margin,
        )
        self.target = build_target(
            self.grid,
            TargetSpec(cfg.target_components, normalize=cfg.target_normalize),
            self.loc,
            max(cfg.n_robots, 1),
        )
        self.gauge = DangerGauge(self.danger, self.grid, self.loc)
        self.kappa = self.energy.path_energy_rate(cfg.u_max)
        self.depart_threshold = cfg.depart_threshold
        self.dock_margin = cfg.dock_margin
        self.mass_budget = (
            self.planner_cfg.feasibility_margin * bound / max(cfg.n_robots, 1)
        )
        self._validate()

    def charger_depth(self, point) -> float:
        """How far inside the charger geometry a point sits (<= 0: outside)."""
        best = -math.inf
        for spec in self.cfg.charger_shapes:
            if spec.kind == "disc":
                d = spec.radius - math.hypot(
                    point[0] - spec.center[0], point[1] - spec.center[1]
                )
            else:
                x0, y0, x1, y1 = spec.bounds
                d = min(point[0] - x0, x1 - point[0], point[1] - y0, y1 - point[1])
            best = max(best, d)
        return best

    def dock_target(self, point) -> np.ndarray:
        """Station-keeping anchor: center of the nearest charger shape."""
        best = None
        best_d = math.inf
        for spec in self.cfg.charger_shapes:
            if spec.kind == "disc":
                c = np.asarray(spec.center, dtype=float)
            else:
                x0, y0, x1, y1 = spec.bounds
                c = np.array([(x0 + x1) / 2.0, (y0 + y1) / 2.0])
            d = float(np.hypot(*(c - np.asarray(point))))
            if d < best_d:
                best_d = d
                best = c
        return best

    def _validate(self):
        cfg = self.cfg
        if cfg.n_robots != len(cfg.batteries):
            raise ConfigError("robots need matching position and battery counts")
        if cfg.dt <= 0 or cfg.duration <= 0:
            raise ConfigError("dt and duration must be positive")
        if cfg.dt * cfg.u_max >= self.grid.spacing:
            raise ConfigError(
                f"dt * u_max = {cfg.dt * cfg.u_max:.4f} must stay below the cell "
                f"size {self.grid.spacing:.4f} so densities cannot skip cells"
            )
        for i, pos in enumerate(cfg.positions):
            if not self.grid.contains(pos):
                raise ConfigError(f"robot {i} starts outside the domain")
            if self.danger.contains_point(self.grid, pos):
                raise ConfigError(f"robot {i} starts inside the danger region")
        for i, b in enumerate(cfg.batteries):
            if not 0.0 <= b <= 1.0:
                raise ConfigError(f"robot {i} battery must lie in [0, 1]")
        overlap = np.intersect1d(self.danger.indices, self.charger.indices)
        if overlap.size:
            raise ConfigError("charging region overlaps the danger region")


# ---------------------------------------------------------------------------
# flat dotted-key config text

def _parse_value(raw: str):
    raw = raw.strip()
    lowered = raw.lower()
    if lowered == "true":
        return True
    if lowered == "false":
        return False
    if lowered in ("none", "null"):
        return None
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw  # bare string


def parse_flat(text: str) -> dict:
    """Parse ``key = value`` lines into a flat dotted-key dict."""
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "#" in stripped and '"' not in stripped and "'" not in stripped:
            stripped = stripped[: stripped.index("#")].strip()
            if not stripped:
                continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = _parse_value(raw)
    return out


def format_flat(values: dict) -> str:
    lines = []
    for key, value in values.items():
        if isinstance(value, bool):
            rendered = "true" if value else "false"
        elif isinstance(value, str):
            rendered = f'"{value}"'
        elif isinstance(value, (list, tuple)):
            rendered = "[" + ", ".join(repr(v) for v in value) + "]"
        else:
            rendered = repr(value)
        lines.append(f"{key} = {rendered}")
    return "\n".join(lines) + "\n"


def config_to_flat(cfg: ScenarioConfig) -> dict:
    out = {
        "schema_version": SCHEMA_VERSION,
        "seed": cfg.seed,
        "domain.size": cfg.domain_size,
        "grid.nx": cfg.grid_nx,
        "grid.ny": cfg.grid_ny,
        "grid.boundary": cfg.boundary,
        "time.dt": cfg.dt,
        "time.duration": cfg.duration,
        "localization.sigma": cfg.localization_sigma,
        "robots.count": cfg.n_robots,
    }
    for i, (pos, batt) in enumerate(zip(cfg.positions, cfg.batteries)):
        out[f"robots.{i}.position"] = list(pos)
        out[f"robots.{i}.battery"] = batt
    for i, comp in enumerate(cfg.target_components):
        out[f"target.{i}.center"] = list(comp.center)
        out[f"target.{i}.weight"] = comp.weight
        out[f"target.{i}.sigma"] = comp.sigma
    out["target.normalize"] = cfg.target_normalize
    for name, shapes in (("danger", cfg.danger_shapes), ("charger", cfg.charger_shapes)):
        for i, s in enumerate(shapes):
            out[f"{name}.{i}.kind"] = s.kind
            if s.kind == "disc":
                out[f"{name}.{i}.center"] = list(s.center)
                out[f"{name}.{i}.radius"] = s.radius
            else:
                out[f"{name}.{i}.bounds"] = list(s.bounds)
    out.update(
        {
            "gains.clf_rate": cfg.clf_rate,
            "gains.cbf_rate": cfg.cbf_rate,
            "gains.energy_rate": cfg.energy_rate,
            "gains.slack_weight": cfg.slack_weight,
            "gains.danger_mass_fraction": cfg.danger_mass_fraction,
            "noise.c": cfg.noise_c,
            "noise.u_max": cfg.u_max,
            "noise.measurement_std": cfg.measurement_std,
            "energy.c1": cfg.energy_c1,
            "energy.c2": cfg.energy_c2,
            "energy.c3": cfg.energy_c3,
            "energy.e_min": cfg.e_min,
            "energy.model": cfg.energy_model,
            "energy.depart_threshold": cfg.depart_threshold,
            "charger.dock_margin": cfg.dock_margin,
            "planner.max_iterations": cfg.planner_max_iterations,
            "planner.steer_step": cfg.planner_steer_step,
            "planner.goal_bias": cfg.planner_goal_bias,
            "planner.mode": cfg.planner_mode,
            "planner.feasibility_margin": cfg.planner_margin,
        }
    )
    if cfg.danger_mass_bound is not None:
        out["gains.danger_mass_bound"] = cfg.danger_mass_bound
    if cfg.diffusion is not None:
        out["noise.diffusion"] = cfg.diffusion
    return out


def _indexed(flat: dict, prefix: str):
    """Collect {index: {field: value}} for keys like 'prefix.0.field'."""
    groups: dict[int, dict] = {}
    for key, value in flat.items():
        parts = key.split(".")
        if len(parts) == 3 and parts[0] == prefix and parts[1].isdigit():
            groups.setdefault(int(parts[1]), {})[parts[2]] = value
    return [groups[i] for i in sorted(groups)]


def config_from_flat(flat: dict) -> ScenarioConfig:
    version = flat.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r}")

    def get(key, default=None):
        return flat.get(key, default)

    robots = _indexed(flat, "robots")
    declared = get("robots.count")
    if declared is not None and declared != len(robots):
        raise ConfigError(
            f"robots.count = {declared} but {len(robots)} robots are defined"
        )
    positions = tuple(tuple(map(float, r["position"])) for r in robots)
    batteries = tuple(float(r["battery"]) for r in robots)

    components = tuple(
        TargetComponent(
            center=tuple(map(float, c["center"])),
            weight=float(c.get("weight", 1.0)),
            sigma=float(c.get("sigma", 0.3)),
        )
        for c in _indexed(flat, "target")
    )

    def shapes(prefix):
        specs = []
        for s in _indexed(flat, prefix):
            kind = s.get("kind", "disc")
            if kind == "disc":
                specs.append(
                    ShapeSpec(kind="disc", center=tuple(map(float, s["center"])),
                              radius=float(s["radius"]))
                )
            elif kind == "rect":
                specs.append(ShapeSpec(kind="rect", bounds=tuple(map(float, s["bounds"]))))
            else:
                raise ConfigError(f"unknown shape kind {kind!r}")
        return tuple(specs)

    defaults = ScenarioConfig()
    return ScenarioConfig(
        domain_size=float(get("domain.size", defaults.domain_size)),
        grid_nx=int(get("grid.nx", defaults.grid_nx)),
        grid_ny=int(get("grid.ny", defaults.grid_ny)),
        boundary=str(get("grid.boundary", defaults.boundary)),
        dt=float(get("time.dt", defaults.dt)),
        duration=float(get("time.duration", defaults.duration)),
        seed=int(get("seed", defaults.seed)),
        localization_sigma=float(get("localization.sigma", defaults.localization_sigma)),
        positions=positions,
        batteries=batteries,
        target_components=components,
        target_normalize=bool(get("target.normalize", True)),
        danger_shapes=shapes("danger"),
        charger_shapes=shapes("charger"),
        clf_rate=float(get("gains.clf_rate", defaults.clf_rate)),
        cbf_rate=float(get("gains.cbf_rate", defaults.cbf_rate)),
        energy_rate=float(get("gains.energy_rate", defaults.energy_rate)),
        slack_weight=float(get("gains.slack_weight", defaults.slack_weight)),
        danger_mass_fraction=float(
            get("gains.danger_mass_fraction", defaults.danger_mass_fraction)
        ),
        danger_mass_bound=get("gains.danger_mass_bound"),
        noise_c=float(get("noise.c", defaults.noise_c)),
        u_max=float(get("noise.u_max", defaults.u_max)),
        diffusion=get("noise.diffusion"),
        measurement_std=float(get("noise.measurement_std", defaults.measurement_std)),
        energy_c1=float(get("energy.c1", defaults.energy_c1)),
        energy_c2=float(get("energy.c2", defaults.energy_c2)),
        energy_c3=float(get("energy.c3", defaults.energy_c3)),
        e_min=float(get("energy.e_min", defaults.e_min)),
        energy_model=str(get("energy.model", defaults.energy_model)),
        depart_threshold=float(get("energy.depart_threshold", defaults.depart_threshold)),
        dock_margin=float(get("charger.dock_margin", defaults.dock_margin)),
        planner_max_iterations=int(
            get("planner.max_iterations", defaults.planner_max_iterations)
        ),
        planner_steer_step=float(get("planner.steer_step", defaults.planner_steer_step)),
        planner_goal_bias=float(get("planner.goal_bias", defaults.planner_goal_bias)),
        planner_mode=str(get("planner.mode", defaults.planner_mode)),
        planner_margin=float(
            get("planner.feasibility_margin", defaults.planner_margin)
        ),
    )


def dump_config(cfg: ScenarioConfig) -> str:
    return format_flat(config_to_flat(cfg))


def parse_config(text: str) -> ScenarioConfig:
    return config_from_flat(parse_flat(text))


def load_config(path) -> ScenarioConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def save_config(cfg: ScenarioConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))


def experiment_scenario() -> ScenarioConfig:
    """The bundled four-robot indoor scenario.

    A 4 m square field, one Gaussian target at the top, two danger discs
    flanking the route to it, one charging disc on the left, and initial
    batteries of 29%, 89%, 24%, and 39%.  The geometry is a visually
    faithful reconstruction; sizes and positions are approximate.
    """
    return ScenarioConfig(
        domain_size=4.0,
        grid_nx=64,
        grid_ny=64,
        boundary="periodic",
        dt=0.05,
        duration=87.0,
        seed=12061,
        localization_sigma=0.15,
        positions=((0.7, 0.8), (2.0, 0.65), (2.45, 0.7), (3.3, 0.85)),
        batteries=(0.29, 0.89, 0.24, 0.39),
        target_components=(TargetComponent((2.035, 3.05), weight=1.0, sigma=0.22),),
        target_normalize=True,
        danger_shapes=(
            ShapeSpec(kind="disc", center=(1.42, 2.05), radius=0.33),
            ShapeSpec(kind="disc", center=(2.65, 2.05), radius=0.33),
        ),
        charger_shapes=(ShapeSpec(kind="disc", center=(0.45, 1.7), radius=0.28),),
        clf_rate=0.5,
        cbf_rate=1.0,
        energy_rate=0.038,
        slack_weight=2000.0,
        danger_mass_fraction=0.05,
        noise_c=0.1,
        u_max=1.0,
        measurement_std=0.01,
        energy_c1=0.005,
        energy_c2=0.005,
        energy_c3=0.05,
        e_min=0.1,
        energy_model="quadratic",
        planner_max_iterations=2000,
        planner_steer_step=0.25,
        planner_goal_bias=0.1,
        planner_mode="free",
        planner_margin=0.5,
    )
