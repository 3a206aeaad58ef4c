"""Safety-aware path planning to the charging region.

A rapidly-exploring random tree steers from the robot's measured position to
the charging region; every candidate segment is admitted only if a virtual
robot moved along it keeps its belief mass inside the danger region below a
per-robot budget.  The resulting path yields the energy needed to reach the
charger and the direction its first segment imposes on the energy
constraint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .density import LocalizationModel
from .grid import Disc, Grid, Rect, RegionMask


class PlannerMode(Enum):
    FREE_SPACE = "free"
    GRID_RESTRICTED = "grid"


@dataclass(frozen=True)
class PlannerConfig:
    max_iterations: int = 2000
    steer_step: float = 0.25  # meters
    goal_bias: float = 0.1
    mode: PlannerMode = PlannerMode.FREE_SPACE
    feasibility_margin: float = 0.5  # fraction of the danger-mass bound
    goal_connect: bool = True  # greedy multi-step extension on goal samples
    goal_first: bool = True  # deterministic straight-shot attempt at start

    def __post_init__(self):
        if self.steer_step <= 0:
            raise ValueError("steer_step must be positive")
        if not 0.0 <= self.goal_bias < 1.0:
            raise ValueError("goal_bias must lie in [0, 1)")


@dataclass(frozen=True)
class PlannedPath:
    """Waypoint chain from a robot's position into the charging region.

    ``energy_to_charge`` is ``kappa * length`` where kappa converts meters to
    battery fraction for a maximum-speed traversal.  ``first_dir`` is the
    unit vector along the first segment, or zero for the trivial path of a
    robot already inside the charger.
    """

    waypoints: np.ndarray  # (m, 2)
    length: float
    first_dir: np.ndarray  # (2,)
    energy_to_charge: float
    kappa: float

    @classmethod
    def trivial(cls, start, kappa: float) -> "PlannedPath":
        start = np.asarray(start, dtype=float)
        return cls(
            waypoints=start.reshape(1, 2),
            length=0.0,
            first_dir=np.zeros(2),
            energy_to_charge=0.0,
            kappa=kappa,
        )

    @classmethod
    def from_waypoints(cls, waypoints: np.ndarray, kappa: float) -> "PlannedPath":
        waypoints = np.asarray(waypoints, dtype=float)
        segs = np.diff(waypoints, axis=0)
        length = float(np.hypot(segs[:, 0], segs[:, 1]).sum())
        first = np.zeros(2)
        for seg in segs:
            n = math.hypot(seg[0], seg[1])
            if n > 1e-12:
                first = seg / n
                break
        return cls(
            waypoints=waypoints,
            length=length,
            first_dir=first,
            energy_to_charge=kappa * length,
            kappa=kappa,
        )


def path_direction_rate(path: PlannedPath, u) -> float:
    """First-order rate of change of the energy-to-charge under command u.

    Motion along the path shortens it, so the rate is minus the projection of
    u on the first segment direction, scaled by the meters-to-energy factor.
    """
    return -path.kappa * float(path.first_dir @ np.asarray(u, dtype=float))


class DangerGauge:
    """Evaluates the belief mass a single robot places inside the danger region.

    The mass of the squared kernel restricted to the danger cells is computed
    exactly by quadrature; a conservative analytic upper bound based on the
    distance to the danger geometry short-circuits the common far-away case.
    """

    def __init__(self, danger: RegionMask, grid: Grid, loc: LocalizationModel):
        self.grid = grid
        xs, ys = grid.cell_centers()
        self.cx = xs[danger.indices]
        self.cy = ys[danger.indices]
        self.cell_area = grid.spacing**2
        self.n_cells = danger.indices.size
        p = loc.precision
        self.pxx, self.pxy, self.pyy = p[0, 0], p[0, 1], p[1, 1]
        self.lam_min = loc.min_eigenvalue
        self.shapes = danger.source
        self.danger = danger

    def masked_mass(self, points: np.ndarray) -> np.ndarray:
        """Exact quadrature of the squared kernel over the danger cells."""
        points = np.atleast_2d(points)
        if self.n_cells == 0:
            return np.zeros(points.shape[0])
        dx = self.cx[None, :] - points[:, 0, None]
        dy = self.cy[None, :] - points[:, 1, None]
        quad = self.pxx * dx * dx + 2.0 * self.pxy * dx * dy + self.pyy * dy * dy
        return self.cell_area * np.exp(-quad).sum(axis=1)

    def _distance_to_shapes(self, x: float, y: float) -> float:
        best = math.inf
        for shape in self.shapes:
            if isinstance(shape, Disc):
                d = math.hypot(x - shape.center[0], y - shape.center[1]) - shape.radius
            elif isinstance(shape, Rect):
                ddx = max(shape.xmin - x, 0.0, x - shape.xmax)
                ddy = max(shape.ymin - y, 0.0, y - shape.ymax)
                d = math.hypot(ddx, ddy)
            else:
                return 0.0
            best = min(best, max(0.0, d))
        return best if self.shapes else math.inf

    def mass_bound(self, dist: float) -> float:
        """Upper bound on the masked mass at distance ``dist`` from the geometry."""
        if self.n_cells == 0:
            return 0.0
        return self.cell_area * self.n_cells * math.exp(-self.lam_min * dist * dist)

    def point_ok(self, x: float, y: float, budget: float) -> bool:
        d = self._distance_to_shapes(x, y)
        if self.mass_bound(d) <= budget:
            return True
        return float(self.masked_mass(np.array([[x, y]]))[0]) <= budget

    def segment_ok(self, a, b, budget: float) -> bool:
        """Feasibility of the motion a -> b: budget check at samples <= l/2 apart."""
        ax, ay = float(a[0]), float(a[1])
        bx, by = float(b[0]), float(b[1])
        if self.n_cells == 0:
            return True
        seg_len = math.hypot(bx - ax, by - ay)
        # whole-segment early out: every sample is at least (midpoint distance
        # minus half the segment length) from the geometry
        mid_d = self._distance_to_shapes(0.5 * (ax + bx), 0.5 * (ay + by))
        lower = max(0.0, mid_d - 0.5 * seg_len)
        if self.mass_bound(lower) <= budget:
            return True
        n_samples = max(2, int(math.ceil(seg_len / (self.grid.spacing * 0.5))) + 1)
        ts = np.linspace(0.0, 1.0, n_samples)
        pts = np.empty((n_samples, 2))
        pts[:, 0] = ax + ts * (bx - ax)
        pts[:, 1] = ay + ts * (by - ay)
        dists = np.array([self._distance_to_shapes(px, py) for px, py in pts])
        bounds = self.cell_area * self.n_cells * np.exp(-self.lam_min * dists * dists)
        unresolved = bounds > budget
        if not unresolved.any():
            return True
        masses = self.masked_mass(pts[unresolved])
        return bool(np.all(masses <= budget))


def check_segment(
    a,
    b,
    danger: RegionMask,
    grid: Grid,
    loc: LocalizationModel,
    mass_budget: float,
    gauge: DangerGauge | None = None,
) -> bool:
    """True iff a robot moving a -> b keeps its danger-region belief mass
    within ``mass_budget`` at every sample point along the segment."""
    if gauge is None:
        gauge = DangerGauge(danger, grid, loc)
    return gauge.segment_ok(a, b, mass_budget)


def _extract_path(nodes_x, nodes_y, parents, idx, kappa) -> PlannedPath:
    chain = []
    while idx >= 0:
        chain.append((nodes_x[idx], nodes_y[idx]))
        idx = parents[idx]
    chain.reverse()
    return PlannedPath.from_waypoints(np.array(chain), kappa)


def plan(
    start,
    danger: RegionMask,
    charger: RegionMask,
    grid: Grid,
    loc: LocalizationModel,
    cfg: PlannerConfig,
    rng: np.random.Generator,
    kappa: float,
    mass_budget: float,
    gauge: DangerGauge | None = None,
) -> PlannedPath | None:
    """Grow a feasibility-checked tree from ``start`` into the charging region.

    Returns the path found, or None when the iteration budget is exhausted.
    Raises ValueError if the start cell lies inside the danger region (the
    caller holds the measured position; that situation is its bug to handle).
    """
    start = np.asarray(start, dtype=float)
    if danger.contains_point(grid, start):
        raise ValueError("planner start lies inside the danger region")
    if charger.is_empty:
        raise ValueError("charging region is empty")
    if charger.contains_point(grid, start):
        return PlannedPath.trivial(start, kappa)
    if gauge is None:
        gauge = DangerGauge(danger, grid, loc)
    if cfg.mode is PlannerMode.GRID_RESTRICTED:
        return _plan_grid(start, danger, charger, grid, cfg, rng, kappa, mass_budget, gauge)

    ox, oy = grid.origin
    lx, ly = grid.extent
    inv_l = 1.0 / grid.spacing
    nx, ny = grid.nx, grid.ny
    danger_lookup = danger._lookup
    charger_lookup = charger._lookup
    goal_cells = charger.indices
    n_goal = goal_cells.size
    xs_goal = ox + (goal_cells % nx + 0.5) * grid.spacing
    ys_goal = oy + (goal_cells // nx + 0.5) * grid.spacing

    # greedy extension can add several nodes per iteration
    cap = 4 * cfg.max_iterations + 2
    nodes_x = np.empty(cap)
    nodes_y = np.empty(cap)
    parents = np.empty(cap, dtype=np.int64)
    nodes_x[0], nodes_y[0] = start
    parents[0] = -1
    n_nodes = 1

    for it in range(cfg.max_iterations):
        if it == 0 and cfg.goal_first:
            # deterministic first attempt toward the nearest charger cell;
            # succeeds immediately in the common unobstructed case
            j = int(np.argmin((xs_goal - start[0]) ** 2 + (ys_goal - start[1]) ** 2))
            sx, sy = xs_goal[j], ys_goal[j]
            goal_sample = True
        elif (goal_sample := rng.random() < cfg.goal_bias):
            j = int(rng.integers(n_goal))
            sx, sy = xs_goal[j], ys_goal[j]
        else:
            sx = sy = None
            for _attempt in range(64):
                px = ox + rng.random() * lx
                py = oy + rng.random() * ly
                k = min(int((py - oy) * inv_l), ny - 1) * nx + min(
                    int((px - ox) * inv_l), nx - 1
                )
                if not danger_lookup[k]:
                    sx, sy = px, py
                    break
            if sx is None:
                continue
        dx = nodes_x[:n_nodes] - sx
        dy = nodes_y[:n_nodes] - sy
        near = int(np.argmin(dx * dx + dy * dy))
        nxp, nyp = nodes_x[near], nodes_y[near]
        ddx, ddy = sx - nxp, sy - nyp
        dist = math.hypot(ddx, ddy)
        if dist < 1e-12:
            continue
        # steer in steer_step increments; greedy mode keeps extending toward
        # the sample until it is reached or a check fails
        step_x = ddx / dist * cfg.steer_step
        step_y = ddy / dist * cfg.steer_step
        remaining = dist
        parent = near
        while remaining > 1e-12 and n_nodes < cap:
            if remaining > cfg.steer_step:
                newx, newy = nxp + step_x, nyp + step_y
                advanced = cfg.steer_step
            else:
                newx, newy = sx, sy
                advanced = remaining
            k_new = min(int((newy - oy) * inv_l), ny - 1) * nx + min(
                int((newx - ox) * inv_l), nx - 1
            )
            if danger_lookup[k_new]:
                break
            if not gauge.segment_ok((nxp, nyp), (newx, newy), mass_budget):
                break
            nodes_x[n_nodes], nodes_y[n_nodes] = newx, newy
            parents[n_nodes] = parent
            parent = n_nodes
            n_nodes += 1
            if charger_lookup[k_new]:
                return _extract_path(nodes_x, nodes_y, parents, n_nodes - 1, kappa)
            nxp, nyp = newx, newy
            remaining -= advanced
            if not (cfg.goal_connect and goal_sample):
                break
    return None


def _plan_grid(
    start, danger, charger, grid, cfg, rng, kappa, mass_budget, gauge
) -> PlannedPath | None:
    """Coarser variant restricted to cell centers and 8-connected moves.

    The start snaps to its cell center; returned segments are axis-aligned or
    diagonal, so the path length can never beat a shortest-path search over
    the same cell graph.
    """
    nx, ny = grid.nx, grid.ny
    xs, ys = grid.cell_centers()
    danger_lookup = danger._lookup
    charger_lookup = charger._lookup
    free = np.flatnonzero(~danger_lookup)
    start_cell = grid.cell_of(start)

    cap = cfg.max_iterations + 1
    cells = np.empty(cap, dtype=np.int64)
    parents = np.empty(cap, dtype=np.int64)
    in_tree = np.zeros(grid.n_cells, dtype=bool)
    cells[0] = start_cell
    parents[0] = -1
    in_tree[start_cell] = True
    n_nodes = 1

    for _ in range(cfg.max_iterations):
        if rng.random() < cfg.goal_bias:
            target = int(charger.indices[int(rng.integers(charger.indices.size))])
        else:
            target = int(free[int(rng.integers(free.size))])
        tx, ty = xs[target], ys[target]
        dx = xs[cells[:n_nodes]] - tx
        dy = ys[cells[:n_nodes]] - ty
        near = int(np.argmin(dx * dx + dy * dy))
        kc = cells[near]
        cix, ciy = kc % nx, kc // nx
        tix, tiy = target % nx, target // nx
        step_x = min(max(tix - cix, -1), 1)
        step_y = min(max(tiy - ciy, -1), 1)
        if step_x == 0 and step_y == 0:
            continue
        jx, jy = cix + step_x, ciy + step_y
        if not (0 <= jx < nx and 0 <= jy < ny):
            continue
        k_new = jy * nx + jx
        if in_tree[k_new] or danger_lookup[k_new]:
            continue
        if not gauge.segment_ok((xs[kc], ys[kc]), (xs[k_new], ys[k_new]), mass_budget):
            continue
        cells[n_nodes] = k_new
        parents[n_nodes] = near
        in_tree[k_new] = True
        n_nodes += 1
        if charger_lookup[k_new]:
            idx = n_nodes - 1
            chain = []
            while idx >= 0:
                chain.append((xs[cells[idx]], ys[cells[idx]]))
                idx = parents[idx]
            chain.reverse()
            return PlannedPath.from_waypoints(np.array(chain), kappa)
    return None


def advance_path(
    path: PlannedPath,
    new_start,
    gauge: DangerGauge,
    mass_budget: float,
) -> PlannedPath | None:
    """Rebase a previously planned path onto the robot's current position.

    Projects the position onto the path polyline and keeps the remaining
    tail; the fresh first segment is re-checked against the mass budget.
    Returns None when the rebased path is no longer feasible (caller should
    plan from scratch).
    """
    new_start = np.asarray(new_start, dtype=float)
    wps = path.waypoints
    if wps.shape[0] < 2:
        return PlannedPath.trivial(new_start, path.kappa)
    a = wps[:-1]
    b = wps[1:]
    seg = b - a
    seg_len_sq = (seg**2).sum(axis=1)
    seg_len_sq[seg_len_sq == 0.0] = 1e-300
    t = ((new_start - a) * seg).sum(axis=1) / seg_len_sq
    t = np.clip(t, 0.0, 1.0)
    proj = a + t[:, None] * seg
    d2 = ((proj - new_start) ** 2).sum(axis=1)
    j = int(np.argmin(d2))
    tail = [new_start, proj[j]] if d2[j] > 1e-16 else [new_start]
    tail.extend(wps[j + 1 :])
    waypoints = np.array(tail)
    keep = [waypoints[0]]
    for wp in waypoints[1:]:
        if np.hypot(*(wp - keep[-1])) > 1e-12:
            keep.append(wp)
    if len(keep) < 2:
        return PlannedPath.trivial(new_start, path.kappa)
    waypoints = np.array(keep)
    if not gauge.segment_ok(waypoints[0], waypoints[1], mass_budget):
        return None
    return PlannedPath.from_waypoints(waypoints, path.kappa)
