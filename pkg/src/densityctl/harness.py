"""Closed-loop simulation: measure, densify, plan, assemble, solve, step.

Episodes are fully deterministic given a scenario and a seed; batches derive
per-run seeds by mixing the master seed with the run index and aggregate
worst-case envelopes per step.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .controller import assemble, build_program
from .density import evaluate_kernels
from .errors import InfeasibleProgramError
from .grid import build_advection
from . import grid as grid_mod
from .planner import PlannedPath, advance_path, plan
from .qp import SolveStatus, solve
from .scenario import Scenario, ScenarioConfig, config_to_flat
from .world import RobotState, robot_streams, step_battery, step_motion

ACTIVE_CLF_SLACK = 1
ACTIVE_CBF = 2
ACTIVE_ENERGY = 4


@dataclass
class RunLog:
    """Per-step series and events of one episode."""

    t: np.ndarray
    lyapunov: np.ndarray
    barrier: np.ndarray
    slack: np.ndarray
    active: np.ndarray  # bitmask per step
    plan_time: np.ndarray
    solve_time: np.ndarray
    x: np.ndarray  # (steps, robots)
    y: np.ndarray
    battery: np.ndarray
    energy_margin: np.ndarray
    energy_to_charge: np.ndarray
    u_norm: np.ndarray
    events: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)  # (step, team density)
    target: np.ndarray | None = None
    paths: list = field(default_factory=list)  # (step, robot, waypoints)
    config: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return int(self.t.size)

    @property
    def n_robots(self) -> int:
        return int(self.x.shape[1]) if self.x.size else 0

    def violations(self) -> list:
        return [e for e in self.events if e["type"] == "energy_violation"]

    def planner_failures(self) -> int:
        return sum(1 for e in self.events if e["type"] == "planner_failure")

    def solver_failures(self) -> int:
        return sum(1 for e in self.events if e["type"] == "solver_max_iterations")

    def clean(self) -> bool:
        return not self.violations() and not self.planner_failures() and not self.solver_failures()

    def summary(self) -> dict:
        violations = self.violations()
        out = {
            "steps": self.n_steps,
            "robots": self.n_robots,
            "lyapunov_initial": float(self.lyapunov[0]) if self.n_steps else 0.0,
            "lyapunov_final": float(self.lyapunov[-1]) if self.n_steps else 0.0,
            "barrier_min": float(self.barrier.min()) if self.n_steps else 0.0,
            "battery_min": float(self.battery.min()) if self.battery.size else 0.0,
            "violation_count": len(violations),
            "violation_max_magnitude": max(
                (e["magnitude"] for e in violations), default=0.0
            ),
            "planner_failures": self.planner_failures(),
            "solver_failures": self.solver_failures(),
            "plan_time_mean": float(self.plan_time.mean()) if self.n_steps else 0.0,
            "solve_time_mean": float(self.solve_time.mean()) if self.n_steps else 0.0,
        }
        return out

    def to_json(self) -> str:
        payload = {
            "series": {
                "t": self.t.tolist(),
                "lyapunov": self.lyapunov.tolist(),
                "barrier": self.barrier.tolist(),
                "slack": self.slack.tolist(),
                "active": self.active.tolist(),
                "plan_time": self.plan_time.tolist(),
                "solve_time": self.solve_time.tolist(),
                "x": self.x.tolist(),
                "y": self.y.tolist(),
                "battery": self.battery.tolist(),
                "energy_margin": self.energy_margin.tolist(),
                "energy_to_charge": self.energy_to_charge.tolist(),
                "u_norm": self.u_norm.tolist(),
            },
            "events": self.events,
            "snapshots": [
                {"step": int(step), "team": team.tolist()} for step, team in self.snapshots
            ],
            "target": self.target.tolist() if self.target is not None else None,
            "paths": [
                {"step": int(s), "robot": int(r), "waypoints": wp.tolist()}
                for s, r, wp in self.paths
            ],
            "config": self.config,
        }
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text: str) -> "RunLog":
        payload = json.loads(text)
        series = payload["series"]
        return cls(
            t=np.asarray(series["t"]),
            lyapunov=np.asarray(series["lyapunov"]),
            barrier=np.asarray(series["barrier"]),
            slack=np.asarray(series["slack"]),
            active=np.asarray(series["active"], dtype=np.int64),
            plan_time=np.asarray(series["plan_time"]),
            solve_time=np.asarray(series["solve_time"]),
            x=np.asarray(series["x"]),
            y=np.asarray(series["y"]),
            battery=np.asarray(series["battery"]),
            energy_margin=np.asarray(series["energy_margin"]),
            energy_to_charge=np.asarray(series["energy_to_charge"]),
            u_norm=np.asarray(series["u_norm"]),
            events=payload.get("events", []),
            snapshots=[
                (s["step"], np.asarray(s["team"])) for s in payload.get("snapshots", [])
            ],
            target=(
                np.asarray(payload["target"]) if payload.get("target") is not None else None
            ),
            paths=[
                (p["step"], p["robot"], np.asarray(p["waypoints"]))
                for p in payload.get("paths", [])
            ],
            config=payload.get("config", {}),
        )


def _plan_with_hysteresis(scn: Scenario, robot: int, position, prev_path, rng):
    """Fresh plan every step, with the previous path kept when its rebased
    remainder is shorter (damps tree jitter in the energy direction)."""
    cfg = scn.planner_cfg
    if scn.charger.contains_point(scn.grid, position):
        return PlannedPath.trivial(position, scn.kappa), False
    if scn.danger.contains_point(scn.grid, position):
        # measurement noise can push the measured position into a danger
        # cell; planning from there is undefined, so reuse the previous path
        fresh = None
    else:
        fresh = plan(
            position, scn.danger, scn.charger, scn.grid, scn.loc, cfg, rng,
            scn.kappa, scn.mass_budget, scn.gauge,
        )
        if fresh is None:
            fresh = plan(
                position, scn.danger, scn.charger, scn.grid, scn.loc,
                replace(cfg, max_iterations=2 * cfg.max_iterations), rng,
                scn.kappa, scn.mass_budget, scn.gauge,
            )
        if fresh is None:
            # the robot's own kernel may already exceed the budget (e.g. while
            # threading a passage); allow an escape plan that never worsens
            # its current danger mass
            own = float(scn.gauge.masked_mass(np.asarray(position)[None, :])[0])
            relaxed = max(scn.mass_budget, 1.05 * own + 1e-12)
            fresh = plan(
                position, scn.danger, scn.charger, scn.grid, scn.loc,
                replace(cfg, max_iterations=2 * cfg.max_iterations), rng,
                scn.kappa, relaxed, scn.gauge,
            )
    rebased = None
    if prev_path is not None and prev_path.length > 0.0:
        rebased = advance_path(prev_path, position, scn.gauge, scn.mass_budget)
        if rebased is None and fresh is None and prev_path.waypoints.shape[0] >= 2:
            # keep the stale path shape rather than nothing at all
            rebased = PlannedPath.from_waypoints(
                np.vstack([np.asarray(position)[None, :], prev_path.waypoints[1:]]),
                prev_path.kappa,
            )
    if fresh is None:
        if rebased is not None:
            return rebased, True
        # no previous path to fall back on: head for the nearest charger cell
        # with a conservative straight-line energy estimate
        xs, ys = scn.grid.cell_centers()
        k = scn.charger.indices[
            int(
                np.argmin(
                    (xs[scn.charger.indices] - position[0]) ** 2
                    + (ys[scn.charger.indices] - position[1]) ** 2
                )
            )
        ]
        waypoints = np.stack([np.asarray(position), np.array([xs[k], ys[k]])])
        return PlannedPath.from_waypoints(waypoints, scn.kappa), True
    if rebased is not None and rebased.length < fresh.length:
        return rebased, False
    return fresh, False


def run_episode(
    cfg: ScenarioConfig,
    entropy=None,
    snapshot_stride: int = 0,
    collect_paths: bool = False,
) -> RunLog:
    """Run one closed-loop episode and return its log.

    ``entropy`` seeds all randomness (defaults to the scenario seed); the
    controller only ever sees measured positions.
    """
    scn = Scenario(cfg)
    n = cfg.n_robots
    n_steps = cfg.n_steps
    streams = robot_streams(cfg.seed if entropy is None else entropy, n)

    states = []
    for i in range(n):
        true = np.asarray(cfg.positions[i], dtype=float)
        measured = true
        if scn.noise.measurement_std > 0:
            measured = scn.grid.confine(
                true + scn.noise.measurement_std * streams[i].measurement.standard_normal(2)
            )
        states.append(
            RobotState(position=measured, true_position=true.copy(), battery=cfg.batteries[i])
        )

    log = RunLog(
        t=np.empty(n_steps),
        lyapunov=np.empty(n_steps),
        barrier=np.empty(n_steps),
        slack=np.empty(n_steps),
        active=np.zeros(n_steps, dtype=np.int64),
        plan_time=np.empty(n_steps),
        solve_time=np.empty(n_steps),
        x=np.empty((n_steps, n)),
        y=np.empty((n_steps, n)),
        battery=np.empty((n_steps, n)),
        energy_margin=np.empty((n_steps, n)),
        energy_to_charge=np.empty((n_steps, n)),
        u_norm=np.empty((n_steps, n)),
        target=scn.target.copy(),
        config=config_to_flat(cfg),
    )

    laplacian = grid_mod.build_laplacian(scn.grid)
    prev_paths: list[PlannedPath | None] = [None] * n
    prev_solution = None
    advection = np.empty((n, scn.grid.n_cells, 2))
    docked = [False] * n

    for step in range(n_steps):
        t = step * cfg.dt
        positions = np.array([s.position for s in states])
        field_now = evaluate_kernels(scn.grid, positions, scn.loc).with_target(scn.target)

        # charging dwell: a robot deep enough inside the charger stays docked
        # under a station-keeping command until its battery clears the
        # departure threshold
        pinned: dict[int, np.ndarray] = {}
        for i in range(n):
            if docked[i]:
                if states[i].battery >= scn.depart_threshold or (
                    scn.charger_depth(positions[i]) <= 0.0
                ):
                    docked[i] = False
            elif (
                states[i].battery < scn.depart_threshold
                and scn.charger_depth(positions[i]) >= scn.dock_margin
            ):
                docked[i] = True
            if docked[i]:
                pull = scn.dock_target(positions[i]) - positions[i]
                cmd = 1.5 * pull
                speed = float(np.hypot(cmd[0], cmd[1]))
                cap = 0.4 * cfg.u_max
                if speed > cap:
                    cmd *= cap / speed
                pinned[i] = cmd

        t0 = time.perf_counter()
        paths = []
        for i in range(n):
            if i in pinned:
                path, fell_back = PlannedPath.trivial(positions[i], scn.kappa), False
            else:
                path, fell_back = _plan_with_hysteresis(
                    scn, i, positions[i], prev_paths[i], streams[i].planner
                )
            if fell_back:
                log.events.append(
                    {"type": "planner_failure", "step": step, "robot": i, "t": t}
                )
            paths.append(path)
            prev_paths[i] = path
        plan_elapsed = time.perf_counter() - t0

        for i in range(n):
            advection[i] = build_advection(scn.grid, field_now.per_robot[i])
        batteries = np.array([s.battery for s in states])
        rows = assemble(
            field_now, scn.grid, advection, laplacian, paths, batteries,
            scn.gains, scn.energy, scn.danger, scn.noise.diffusion,
        )
        for i, term in enumerate(rows.energy):
            if term.clamped:
                log.events.append(
                    {"type": "energy_margin_clamped", "step": step, "robot": i, "t": t}
                )
        program = build_program(
            rows, scn.gains, scn.energy, cfg.u_max,
            pinned=pinned if scn.energy.model == "quadratic" else None,
        )

        t0 = time.perf_counter()
        solution = solve(program, warm_start=prev_solution)
        solve_elapsed = time.perf_counter() - t0
        prev_solution = solution
        if solution.status is SolveStatus.MAX_ITERATIONS:
            log.events.append(
                {"type": "solver_max_iterations", "step": step, "t": t,
                 "kkt_residual": solution.kkt_residual}
            )
        u = solution.u.reshape(n, 2).copy()
        if scn.energy.model != "quadratic":
            for i, cmd in pinned.items():
                u[i] = cmd  # linear mode cannot pin inside the program

        # log the pre-step state with the commands chosen from it
        tol = 1e-7
        active = 0
        if solution.s > tol:
            active |= ACTIVE_CLF_SLACK
        if float(program.cbf_a @ solution.u) + program.cbf_offset <= tol:
            if float(program.cbf_a @ program.cbf_a) > 0:
                active |= ACTIVE_CBF
        if program.energy_mode == "quadratic":
            dist = np.hypot(*(u - program.mu).T) ** 2
            if np.any(dist >= program.r_sq - tol):
                active |= ACTIVE_ENERGY
        log.t[step] = t
        log.lyapunov[step] = rows.lyapunov_value
        log.barrier[step] = rows.barrier_value
        log.slack[step] = solution.s
        log.active[step] = active
        log.plan_time[step] = plan_elapsed
        log.solve_time[step] = solve_elapsed
        for i in range(n):
            log.x[step, i], log.y[step, i] = states[i].position
            log.battery[step, i] = states[i].battery
            log.energy_margin[step, i] = (
                states[i].battery - scn.energy.e_min - paths[i].energy_to_charge
            )
            log.energy_to_charge[step, i] = paths[i].energy_to_charge
            log.u_norm[step, i] = float(np.hypot(u[i, 0], u[i, 1]))
        if snapshot_stride > 0 and step % snapshot_stride == 0:
            log.snapshots.append((step, field_now.team.copy()))
        if collect_paths:
            for i in range(n):
                log.paths.append((step, i, paths[i].waypoints.copy()))

        for i in range(n):
            states[i] = step_motion(
                states[i], u[i], cfg.dt, scn.noise, scn.grid,
                streams[i].motion, streams[i].measurement,
            )
            states[i], violation = step_battery(
                states[i], u[i], cfg.dt, scn.energy, scn.charger, scn.grid
            )
            if violation > 0.0:
                log.events.append(
                    {
                        "type": "energy_violation",
                        "step": step,
                        "robot": i,
                        "t": t + cfg.dt,
                        "magnitude": violation,
                        "battery": states[i].battery,
                    }
                )
    return log


@dataclass
class BatchResult:
    """Aggregated outcome of a seeded batch of episodes."""

    n_runs: int
    master_seed: int
    t: np.ndarray
    lyapunov_worst: np.ndarray  # max over runs, per step
    barrier_worst: np.ndarray  # min over runs, per step
    battery_worst: np.ndarray  # min over runs and robots, per step
    run_summaries: list
    events: list
    wall_time: float

    @property
    def feasible_runs(self) -> int:
        return sum(1 for s in self.run_summaries if s["violation_count"] == 0)

    def summary(self) -> dict:
        magnitudes = [
            e["magnitude"]
            for e in self.events
            if e["type"] == "energy_violation"
        ]
        return {
            "runs": self.n_runs,
            "master_seed": self.master_seed,
            "feasible_runs": self.feasible_runs,
            "violation_count": len(magnitudes),
            "violation_max_magnitude": max(magnitudes, default=0.0),
            "barrier_min": float(self.barrier_worst.min()) if self.t.size else 0.0,
            "battery_min": float(self.battery_worst.min()) if self.t.size else 0.0,
            "lyapunov_final_worst": float(self.lyapunov_worst[-1]) if self.t.size else 0.0,
            "wall_time": self.wall_time,
        }

    def to_json(self) -> str:
        return json.dumps(
            {
                "summary": self.summary(),
                "series": {
                    "t": self.t.tolist(),
                    "lyapunov_worst": self.lyapunov_worst.tolist(),
                    "barrier_worst": self.barrier_worst.tolist(),
                    "battery_worst": self.battery_worst.tolist(),
                },
                "run_summaries": self.run_summaries,
                "events": self.events,
            }
        )


def _batch_worker(args):
    flat_cfg, master_seed, run_index = args
    from .scenario import config_from_flat

    cfg = config_from_flat(flat_cfg)
    log = run_episode(cfg, entropy=[master_seed, run_index])
    events = [dict(e, run=run_index) for e in log.events]
    return (
        run_index,
        log.summary(),
        events,
        log.lyapunov,
        log.barrier,
        log.battery.min(axis=1),
    )


def run_batch(
    cfg: ScenarioConfig,
    n_runs: int,
    master_seed: int,
    workers: int | None = None,
    progress=None,
) -> BatchResult:
    """Run ``n_runs`` independent episodes and aggregate worst-case envelopes.

    Per-run randomness derives from (master_seed, run index), so results are
    reproducible and independent of ``workers``.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    flat = config_to_flat(cfg)
    jobs = [(flat, master_seed, r) for r in range(n_runs)]
    t_start = time.perf_counter()
    results = []
    if workers is None:
        workers = min(n_runs, os.cpu_count() or 1)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for res in pool.map(_batch_worker, jobs):
                results.append(res)
                if progress is not None:
                    progress(len(results), n_runs)
    else:
        for job in jobs:
            results.append(_batch_worker(job))
            if progress is not None:
                progress(len(results), n_runs)
    results.sort(key=lambda r: r[0])

    n_steps = cfg.n_steps
    lyap = np.stack([r[3] for r in results])
    barrier = np.stack([r[4] for r in results])
    battery = np.stack([r[5] for r in results])
    events = [e for r in results for e in r[2]]
    return BatchResult(
        n_runs=n_runs,
        master_seed=master_seed,
        t=np.arange(n_steps) * cfg.dt,
        lyapunov_worst=lyap.max(axis=0),
        barrier_worst=barrier.min(axis=0),
        battery_worst=battery.min(axis=0),
        run_summaries=[r[1] for r in results],
        events=events,
        wall_time=time.perf_counter() - t_start,
    )
