import numpy as np
import pytest

from densityctl.errors import CommandError, ModelError
from densityctl.grid import Boundary, Disc, Grid, mask_from_geometry
from densityctl.world import (
    EnergyParams,
    NoiseModel,
    RobotState,
    robot_streams,
    step_battery,
    step_motion,
)


@pytest.fixture
def grid():
    return Grid(64, 64, 4.0 / 64)


@pytest.fixture
def charger(grid):
    return mask_from_geometry(grid, [Disc((0.6, 2.0), 0.3)])


def make_state(pos, battery=0.5):
    p = np.asarray(pos, dtype=float)
    return RobotState(position=p.copy(), true_position=p.copy(), battery=battery)


class TestNoiseModel:
    def test_default_diffusion_relation(self):
        noise = NoiseModel(c=0.1, u_max=1.0)
        assert noise.diffusion == pytest.approx(0.045 * 0.1 * 1.0)

    def test_explicit_override_kept(self):
        noise = NoiseModel(c=0.1, u_max=1.0, diffusion=0.0)
        assert noise.diffusion == 0.0

    def test_invalid_params(self):
        with pytest.raises(ModelError):
            NoiseModel(u_max=0.0)
        with pytest.raises(ModelError):
            NoiseModel(measurement_std=-1.0)


class TestMotion:
    def test_noise_free_displacement_exact(self, grid):
        noise = NoiseModel(c=0.0, u_max=1.0, diffusion=0.0, measurement_std=0.0)
        rng = np.random.default_rng(0)
        state = make_state([1.0, 1.0])
        new = step_motion(state, np.array([1.0, 0.0]), 0.1, noise, grid, rng, rng)
        assert np.array_equal(new.true_position, [1.1, 1.0])
        assert np.array_equal(new.position, new.true_position)

    def test_overspeed_rejected(self, grid):
        noise = NoiseModel(u_max=1.0)
        rng = np.random.default_rng(0)
        with pytest.raises(CommandError):
            step_motion(make_state([1, 1]), np.array([1.1, 0.0]), 0.1, noise, grid, rng, rng)

    def test_wiener_increment_variance(self, grid):
        # law of the increment: per-axis displacement variance is 2 T dt
        noise = NoiseModel(c=0.1, u_max=1.0, measurement_std=0.0)
        dt = 0.05
        rng = np.random.default_rng(42)
        meas_rng = np.random.default_rng(43)
        state = make_state([2.0, 2.0])
        deltas = np.empty((10_000, 2))
        zero = np.zeros(2)
        for i in range(deltas.shape[0]):
            new = step_motion(state, zero, dt, noise, grid, rng, meas_rng)
            deltas[i] = new.true_position - state.true_position
            state = make_state([2.0, 2.0])  # re-anchor to avoid boundary wraps
        expected = 2.0 * noise.diffusion * dt
        for axis in (0, 1):
            assert np.var(deltas[:, axis]) == pytest.approx(expected, rel=0.05)

    def test_positions_confined_periodic_and_neumann(self):
        for boundary in (Boundary.PERIODIC, Boundary.NEUMANN):
            g = Grid(16, 16, 0.25, boundary=boundary)
            noise = NoiseModel(c=2.0, u_max=1.0, measurement_std=0.05)
            rng = np.random.default_rng(5)
            meas = np.random.default_rng(6)
            state = make_state([0.1, 3.9])
            for _ in range(500):
                state = step_motion(state, np.array([0.9, 0.0]), 0.05, noise, g, rng, meas)
                assert g.contains(state.true_position)
                assert g.contains(state.position)

    def test_measurement_noise_applied(self, grid):
        noise = NoiseModel(c=0.0, diffusion=0.0, measurement_std=0.01)
        rng = np.random.default_rng(1)
        meas = np.random.default_rng(2)
        state = make_state([2.0, 2.0])
        new = step_motion(state, np.zeros(2), 0.05, noise, grid, rng, meas)
        assert np.array_equal(new.true_position, [2.0, 2.0])
        assert not np.array_equal(new.position, new.true_position)

    def test_determinism(self, grid):
        noise = NoiseModel(c=0.5, u_max=1.0)
        trajs = []
        for _ in range(2):
            streams = robot_streams(1234, 3)
            state = make_state([1.0, 1.0])
            traj = []
            for _step in range(50):
                state = step_motion(
                    state, np.array([0.3, -0.2]), 0.05, noise, grid,
                    streams[1].motion, streams[1].measurement,
                )
                traj.append(state.true_position.copy())
            trajs.append(np.array(traj))
        assert np.array_equal(trajs[0], trajs[1])

    def test_stream_stability_under_robot_count(self):
        a = robot_streams(99, 2)
        b = robot_streams(99, 4)
        assert a[0].motion.standard_normal(4) == pytest.approx(
            b[0].motion.standard_normal(4)
        )


class TestBattery:
    def test_idle_drain_is_exactly_c2(self, grid, charger):
        params = EnergyParams(c1=0.005, c2=0.005)
        state = make_state([3.0, 3.0], battery=0.5)
        new, violation = step_battery(state, np.zeros(2), 0.05, params, charger, grid)
        assert new.battery == pytest.approx(0.5 - 0.005 * 0.05, abs=1e-15)
        assert violation == 0.0

    def test_quadratic_consumption(self, grid, charger):
        params = EnergyParams(c1=0.004, c2=0.002)
        state = make_state([3.0, 3.0], battery=0.5)
        u = np.array([0.6, 0.8])  # speed 1.0
        new, _ = step_battery(state, u, 0.1, params, charger, grid)
        assert new.battery == pytest.approx(0.5 - (0.004 + 0.002) * 0.1)

    def test_linear_consumption_switch(self, grid, charger):
        params = EnergyParams(c1=0.004, c2=0.002, model="linear")
        state = make_state([3.0, 3.0], battery=0.5)
        u = np.array([0.0, 0.5])
        new, _ = step_battery(state, u, 0.1, params, charger, grid)
        assert new.battery == pytest.approx(0.5 - (0.004 * 0.5 + 0.002) * 0.1)

    def test_charging_capped_at_full(self, grid, charger):
        params = EnergyParams()
        state = make_state([0.6, 2.0], battery=1.0)
        new, violation = step_battery(state, np.zeros(2), 0.05, params, charger, grid)
        assert new.battery == 1.0
        assert violation == 0.0

    def test_charging_rate(self, grid, charger):
        params = EnergyParams(c3=0.05)
        state = make_state([0.6, 2.0], battery=0.2)
        new, _ = step_battery(state, np.zeros(2), 0.1, params, charger, grid)
        assert new.battery == pytest.approx(0.2 + 0.05 * 0.1)

    def test_violation_event_magnitude(self, grid, charger):
        # a step ending at 0.0991 against the 0.1 threshold is a violation
        # of magnitude 0.0009, never silently clamped
        params = EnergyParams(c1=0.005, c2=0.005, e_min=0.1)
        dt = 0.05
        start = 0.0991 + params.c2 * dt
        state = make_state([3.0, 3.0], battery=start)
        new, violation = step_battery(state, np.zeros(2), dt, params, charger, grid)
        assert new.battery == pytest.approx(0.0991, abs=1e-12)
        assert violation == pytest.approx(0.0009, abs=1e-12)

    def test_monotone_decrease_outside_charger(self, grid, charger):
        params = EnergyParams()
        state = make_state([3.0, 3.0], battery=0.9)
        rng = np.random.default_rng(0)
        for _ in range(100):
            u = rng.normal(size=2) * 0.3
            new, _ = step_battery(state, u, 0.05, params, charger, grid)
            assert new.battery < state.battery
            state = new
