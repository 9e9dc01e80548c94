import numpy as np
import pytest

from lagtse import (
    BoundaryTrajectory,
    ConfigurationError,
    DriverParams,
    ParamDistribution,
    PhysicsError,
    SignalSpec,
    leader_speed,
    nf_spacing,
    simulate_ensemble,
    simulate_sample_path,
)
from lagtse.units import kmh_to_mps, vph_to_vps


class TestLeaderSpeed:
    def test_green_phase(self, signal_spec):
        assert leader_speed(30.0, signal_spec) == pytest.approx(kmh_to_mps(60.0))

    def test_red_phase(self, signal_spec):
        assert leader_speed(100.0, signal_spec) == 0.0

    def test_cycle_end_is_red(self, signal_spec):
        for j in range(1, 7):
            assert leader_speed(j * 120.0, signal_spec) == 0.0

    def test_red_window_open_on_left(self, signal_spec):
        assert leader_speed(50.0, signal_spec) == pytest.approx(kmh_to_mps(60.0))
        assert leader_speed(50.0 + 1e-9, signal_spec) == 0.0

    def test_post_horizon_speed(self):
        spec = SignalSpec(120.0, 70.0, kmh_to_mps(60.0), 2, kmh_to_mps(25.0))
        assert leader_speed(241.0, spec) == pytest.approx(kmh_to_mps(25.0))

    def test_negative_time_rejected(self, signal_spec):
        with pytest.raises(ConfigurationError):
            leader_speed(-1.0, signal_spec)

    def test_invalid_spec(self):
        with pytest.raises(ConfigurationError):
            SignalSpec(100.0, 120.0, 10.0, 3, 10.0)


class TestBoundary:
    def test_constant_speed_position(self):
        boundary = BoundaryTrajectory(lambda t: np.full_like(np.asarray(t, float), 10.0))
        grid = np.linspace(0.0, 50.0, 201)
        np.testing.assert_allclose(boundary.positions(grid), 10.0 * grid, atol=1e-9)

    def test_series_interpolation(self):
        boundary = BoundaryTrajectory.from_series([0.0, 10.0], [0.0, 10.0])
        assert boundary.speeds(np.array([5.0]))[0] == pytest.approx(5.0)

    def test_origin(self):
        boundary = BoundaryTrajectory(lambda t: np.zeros_like(np.asarray(t, float)), 100.0)
        assert boundary.positions(np.array([0.0, 5.0]))[1] == 100.0


class TestSamplePath:
    def test_single_follower_relaxes_to_equilibrium(self):
        # a faster-than-leader driver settles at its 60 km/h spacing
        theta = DriverParams(kmh_to_mps(70.0), 7.0, vph_to_vps(3000.0))
        dist = ParamDistribution.point_mass(theta.v_f, theta.d, theta.c)
        boundary = BoundaryTrajectory(
            lambda t: np.full_like(np.asarray(t, float), kmh_to_mps(60.0))
        )
        traj = simulate_sample_path(1, 600.0, boundary, 60.0, dist, np.random.default_rng(1))
        target = nf_spacing(kmh_to_mps(60.0), theta)
        assert abs(traj.s[-1, 0] - target) < 0.1
        # monotone approach from above
        assert np.all(np.diff(traj.s[:, 0]) <= 1e-9)

    def test_equilibrium_is_stationary(self):
        theta = DriverParams(kmh_to_mps(70.0), 7.0, vph_to_vps(3000.0))
        dist = ParamDistribution.point_mass(theta.v_f, theta.d, theta.c)
        v0 = kmh_to_mps(50.0)
        boundary = BoundaryTrajectory(lambda t: np.full_like(np.asarray(t, float), v0))
        s_eq = nf_spacing(v0, theta)
        traj = simulate_sample_path(5, 120.0, boundary, s_eq, dist, np.random.default_rng(2))
        np.testing.assert_allclose(traj.s, s_eq, atol=1e-9)

    def test_spacing_identity(self, example_dist, signal_boundary, rng):
        traj = simulate_sample_path(20, 120.0, signal_boundary, 36.0, example_dist, rng)
        gap = traj.x[:, :-1] - traj.x[:, 1:]
        np.testing.assert_allclose(gap, traj.s, atol=1e-9)

    def test_speed_bounds(self, example_dist, signal_boundary, rng):
        traj = simulate_sample_path(20, 240.0, signal_boundary, 36.0, example_dist, rng)
        assert np.all(traj.v[:, 1:] >= 0.0)
        assert np.all(traj.v[:, 1:] <= kmh_to_mps(80.0) + 1e-12)

    def test_no_teleporting(self, example_dist, signal_boundary, rng):
        traj = simulate_sample_path(10, 120.0, signal_boundary, 36.0, example_dist, rng)
        jumps = np.abs(np.diff(traj.s, axis=0))
        assert np.all(jumps <= traj.dt * kmh_to_mps(80.0) + 1e-12)

    def test_deterministic(self, example_dist, signal_boundary):
        a = simulate_sample_path(
            8, 60.0, signal_boundary, 36.0, example_dist, np.random.default_rng(5)
        )
        b = simulate_sample_path(
            8, 60.0, signal_boundary, 36.0, example_dist, np.random.default_rng(5)
        )
        assert np.array_equal(a.x, b.x) and np.array_equal(a.v, b.v)
        assert a.dt == b.dt

    def test_dt_is_min_rule(self, example_dist, signal_boundary, rng):
        traj = simulate_sample_path(10, 60.0, signal_boundary, 36.0, example_dist, rng)
        assert traj.dt == pytest.approx(1.0 / traj.theta[2].max())

    def test_reference_scenario_forms_queues(self, example_dist, signal_boundary):
        traj = simulate_sample_path(
            200, 1000.0, signal_boundary, 36.0, example_dist, np.random.default_rng(11)
        )
        # queues: some vehicle reaches near its jam spacing during each red
        red_mask = (traj.t > 50.0) & (traj.t <= 120.0)
        assert traj.s[red_mask].min() < 10.0
        # the stop wave propagates upstream: later cycles stop deeper vehicles
        stopped = traj.v[:, 1:] < 0.5
        first_cycle = stopped[traj.t <= 120.0]
        later_cycles = stopped[(traj.t > 360.0) & (traj.t <= 720.0)]
        deepest = lambda block: int(np.max(np.where(block.any(axis=0))[0]))
        assert deepest(later_cycles) > deepest(first_cycle) >= 5
        assert traj.s.min() > 0.0

    def test_invalid_inputs(self, example_dist, signal_boundary, rng):
        with pytest.raises(ConfigurationError):
            simulate_sample_path(0, 60.0, signal_boundary, 36.0, example_dist, rng)
        with pytest.raises(ConfigurationError):
            simulate_sample_path(3, 60.0, signal_boundary, -1.0, example_dist, rng)

    def test_reversing_boundary_aborts(self, example_dist, rng):
        # an external boundary that backs up violates physics
        boundary = BoundaryTrajectory.from_series([0.0, 300.0], [-5.0, -5.0])
        with pytest.raises(PhysicsError) as err:
            simulate_sample_path(1, 300.0, boundary, 6.0, example_dist, rng)
        assert "step" in str(err.value)


class TestEnsemble:
    def test_single_member_average(self, example_dist, signal_boundary):
        ens = simulate_ensemble(1, 5, 60.0, signal_boundary, 36.0, example_dist, 3)
        member = ens.members[0]
        idx = np.searchsorted(member.t, ens.t + 1e-12, side="right") - 1
        np.testing.assert_array_equal(ens.avg_s, member.s[idx])

    def test_point_mass_members_identical(self, signal_boundary):
        dist = ParamDistribution.point_mass(kmh_to_mps(70.0), 7.0, 1.0)
        ens = simulate_ensemble(4, 5, 60.0, signal_boundary, 36.0, dist, 4)
        for m in ens.members[1:]:
            np.testing.assert_array_equal(m.s, ens.members[0].s)
        np.testing.assert_allclose(ens.avg_s, ens.members[0].s[
            np.searchsorted(ens.members[0].t, ens.t + 1e-12, side="right") - 1
        ], atol=1e-12)

    def test_common_grid_is_coarsest(self, example_dist, signal_boundary):
        ens = simulate_ensemble(6, 5, 60.0, signal_boundary, 36.0, example_dist, 5)
        dt_common = ens.t[1] - ens.t[0]
        assert dt_common == pytest.approx(max(m.dt for m in ens.members))

    def test_reproducible(self, example_dist, signal_boundary):
        a = simulate_ensemble(3, 4, 30.0, signal_boundary, 36.0, example_dist, 9)
        b = simulate_ensemble(3, 4, 30.0, signal_boundary, 36.0, example_dist, 9)
        np.testing.assert_array_equal(a.avg_s, b.avg_s)
