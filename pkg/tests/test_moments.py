import numpy as np
import pytest

from lagtse import (
    ConfigurationError,
    CovMatrix,
    MeanState,
    ParamDistribution,
    apply_D,
    cov_step,
    historical_sample,
    integrate_moments,
    mean_speed,
    mean_step,
    simulate_sample_path,
)
from lagtse.moments import (
    check_cfl,
    d_matrix,
    max_mean_gradient,
    prediction_substeps,
)
from lagtse.relations import relation_curves
from lagtse.units import kmh_to_mps


class TestApplyD:
    def test_uniform_flow_is_zero(self):
        assert np.allclose(apply_D(np.full(6, 10.0), 10.0), 0.0)

    def test_two_vehicle_arithmetic(self):
        np.testing.assert_allclose(apply_D(np.array([8.0, 6.0]), 10.0), [2.0, 2.0])

    def test_matches_dense_matrix(self, rng):
        speeds = rng.uniform(0.0, 20.0, 5)
        v0 = 15.0
        dense = d_matrix(5, with_boundary=True) @ np.concatenate([[v0], speeds])
        np.testing.assert_allclose(apply_D(speeds, v0), dense, atol=1e-12)

    def test_linear_part_matches(self, rng):
        speeds = rng.uniform(0.0, 20.0, 5)
        np.testing.assert_allclose(
            apply_D(speeds, 0.0), d_matrix(5) @ speeds, atol=1e-12
        )


def _stationary_setup(example_sample, s_star=15.0, n=1):
    v0 = mean_speed(s_star, example_sample)
    state = MeanState(t=0.0, s=np.full(n, s_star), x=-np.cumsum(np.full(n, s_star)))
    return state, v0


class TestMeanStep:
    def test_equilibrium_fixed_point(self, example_sample):
        state, v0 = _stationary_setup(example_sample, n=4)
        stepped = mean_step(state, 0.5, example_sample, v0)
        np.testing.assert_allclose(stepped.s, state.s, atol=1e-12)

    def test_position_advances_at_mean_speed(self, example_sample):
        state, v0 = _stationary_setup(example_sample, n=2)
        stepped = mean_step(state, 0.5, example_sample, v0)
        np.testing.assert_allclose(stepped.x - state.x, 0.5 * v0, atol=1e-12)

    def test_grid_refinement_in_vehicle_size(self, example_sample, signal_boundary):
        # the same continuum profile resolved at dn = 1, 1/2 against dn = 1/4
        n_phys, horizon = 12, 60.0
        profiles = {}
        for dn in (1.0, 0.5, 0.25):
            n_state = int(round(n_phys / dn))
            series = integrate_moments(
                n_state,
                horizon,
                signal_boundary,
                36.0 * dn,
                example_sample,
                dn=dn,
                with_covariance=False,
            )
            nu = (np.arange(n_state) + 0.5) * dn
            profiles[dn] = (nu, series.s[-1] / dn)
        nu_ref, ref = profiles[0.25]
        errs = {}
        for dn in (1.0, 0.5):
            nu, prof = profiles[dn]
            errs[dn] = np.max(np.abs(prof - np.interp(nu, nu_ref, ref)))
        assert errs[0.5] < errs[1.0]


class TestCovStep:
    def test_zero_source_stays_zero(self):
        dist = ParamDistribution.point_mass(15.0, 7.0, 0.8)
        sample = historical_sample(dist, 50, np.random.default_rng(0))
        state = MeanState(t=0.0, s=np.full(3, 20.0), x=-np.cumsum(np.full(3, 20.0)))
        cov = CovMatrix.zero(3)
        for _ in range(25):
            cov, clipped = cov_step(cov, state, 0.5, sample, 15.0)
            state = mean_step(state, 0.5, sample, 15.0)
            assert not clipped
        assert np.all(cov.P == 0.0)

    @pytest.mark.parametrize("scaling", ["alg2", "standard"])
    def test_scalar_equilibrium_oracle(self, example_sample, scaling):
        # held at a stationary state the spacing variance solves
        # dp = dt*(-2 g p) + fac * sigma2 with fac = dt^2 (alg2) or dt
        s_star = 15.0
        dt = 0.6
        v_bar, g, sigma2 = (float(a[0]) for a in relation_curves([s_star], example_sample))
        state, v0 = _stationary_setup(example_sample, s_star, n=1)
        cov = CovMatrix.zero(1)
        for _ in range(4000):
            cov, _ = cov_step(cov, state, dt, example_sample, v0, scaling)
        fac = dt * dt if scaling == "alg2" else dt
        p_star = fac * sigma2 / (2.0 * dt * g)
        assert cov.P[0, 0] == pytest.approx(p_star, rel=1e-6)

    def test_symmetry_and_psd_along_scenario(self, example_sample, signal_boundary):
        series = integrate_moments(
            6, 120.0, signal_boundary, 36.0, example_sample, dump_times=(60.0, 120.0),
            strict_psd=True,
        )
        for P in series.cov_dumps.values():
            np.testing.assert_allclose(P, P.T, atol=1e-9 * np.abs(P).max())
            eigs = np.linalg.eigvalsh(P)
            assert eigs.min() >= -1e-8 * np.trace(P)


class TestIntegrateMoments:
    def test_zero_horizon(self, example_sample, signal_boundary):
        series = integrate_moments(4, 0.0, signal_boundary, 36.0, example_sample)
        assert series.t.shape == (1,)
        np.testing.assert_array_equal(series.s[0], np.full(4, 36.0))

    def test_point_mass_reproduces_sample_path(self, signal_boundary):
        dist = ParamDistribution.point_mass(kmh_to_mps(65.0), 7.0, 0.9)
        sample = historical_sample(dist, 100, np.random.default_rng(1))
        truth = simulate_sample_path(
            5, 300.0, signal_boundary, 36.0, dist, np.random.default_rng(2)
        )
        series = integrate_moments(
            5, 300.0, signal_boundary, 36.0, sample, dt=truth.dt
        )
        assert series.t[1] == truth.t[1]
        np.testing.assert_allclose(series.s, truth.s, atol=1e-9)
        assert np.all(series.var_s == 0.0)
        assert np.all(series.var_x == 0.0)

    def test_conservation_of_platoon_length(self, example_sample, signal_boundary):
        n = 8
        series = integrate_moments(
            n, 240.0, signal_boundary, 36.0, example_sample, with_covariance=False
        )
        n_sub = prediction_substeps(series.dt, example_sample)
        dt_sub = series.dt / n_sub
        t_sub = np.arange((series.t.size - 1) * n_sub + 1) * dt_sub
        v0 = signal_boundary.speeds(t_sub)
        x0 = np.concatenate([[0.0], np.cumsum(v0[:-1] * dt_sub)])[::n_sub]
        length = x0 - series.x[:, -1]
        np.testing.assert_allclose(series.s.sum(axis=1), length, atol=1e-6)

    def test_free_flow_variance_exceeds_congested(
        self, example_sample, signal_boundary
    ):
        # a shallow platoon keeps each vehicle's free/congested phases
        # aligned with the signal windows (the stop wave lags the signal
        # by its travel time, which washes the contrast out deep upstream)
        series = integrate_moments(5, 600.0, signal_boundary, 36.0, example_sample)
        green = np.zeros(series.t.size, dtype=bool)
        red = np.zeros_like(green)
        for j in range(2, 6):
            start = (j - 1) * 120.0
            green |= (series.t > start) & (series.t <= start + 50.0)
            red |= (series.t > start + 50.0) & (series.t <= start + 120.0)
        assert series.var_s[green].mean() > series.var_s[red].mean()

    def test_dump_times_aligned_to_grid(self, example_sample, signal_boundary):
        series = integrate_moments(
            3, 30.0, signal_boundary, 36.0, example_sample, dump_times=(10.0,)
        )
        assert list(series.cov_dumps) == [10.0]
        assert series.cov_dumps[10.0].shape == (6, 6)

    def test_cfl_rejects_unstable_step(self, example_sample, signal_boundary):
        gmax = max_mean_gradient(example_sample)
        with pytest.raises(ConfigurationError):
            check_cfl(2.5 / gmax, example_sample)

    def test_reference_law_needs_two_substeps(self, example_sample):
        from lagtse.params import filter_dt

        assert prediction_substeps(filter_dt(example_sample), example_sample) == 2
