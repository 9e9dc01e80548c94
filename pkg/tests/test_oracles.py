import numpy as np
import pytest

from lagtse import ParamDistribution, historical_sample, nf_speed
from lagtse.oracles import (
    convergence_study,
    deviation_covariance,
    mc_spacing_moments,
    mc_speed_moments,
)
from lagtse.relations import DriverParams
from lagtse.units import kmh_to_mps, vph_to_vps

POINT = ParamDistribution.point_mass(kmh_to_mps(65.0), 7.0, vph_to_vps(3000.0))
THETA = DriverParams(kmh_to_mps(65.0), 7.0, vph_to_vps(3000.0))


class TestMcSpeedMoments:
    def test_point_mass(self, rng):
        mc = mc_speed_moments(20.0, POINT, 2000, rng)
        assert mc.mean == pytest.approx(float(nf_speed(20.0, THETA)), rel=1e-12)
        # identical draws; only the mean's last-ulp rounding enters
        assert mc.variance == pytest.approx(0.0, abs=1e-25)

    def test_clamp_region(self, example_dist, rng):
        mc = mc_speed_moments(5.0, example_dist, 2000, rng)
        assert mc.mean == 0.0 and mc.variance == 0.0

    def test_two_seeds_agree(self, example_dist):
        a = mc_speed_moments(30.0, example_dist, 100_000, np.random.default_rng(1))
        b = mc_speed_moments(30.0, example_dist, 100_000, np.random.default_rng(2))
        se = np.hypot(a.se_mean, b.se_mean)
        assert abs(a.mean - b.mean) < 3.0 * se

    def test_requires_enough_draws(self, example_dist, rng):
        with pytest.raises(Exception):
            mc_speed_moments(30.0, example_dist, 10, rng)

    def test_independent_of_mean_relation_code(
        self, example_dist, rng, monkeypatch
    ):
        # the oracle must not route through the implementation it audits
        import lagtse.relations as relations

        def boom(*a, **k):  # pragma: no cover - tripwire
            raise AssertionError("oracle called the audited implementation")

        monkeypatch.setattr(relations, "mean_speed", boom)
        monkeypatch.setattr(relations, "relation_curves", boom)
        mc_speed_moments(30.0, example_dist, 2000, rng)


class TestMcSpacingMoments:
    def test_point_mass(self, rng):
        from lagtse import nf_spacing

        mc = mc_spacing_moments(kmh_to_mps(30.0), POINT, 2000, rng)
        assert mc.mean == pytest.approx(
            float(nf_spacing(kmh_to_mps(30.0), THETA)), rel=1e-12
        )
        assert mc.variance == 0.0

    def test_rejection_conditioning(self, example_dist, rng):
        # at 75 km/h only the fast tail of drivers is admissible
        mc = mc_spacing_moments(kmh_to_mps(75.0), example_dist, 50_000, rng)
        assert mc.n_draws < 50_000
        assert mc.mean > 0.0


class TestConvergenceStudy:
    def test_point_mass_errors_vanish(self, signal_boundary, rng):
        sample = historical_sample(POINT, 200, rng)
        report = convergence_study(
            POINT, sample, signal_boundary, 4, 30.0, 36.0,
            m_values=(2, 4, 8), n_seeds=2, seed=1,
        )
        assert all(err < 1e-9 for _, err in report.points)

    def test_error_shrinks_with_m(self, example_dist, example_sample, signal_boundary):
        report = convergence_study(
            example_dist, example_sample, signal_boundary, 5, 30.0, 36.0,
            m_values=(10, 100, 1000), n_seeds=3, seed=2,
        )
        by_m = {m: [] for m, _ in report.points}
        for m, err in report.points:
            by_m[m].append(err)
        means = {m: np.mean(v) for m, v in by_m.items()}
        assert means[1000] < means[100] < means[10]
        assert report.slope < -0.3

    def test_independent_mode_runs(self, example_dist, example_sample, signal_boundary):
        report = convergence_study(
            example_dist, example_sample, signal_boundary, 3, 20.0, 36.0,
            m_values=(5, 10, 20), n_seeds=2, seed=3, mode="independent",
        )
        assert report.mode == "independent"
        assert len(report.points) == 6

    def test_json_report(self, example_dist, example_sample, signal_boundary):
        report = convergence_study(
            example_dist, example_sample, signal_boundary, 3, 20.0, 36.0,
            m_values=(5, 10, 20), n_seeds=2, seed=3,
        )
        data = report.to_json_dict()
        assert set(data) == {"mode", "points", "slope", "slope_ci"}
        assert len(data["points"]) == 6


class TestDeviationCovariance:
    def test_point_mass_zero(self, signal_boundary):
        report = deviation_covariance(
            POINT, signal_boundary, 3, 30.0, m_ensemble=20, replications=60, seed=5
        )
        assert np.allclose(report.cov, 0.0, atol=1e-18)

    def test_zero_time_zero(self, example_dist, signal_boundary):
        report = deviation_covariance(
            example_dist, signal_boundary, 3, 0.0, m_ensemble=10, replications=60,
            seed=6,
        )
        assert np.allclose(report.cov[:3, :3], 0.0, atol=1e-18)

    def test_never_calls_cov_step(self, example_dist, signal_boundary, monkeypatch):
        import lagtse.moments as moments

        def boom(*a, **k):  # pragma: no cover - tripwire
            raise AssertionError("oracle called the audited implementation")

        monkeypatch.setattr(moments, "cov_step", boom)
        monkeypatch.setattr(moments, "predict_step", boom)
        deviation_covariance(
            example_dist, signal_boundary, 2, 10.0, m_ensemble=5, replications=50,
            seed=7,
        )

    def test_replication_floor(self, example_dist, signal_boundary):
        with pytest.raises(Exception):
            deviation_covariance(
                example_dist, signal_boundary, 2, 10.0, m_ensemble=5, replications=10
            )
