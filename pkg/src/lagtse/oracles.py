"""Independent brute-force verifiers for the derived quantities.

Every oracle here recomputes its target from first principles (fresh
Monte-Carlo draws, raw formulas inlined) precisely so that it shares no
code with the module it checks: the speed-moment oracle does not touch
the mean-relation implementation, and the deviation-covariance oracle
never calls the covariance recursion.  Comparisons are reported in units
of standard errors wherever a standard error is defined.

Two ensemble-averaging conventions appear in the convergence study:

* ``"coupled"`` (default): one state vector driven by the average of the
  member relations.  This is the object whose distance to the mean
  dynamics vanishes at the law-of-large-numbers rate, and it is what the
  convergence criterion measures.
* ``"independent"``: the plain average of independent realizations.  Its
  limit is the pointwise expectation of the stochastic path, which
  differs from the mean dynamics by a nonlinearity gap; the study then
  plateaus instead of converging.  Kept for side-by-side diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._threads import blas_single_thread
from .errors import ConfigurationError
from .moments import integrate_moments
from .params import ParamDistribution, sample_params_arrays
from .relations import HistoricalSample

__all__ = [
    "MCMoments",
    "ConvergenceReport",
    "mc_speed_moments",
    "mc_spacing_moments",
    "convergence_study",
    "deviation_covariance",
    "DeviationReport",
]


@dataclass
class MCMoments:
    """Monte-Carlo mean/variance with standard errors."""

    mean: float
    variance: float
    se_mean: float
    se_variance: float
    n_draws: int

    def to_json_dict(self) -> dict:
        return {
            "mean": self.mean,
            "variance": self.variance,
            "se_mean": self.se_mean,
            "se_variance": self.se_variance,
            "n_draws": self.n_draws,
        }


def _moments_with_errors(values: np.ndarray) -> MCMoments:
    n = values.size
    mean = float(np.mean(values))
    centered = values - mean
    var = float(np.sum(centered**2) / (n - 1)) if n > 1 else 0.0
    m4 = float(np.mean(centered**4))
    se_mean = float(np.sqrt(var / n))
    se_var = float(np.sqrt(max(m4 - var**2, 0.0) / n))
    return MCMoments(
        mean=mean, variance=var, se_mean=se_mean, se_variance=se_var, n_draws=n
    )


def mc_speed_moments(
    s: float, dist: ParamDistribution, n_draws: int, rng: np.random.Generator
) -> MCMoments:
    """Fresh-draw moments of the clamped stochastic speed at spacing ``s``."""
    if n_draws < 1000:
        raise ConfigurationError("use at least 1e3 draws")
    v_f, d, c = sample_params_arrays(dist, n_draws, rng)
    speeds = np.clip(v_f - v_f * np.exp(-(c / v_f) * (s - d)), 0.0, v_f)
    return _moments_with_errors(speeds)


def mc_spacing_moments(
    v: float, dist: ParamDistribution, n_draws: int, rng: np.random.Generator
) -> MCMoments:
    """Fresh-draw moments of the random inverse relation at speed ``v``.

    Draws whose free-flow speed cannot reach ``v`` are rejected, matching
    the conditioning used when synthesizing spacing pseudo-measurements.
    """
    if n_draws < 1000:
        raise ConfigurationError("use at least 1e3 draws")
    v_f, d, c = sample_params_arrays(dist, n_draws, rng)
    valid = v_f > v
    if not np.any(valid):
        raise ConfigurationError(f"speed {v:.3f} m/s above every drawn v_f")
    spacings = d[valid] - (v_f[valid] / c[valid]) * np.log1p(-v / v_f[valid])
    return _moments_with_errors(spacings)


# ---------------------------------------------------------------------------
# Ensemble machinery


def _clamped(s_col, v_f, d, c):
    return np.clip(v_f - v_f * np.exp(-(c / v_f) * (s_col - d)), 0.0, v_f)


def _coupled_average_path(
    n_vehicles, horizon_s, boundary, s0, v_f, d, c, dn=1.0
):
    """Shared-state path driven by the average of the member relations."""
    dt = float(np.min(dn / c))
    n_steps = int(np.floor(horizon_s / dt))
    t = np.arange(n_steps + 1) * dt
    v0 = boundary.speeds(t)
    s = np.empty((n_steps + 1, n_vehicles))
    s[0] = s0
    for k in range(n_steps):
        v_bar = _clamped(s[k][:, None], v_f, d, c).mean(axis=1)
        lead = np.concatenate(([v0[k]], v_bar[:-1]))
        s[k + 1] = s[k] + (dt / dn) * (lead - v_bar)
    return t, s, dt


def _independent_member_final(
    n_vehicles, horizon_s, t_eval, boundary, s0, v_f, d, c, dn=1.0
):
    """(spacing, position) rows of one realization, held at ``t_eval``."""
    dt = float(np.min(dn / c))
    n_hold = int(np.floor(t_eval / dt + 1e-12))
    n_steps = int(np.floor(horizon_s / dt))
    n_hold = min(n_hold, n_steps)
    t = np.arange(n_hold + 1) * dt
    v0 = boundary.speeds(t)
    x0 = boundary.positions(t)
    s = np.asarray(s0, dtype=float).copy()
    for k in range(n_hold):
        v = _clamped(s, v_f, d, c)
        lead = np.concatenate(([v0[k]], v[:-1]))
        s = s + (dt / dn) * (lead - v)
    x = x0[n_hold] - np.cumsum(s)
    return s, x


def _hold(t_src, values, t_query):
    idx = np.searchsorted(t_src, np.asarray(t_query) + 1e-12, side="right") - 1
    return values[np.clip(idx, 0, t_src.size - 1)]


@dataclass
class ConvergenceReport:
    """Sup-norm errors against the mean dynamics and the fitted rate."""

    mode: str
    points: list  # (M, sup_error) pairs, all seeds pooled
    slope: float
    slope_ci: tuple

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode,
            "points": [[int(m), float(e)] for m, e in self.points],
            "slope": self.slope,
            "slope_ci": list(self.slope_ci),
        }


def _fit_slope(points):
    lg = np.log10(np.asarray(points, dtype=float))
    A = np.column_stack([lg[:, 0], np.ones(len(points))])
    coef, res, *_ = np.linalg.lstsq(A, lg[:, 1], rcond=None)
    slope = float(coef[0])
    dof = max(len(points) - 2, 1)
    resid = lg[:, 1] - A @ coef
    s2 = float(resid @ resid) / dof
    sxx = float(np.sum((lg[:, 0] - lg[:, 0].mean()) ** 2))
    se = np.sqrt(s2 / sxx) if sxx > 0 else np.inf
    return slope, (slope - 1.96 * se, slope + 1.96 * se)


def convergence_study(
    dist: ParamDistribution,
    sample: HistoricalSample,
    boundary,
    n_vehicles: int,
    horizon_s: float,
    initial_spacing_m,
    m_values=(10, 100, 1000),
    n_seeds: int = 20,
    seed=0,
    mode: str = "coupled",
    dn: float = 1.0,
) -> ConvergenceReport:
    """Sup-norm distance of ensemble averages from the mean dynamics vs M.

    For each (seed, M) the study builds the ensemble average, integrates
    the mean dynamics on the matching grid, and records the sup over all
    instants and vehicles of the absolute spacing gap; the rate is the
    least-squares slope of the pooled log-log points.
    """
    if len(m_values) < 3:
        raise ConfigurationError("need at least 3 ensemble sizes")
    if mode not in ("coupled", "independent"):
        raise ConfigurationError(f"unknown mode {mode!r}")
    s0 = np.broadcast_to(
        np.asarray(initial_spacing_m, dtype=float), (n_vehicles,)
    ).copy()
    with blas_single_thread():
        root = np.random.SeedSequence(seed)
        points = []
        for stream in root.spawn(n_seeds):
            children = stream.spawn(len(m_values))
            for m_idx, m in enumerate(m_values):
                if mode == "coupled":
                    rng = np.random.default_rng(children[m_idx])
                    v_f, d, c = sample_params_arrays(dist, m, rng)
                    t, avg_s, dt = _coupled_average_path(
                        n_vehicles, horizon_s, boundary, s0, v_f, d, c, dn
                    )
                else:
                    from .sim import simulate_ensemble

                    ens = simulate_ensemble(
                        m, n_vehicles, horizon_s, boundary, s0, dist, children[m_idx], dn
                    )
                    t, avg_s = ens.t, ens.avg_s
                    dt = float(ens.t[1] - ens.t[0])
                mean = integrate_moments(
                    n_vehicles,
                    horizon_s,
                    boundary,
                    s0,
                    sample,
                    dn=dn,
                    dt=dt,
                    with_covariance=False,
                )
                mean_held = _hold(mean.t, mean.s, t)
                err = float(np.max(np.abs(avg_s - mean_held)))
                points.append((m, err))

    slope, ci = _fit_slope(points)
    return ConvergenceReport(mode=mode, points=points, slope=slope, slope_ci=ci)


@dataclass
class DeviationReport:
    """Empirical covariance of the amplified ensemble deviation."""

    t_eval: float
    m_ensemble: int
    replications: int
    cov: np.ndarray  # (2N, 2N): spacings then positions
    se: np.ndarray
    mean_avg_spacing: np.ndarray
    cov_entry_rule: str = "centered at the replication mean"

    def to_json_dict(self) -> dict:
        return {
            "t_eval": self.t_eval,
            "m_ensemble": self.m_ensemble,
            "replications": self.replications,
            "cov": self.cov.tolist(),
            "se": self.se.tolist(),
            "mean_avg_spacing": self.mean_avg_spacing.tolist(),
        }


def deviation_covariance(
    dist: ParamDistribution,
    boundary,
    n_vehicles: int,
    t_eval: float,
    m_ensemble: int = 400,
    replications: int = 200,
    initial_spacing_m=36.0,
    seed=0,
    dn: float = 1.0,
) -> DeviationReport:
    """Empirical covariance of ``sqrt(M) * (ensemble average at t_eval)``.

    Each replication simulates a fresh M-member ensemble of independent
    realizations and records the averaged state at ``t_eval``; the
    covariance across replications of the amplified average equals the
    covariance of a single realization, which is the quantity the
    covariance recursion tries to track.  Standard errors use the Wishart
    approximation.
    """
    if replications < 50:
        raise ConfigurationError("use at least 50 replications")
    s0 = np.broadcast_to(
        np.asarray(initial_spacing_m, dtype=float), (n_vehicles,)
    ).copy()
    with blas_single_thread():
        root = np.random.SeedSequence(seed)
        rows = np.empty((replications, 2 * n_vehicles))
        for r, rep_stream in enumerate(root.spawn(replications)):
            acc = np.zeros(2 * n_vehicles)
            for member_stream in rep_stream.spawn(m_ensemble):
                rng = np.random.default_rng(member_stream)
                v_f, d, c = sample_params_arrays(dist, n_vehicles, rng)
                s_row, x_row = _independent_member_final(
                    n_vehicles, t_eval, t_eval, boundary, s0, v_f, d, c, dn
                )
                acc[:n_vehicles] += s_row
                acc[n_vehicles:] += x_row
            rows[r] = acc / m_ensemble

    scaled = np.sqrt(m_ensemble) * rows
    cov = np.cov(scaled.T, ddof=1)
    diag = np.diag(cov)
    se = np.sqrt((np.outer(diag, diag) + cov**2) / (replications - 1))
    return DeviationReport(
        t_eval=t_eval,
        m_ensemble=m_ensemble,
        replications=replications,
        cov=cov,
        se=se,
        mean_avg_spacing=rows[:, :n_vehicles].mean(axis=0),
    )
