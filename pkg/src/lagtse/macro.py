"""Macroscopic post-processing: fields, queue estimates, error metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import ConfigurationError
from .relations import HistoricalSample, mean_spacing

__all__ = [
    "EulerianField",
    "QueueSeries",
    "eulerian_fields",
    "queue_estimate",
    "queue_series",
    "true_queue_series",
    "rmse",
    "mape",
]


@dataclass
class EulerianField:
    """Density/speed grids over space-time bins; empty cells are NaN."""

    x_edges: np.ndarray  # m
    t_edges: np.ndarray  # s
    density: np.ndarray  # veh/km, shape (n_t, n_x)
    speed: np.ndarray  # km/h, shape (n_t, n_x)


def eulerian_fields(
    t: np.ndarray,
    x: np.ndarray,
    v: np.ndarray,
    dx: float = 10.0,
    dtau: float = 1.0,
    dn: float = 1.0,
    spacing: np.ndarray | None = None,
) -> EulerianField:
    """Grid follower trajectories into Eulerian density and speed fields.

    Cell density is ``dn / mean spacing`` of the vehicles present (so a
    36 m uniform platoon reads ~27.8 veh/km), cell speed the plain mean.
    ``x``/``v`` are follower arrays shaped (K+1, N); ``spacing`` defaults
    to the gaps implied by ``x`` plus a leading NaN column for vehicle 1
    unless supplied.
    """
    if dx <= 0.0 or dtau <= 0.0:
        raise ConfigurationError("bin sizes must be > 0")
    if spacing is None:
        spacing = np.empty_like(x)
        spacing[:, 1:] = x[:, :-1] - x[:, 1:]
        spacing[:, 0] = np.nan
    tt = np.broadcast_to(t[:, None], x.shape).ravel()
    xx = x.ravel()
    vv = v.ravel()
    ss = spacing.ravel()
    keep = np.isfinite(xx) & np.isfinite(ss) & (ss > 0.0)
    tt, xx, vv, ss = tt[keep], xx[keep], vv[keep], ss[keep]

    x_edges = np.arange(np.floor(xx.min()), np.ceil(xx.max()) + dx, dx)
    t_edges = np.arange(t[0], t[-1] + dtau, dtau)
    ti = np.clip(np.digitize(tt, t_edges) - 1, 0, t_edges.size - 2)
    xi = np.clip(np.digitize(xx, x_edges) - 1, 0, x_edges.size - 2)
    flat = ti * (x_edges.size - 1) + xi
    n_cells = (t_edges.size - 1) * (x_edges.size - 1)
    counts = np.bincount(flat, minlength=n_cells).astype(float)
    sum_s = np.bincount(flat, weights=ss, minlength=n_cells)
    sum_v = np.bincount(flat, weights=vv, minlength=n_cells)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_s = sum_s / counts
        mean_v = sum_v / counts
        density = 1000.0 * dn / mean_s
    shape = (t_edges.size - 1, x_edges.size - 1)
    density = density.reshape(shape)
    speed = (mean_v * 3.6).reshape(shape)
    empty = counts.reshape(shape) == 0
    density[empty] = np.nan
    speed[empty] = np.nan
    return EulerianField(x_edges=x_edges, t_edges=t_edges, density=density, speed=speed)


@dataclass
class QueueSeries:
    """Per-time queue point estimate with a 95% confidence band."""

    t: np.ndarray
    count: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


def _longest_run(mask: np.ndarray) -> tuple[int, int]:
    """(start, length) of the longest consecutive True run; (0, 0) if none."""
    best_start, best_len = 0, 0
    start = None
    for i, flag in enumerate(mask):
        if flag and start is None:
            start = i
        if (not flag or i == mask.size - 1) and start is not None:
            end = i + 1 if flag else i
            if end - start > best_len:
                best_start, best_len = start, end - start
            start = None
    return best_start, best_len


_Z95 = 1.959963984540054


def queue_estimate(
    s_hat: np.ndarray,
    var_s: np.ndarray,
    sample: HistoricalSample,
    v_q: float = 5.0 / 3.6,
) -> tuple[int, float, float]:
    """Queue size (longest run of likely-stopped vehicles) with a 95% CI.

    A vehicle counts as queued when its spacing is likely at or below the
    spacing where the mean relation reaches the threshold speed; the
    probability uses the Gaussian marginal of each spacing estimate.  The
    CI comes from a Normal approximation to the sum of the (independent)
    queue indicators over the longest such run, clipped to [0, N].
    """
    if v_q <= 0.0:
        raise ConfigurationError("threshold speed must be > 0")
    s_q = mean_spacing(v_q, sample)
    sd = np.sqrt(np.clip(var_s, 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        zscore = (s_q - s_hat) / sd
    p = np.where(
        sd > 0.0,
        0.5 * (1.0 + erf(np.where(sd > 0.0, zscore, 0.0) / math.sqrt(2.0))),
        (s_hat <= s_q).astype(float),
    )
    start, length = _longest_run(p > 0.5)
    n = s_hat.size
    if length == 0:
        return 0, 0.0, 0.0
    run = p[start : start + length]
    mu = float(np.sum(run))
    sigma = float(np.sqrt(np.sum(run * (1.0 - run))))
    lo = float(np.clip(mu - _Z95 * sigma, 0.0, n))
    hi = float(np.clip(mu + _Z95 * sigma, 0.0, n))
    return length, lo, hi


def queue_series(filter_output, sample, v_q: float = 5.0 / 3.6) -> QueueSeries:
    """Queue estimate at every filter instant."""
    n_t = filter_output.t.size
    count = np.zeros(n_t)
    lower = np.zeros(n_t)
    upper = np.zeros(n_t)
    for k in range(n_t):
        count[k], lower[k], upper[k] = queue_estimate(
            filter_output.s[k], filter_output.var_s[k], sample, v_q
        )
    return QueueSeries(t=filter_output.t.copy(), count=count, lower=lower, upper=upper)


def true_queue_series(truth, t_grid: np.ndarray, v_q: float = 5.0 / 3.6) -> np.ndarray:
    """Longest run of truly slow vehicles at each query time (speed rule)."""
    out = np.zeros(t_grid.size)
    for k, tq in enumerate(t_grid):
        row = truth.v[truth.at_time(tq), 1:]
        _, length = _longest_run(row <= v_q)
        out[k] = length
    return out


def _select(est: np.ndarray, truth: np.ndarray, scope, probes=None):
    est = np.asarray(est, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if est.shape != truth.shape:
        raise ConfigurationError(
            f"series shapes differ: {est.shape} vs {truth.shape}"
        )
    if scope == "all" or est.ndim == 1:
        return est, truth
    if scope == "unmeasured":
        if probes is None:
            raise ConfigurationError("scope 'unmeasured' needs the probe set")
        cols = [i for i in range(est.shape[1]) if (i + 1) not in probes.indices]
        return est[:, cols], truth[:, cols]
    raise ConfigurationError(f"unknown scope {scope!r}")


def rmse(est, truth, scope: str = "all", probes=None) -> float:
    """Root mean square error over all selected vehicles and instants."""
    e, t = _select(est, truth, scope, probes)
    return float(np.sqrt(np.mean((e - t) ** 2)))


def mape(est, truth, scope: str = "all", probes=None) -> float:
    """Mean absolute percentage error; truth must stay away from zero."""
    e, t = _select(est, truth, scope, probes)
    if np.any(t == 0.0):
        raise ConfigurationError("mape undefined where the truth is zero")
    return float(np.mean(np.abs(e - t) / np.abs(t)) * 100.0)
