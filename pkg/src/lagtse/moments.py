"""Deterministic surrogate dynamics: mean state and covariance recursions.

The state vector stacks the N spacings above the N positions.  The mean
recursion advances spacings with the first-difference operator applied to
the mean relation (boundary speed appended) and positions with the mean
relation directly.  The covariance recursion is the explicit-Euler form of
the matrix ODE

    dP = A(t) P + P A(t)^T + (diffusion term),

where ``A = D_z G`` couples states through the mean-relation slope, and
the diffusion term injects the parameter-induced speed variance through
the same incidence structure.  Two diffusion scalings are available:

* ``"alg2"`` (default): the per-step injection carries an extra factor of
  the step, i.e. ``dt^2 * D_z Sigma D_z^T`` per step;
* ``"standard"``: the conventional Euler covariance update,
  ``dt * D_z Sigma D_z^T`` per step.

Both are kept because their predictions differ materially and the choice
is observable in the deviation-covariance verification suite.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from ._threads import blas_single_thread
from .errors import ConfigurationError
from .params import filter_dt
from .relations import HistoricalSample, relation_curves

__all__ = [
    "MeanState",
    "CovMatrix",
    "apply_D",
    "d_matrix",
    "mean_step",
    "cov_step",
    "predict_step",
    "integrate_moments",
    "MomentSeries",
    "max_mean_gradient",
    "check_cfl",
]

DIFFUSION_SCALINGS = ("alg2", "standard")


@dataclass
class MeanState:
    """Mean state snapshot: spacings and positions at one instant."""

    t: float
    s: np.ndarray
    x: np.ndarray
    dn: float = 1.0

    @property
    def n(self) -> int:
        return self.s.size

    def z(self) -> np.ndarray:
        """Stacked state vector (spacings first)."""
        return np.concatenate([self.s, self.x])


@dataclass
class CovMatrix:
    """State covariance at one instant; symmetric, numerically PSD."""

    t: float
    P: np.ndarray

    @classmethod
    def zero(cls, n: int, t: float = 0.0) -> "CovMatrix":
        return cls(t=t, P=np.zeros((2 * n, 2 * n)))


def apply_D(speeds: np.ndarray, v0: float) -> np.ndarray:
    """First differences of the speed vector with the boundary appended.

    ``[v0 - V_1, V_1 - V_2, ..., V_{N-1} - V_N]``.
    """
    speeds = np.asarray(speeds, dtype=float)
    out = np.empty_like(speeds)
    out[0] = v0 - speeds[0]
    out[1:] = speeds[:-1] - speeds[1:]
    return out


def d_matrix(n: int, with_boundary: bool = False) -> np.ndarray:
    """Dense difference operator, mainly for oracle comparisons.

    Without boundary: the linear N x N part (acts on follower speeds).
    With boundary: N x (N+1), acting on ``[v0, V_1, ..., V_N]``.
    """
    if with_boundary:
        D = np.zeros((n, n + 1))
        for i in range(n):
            D[i, i] = 1.0
            D[i, i + 1] = -1.0
        return D
    D = np.zeros((n, n))
    for i in range(n):
        D[i, i] = -1.0
        if i:
            D[i, i - 1] = 1.0
    return D


def _shift_down(rows: np.ndarray) -> np.ndarray:
    out = np.zeros_like(rows)
    out[1:] = rows[:-1]
    return out


def _diffusion_matrix(sigma2: np.ndarray, dn: float) -> np.ndarray:
    """Assemble ``D_z diag(sigma2) D_z^T`` from the incidence structure."""
    n = sigma2.size
    out = np.zeros((2 * n, 2 * n))
    # spacing-spacing block: tridiagonal
    diag = sigma2.copy()
    diag[1:] += sigma2[:-1]
    ss = out[:n, :n]
    np.fill_diagonal(ss, diag / dn**2)
    idx = np.arange(n - 1)
    ss[idx + 1, idx] = -sigma2[:-1] / dn**2
    ss[idx, idx + 1] = -sigma2[:-1] / dn**2
    # spacing-position block: D Sigma / dn
    sx = out[:n, n:]
    np.fill_diagonal(sx, -sigma2 / dn)
    sx[idx + 1, idx] = sigma2[:-1] / dn
    out[n:, :n] = sx.T
    # position-position block
    np.fill_diagonal(out[n:, n:], sigma2)
    return out


def _clip_negative_eigenvalues(P: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(P)
    w = np.clip(w, 0.0, None)
    return (v * w) @ v.T


PSD_REL_TOL = 1e-8


def ensure_psd(P: np.ndarray, rel_tol: float = PSD_REL_TOL):
    """Repair a symmetric matrix that fails the numerical-PSD tolerance.

    Accepts eigenvalues down to ``-rel_tol * trace``; anything worse gets
    its negative eigenvalues clipped to zero.  Returns ``(P, repaired)``.
    """
    n = P.shape[0]
    shift = rel_tol * max(float(np.trace(P)), 0.0) + 1e-300
    probe = P.copy()
    probe.flat[:: n + 1] += shift
    try:
        np.linalg.cholesky(probe)
        return P, False
    except np.linalg.LinAlgError:
        return _clip_negative_eigenvalues(P), True


def repair_cov(P: np.ndarray, strict: bool):
    """Spec'd covariance repair: always on a negative diagonal, and on any
    numerical-PSD violation when ``strict``."""
    if np.any(np.diag(P) < 0.0):
        return _clip_negative_eigenvalues(P), True
    if strict:
        return ensure_psd(P)
    return P, False


def predict_step(
    state: MeanState,
    P: np.ndarray | None,
    dt: float,
    sample: HistoricalSample,
    v0: float,
    diffusion_scaling: str = "alg2",
    strict_psd: bool = False,
):
    """Advance mean state and (optionally) covariance by one Euler step.

    Returns ``(new_state, new_P, repaired)`` where ``repaired`` flags an
    eigenvalue-clipping repair of the covariance (always applied when a
    diagonal goes negative; with ``strict_psd`` the full numerical-PSD
    tolerance is enforced every step).  This is the single code path
    behind the mean recursion, the covariance recursion, and the filter's
    prediction, so open-loop filtering reproduces the moment integration
    bit for bit.
    """
    if diffusion_scaling not in DIFFUSION_SCALINGS:
        raise ConfigurationError(
            f"diffusion_scaling must be one of {DIFFUSION_SCALINGS}"
        )
    v_bar, g_bar, sigma2 = relation_curves(state.s, sample)
    new_state = MeanState(
        t=state.t + dt,
        s=state.s + (dt / state.dn) * apply_D(v_bar, v0),
        x=state.x + dt * v_bar,
        dn=state.dn,
    )
    if P is None:
        return new_state, None, False

    n = state.n
    # A P with A = D_z [G 0] computed structurally: scale spacing rows by
    # the gradient, then difference them.
    W = g_bar[:, None] * P[:n, :]
    AP = np.empty_like(P)
    AP[:n] = (_shift_down(W) - W) / state.dn
    AP[n:] = W
    fac = dt * dt if diffusion_scaling == "alg2" else dt
    new_P = P + dt * (AP + AP.T) + fac * _diffusion_matrix(sigma2, state.dn)
    new_P = 0.5 * (new_P + new_P.T)
    new_P, repaired = repair_cov(new_P, strict_psd)
    return new_state, new_P, repaired


def mean_step(
    state: MeanState, dt: float, sample: HistoricalSample, v0: float
) -> MeanState:
    """One Euler step of the mean dynamics."""
    new_state, _, _ = predict_step(state, None, dt, sample, v0)
    return new_state


def cov_step(
    cov: CovMatrix,
    state: MeanState,
    dt: float,
    sample: HistoricalSample,
    v0: float,
    diffusion_scaling: str = "alg2",
) -> tuple[CovMatrix, bool]:
    """One Euler step of the covariance dynamics; state is not advanced."""
    _, new_P, clipped = predict_step(state, cov.P, dt, sample, v0, diffusion_scaling)
    return CovMatrix(t=cov.t + dt, P=new_P), clipped


def max_mean_gradient(sample: HistoricalSample, grid_points: int = 512) -> float:
    """Steepest slope of the mean relation (attained within the d-support)."""
    lo = float(np.min(sample.d))
    hi = float(np.max(sample.d))
    grid = np.linspace(max(lo - 1e-9, 1e-9), hi + 1e-9, grid_points)
    _, g, _ = relation_curves(grid, sample)
    return float(np.max(g))


def prediction_substeps(dt: float, sample: HistoricalSample, dn: float = 1.0) -> int:
    """Substeps needed so each Euler substep meets the monotone bound.

    The filter's update cadence (the mean reaction time) can land slightly
    beyond ``dn / gmax``, where the explicit recursion turns non-normal
    unstable along the platoon and measurement kicks amplify downstream;
    subdividing the prediction interval restores the bound while leaving
    the update times untouched.
    """
    gmax = max_mean_gradient(sample)
    return max(1, int(np.ceil(dt * gmax / dn - 1e-12)))


def predict_interval(
    state: MeanState,
    P: np.ndarray | None,
    dt: float,
    v0_values,
    sample: HistoricalSample,
    diffusion_scaling: str = "alg2",
    strict_psd: bool = False,
):
    """Advance one update interval in ``len(v0_values)`` equal substeps.

    Returns ``(state, P, n_repaired)``.
    """
    n_sub = len(v0_values)
    dt_sub = dt / n_sub
    repaired = 0
    for i in range(n_sub):
        state, P, rep = predict_step(
            state, P, dt_sub, sample, float(v0_values[i]), diffusion_scaling, strict_psd
        )
        repaired += int(rep)
    return state, P, repaired


def check_cfl(dt: float, sample: HistoricalSample, dn: float = 1.0) -> None:
    """Reject steps the explicit mean recursion cannot take stably.

    Hard limit: ``dt * gmax <= 2 dn`` (Euler stability for the steepest
    mean-relation slope ``gmax``).  Between ``dn/gmax`` and ``2 dn/gmax``
    the recursion is stable but may overshoot locally, which is exactly
    where the mean-reaction-time step of the filter tends to land, so
    that range only warns.
    """
    gmax = max_mean_gradient(sample)
    if dt * gmax > 2.0 * dn:
        raise ConfigurationError(
            f"step {dt:.4f} s exceeds the stability limit "
            f"2 dn/max-slope = {2.0 * dn / gmax:.4f} s for this parameter sample"
        )
    if dt * gmax > dn:
        warnings.warn(
            f"step {dt:.4f} s exceeds the monotone bound dn/max-slope = "
            f"{dn / gmax:.4f} s; the mean recursion may overshoot locally",
            stacklevel=2,
        )


@dataclass
class MomentSeries:
    """Mean and covariance-diagonal time series, plus requested full dumps."""

    t: np.ndarray
    s: np.ndarray
    x: np.ndarray
    var_s: np.ndarray
    var_x: np.ndarray
    dn: float
    dt: float
    cov_dumps: dict = field(default_factory=dict)
    clip_count: int = 0

    @property
    def n_vehicles(self) -> int:
        return self.s.shape[1]


def integrate_moments(
    n_vehicles: int,
    horizon_s: float,
    boundary,
    initial_spacing_m,
    sample: HistoricalSample,
    dn: float = 1.0,
    dt: float | None = None,
    diffusion_scaling: str = "alg2",
    dump_times=(),
    with_covariance: bool = True,
    strict_psd: bool = False,
) -> MomentSeries:
    """Integrate mean and covariance dynamics from deterministic spacings.

    ``dt`` defaults to the mean reaction time of the sample.  The initial
    covariance is zero (initial spacings are treated as known).  Full
    covariance matrices are retained only at ``dump_times``, each aligned
    to the last grid instant at or before the requested time; the diagonal
    is kept at every step.
    """
    s0 = np.broadcast_to(
        np.asarray(initial_spacing_m, dtype=float), (n_vehicles,)
    ).copy()
    if np.any(s0 <= 0.0):
        raise ConfigurationError("initial spacings must be > 0")
    if dt is None:
        dt = filter_dt(sample, dn)
    n_sub = prediction_substeps(dt, sample, dn)
    check_cfl(dt / n_sub, sample, dn)

    n_steps = int(np.floor(horizon_s / dt))
    t = np.arange(n_steps + 1) * dt
    t_sub = np.arange(n_steps * n_sub + 1) * (dt / n_sub)
    v0_sub = boundary.speeds(t_sub)
    x0_grid = boundary.positions(t)

    state = MeanState(t=0.0, s=s0, x=x0_grid[0] - np.cumsum(s0), dn=dn)
    P = np.zeros((2 * n_vehicles, 2 * n_vehicles)) if with_covariance else None

    s_out = np.empty((n_steps + 1, n_vehicles))
    x_out = np.empty_like(s_out)
    var_s = np.zeros_like(s_out)
    var_x = np.zeros_like(s_out)
    dumps = {}
    clip_count = 0
    dump_idx = {}
    for q in dump_times:
        k = int(np.searchsorted(t, float(q) + 1e-9, side="right") - 1)
        dump_idx.setdefault(max(k, 0), []).append(float(q))

    def emit(k, state, P):
        s_out[k] = state.s
        x_out[k] = state.x
        if P is not None:
            diag = np.diag(P)
            var_s[k] = diag[:n_vehicles]
            var_x[k] = diag[n_vehicles:]
        for q in dump_idx.get(k, ()):
            dumps[q] = None if P is None else P.copy()

    with blas_single_thread():
        emit(0, state, P)
        for k in range(n_steps):
            state, P, repaired = predict_interval(
                state,
                P,
                dt,
                v0_sub[k * n_sub : (k + 1) * n_sub],
                sample,
                diffusion_scaling,
                strict_psd,
            )
            clip_count += repaired
            emit(k + 1, state, P)


    return MomentSeries(
        t=t,
        s=s_out,
        x=x_out,
        var_s=var_s,
        var_x=var_x,
        dn=dn,
        dt=dt,
        cov_dumps=dumps,
        clip_count=clip_count,
    )
