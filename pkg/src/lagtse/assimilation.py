"""Probe measurements and the discretized Kalman-Bucy filter.

Two measurement models are supported:

* **unequipped** probes report their exact position plus a spacing
  pseudo-measurement synthesized from their measured speed through a
  randomly drawn driver tuple (the inverse relation evaluated at the
  probe speed), with a per-row variance estimated from the historical
  sample at that speed;
* **equipped** probes additionally see their neighbors: per probe the
  rows are its own spacing, its follower's spacing, and the positions of
  leader, self, and follower, all exact (zero measurement covariance).

The filter alternates the moment prediction with the update

    r = m - H z-,   R = dt * H P- H^T + Omega,
    K = P- H^T R^{-1},   z = z- + K r,   P = (I - K H) P-,

with a small ridge added to R because Omega is singular by construction.
Every H row is one-hot, so products with H reduce to row/column picks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from ._threads import blas_single_thread
from .errors import ConfigurationError
from .moments import (
    MeanState,
    _clip_negative_eigenvalues,
    check_cfl,
    predict_interval,
    prediction_substeps,
    repair_cov,
)
from .params import filter_dt
from .relations import HistoricalSample
from .sim import TrajectorySet

__all__ = [
    "ProbeSet",
    "MeasurementBatch",
    "select_probes",
    "measure_unequipped",
    "measure_equipped",
    "kb_predict",
    "kb_update",
    "run_filter",
    "FilterOutput",
    "FilterConfig",
]

REGULARIZATION_M2 = 1e-6


@dataclass(frozen=True)
class ProbeSet:
    """Measured vehicle indices (1-based, distinct, sorted)."""

    indices: tuple
    n_total: int

    def __post_init__(self):
        idx = tuple(self.indices)
        if len(set(idx)) != len(idx):
            raise ConfigurationError("probe indices must be distinct")
        if idx and not (1 <= min(idx) and max(idx) <= self.n_total):
            raise ConfigurationError("probe indices out of range")
        object.__setattr__(self, "indices", tuple(sorted(idx)))

    @property
    def penetration(self) -> float:
        return len(self.indices) / self.n_total

    def __len__(self) -> int:
        return len(self.indices)


def select_probes(n_vehicles: int, rate: float, rng: np.random.Generator) -> ProbeSet:
    """Uniformly sample ``floor(rate * N)`` distinct probe vehicles."""
    if not 0.0 < rate <= 1.0:
        raise ConfigurationError("penetration rate must be in (0, 1]")
    count = int(np.floor(rate * n_vehicles))
    if count == 0:
        raise ConfigurationError(
            f"rate {rate} selects zero probes out of {n_vehicles} vehicles"
        )
    chosen = rng.choice(n_vehicles, size=count, replace=False) + 1
    return ProbeSet(indices=tuple(int(i) for i in chosen), n_total=n_vehicles)


def nested_probe_sets(n_vehicles: int, rates, rng: np.random.Generator) -> dict:
    """Probe sets for a penetration sweep, nested across rates.

    One random vehicle order is drawn; each rate takes its leading block,
    so raising the rate only ever adds information.  Sweep comparisons
    (error vs penetration) are monotone by construction in expectation.
    """
    order = rng.permutation(n_vehicles) + 1
    out = {}
    for rate in rates:
        if not 0.0 < rate <= 1.0:
            raise ConfigurationError("penetration rate must be in (0, 1]")
        count = int(np.floor(rate * n_vehicles))
        if count == 0:
            raise ConfigurationError(
                f"rate {rate} selects zero probes out of {n_vehicles} vehicles"
            )
        out[rate] = ProbeSet(
            indices=tuple(int(i) for i in order[:count]), n_total=n_vehicles
        )
    return out


@dataclass
class MeasurementBatch:
    """One update's measurements.

    ``state_index`` maps each row into the stacked state vector: spacing
    of vehicle n is entry ``n - 1``, position of vehicle n is entry
    ``N + n - 1``.  ``variance`` is the diagonal of the measurement
    covariance (zeros allowed; the update regularizes).
    """

    t: float
    values: np.ndarray
    state_index: np.ndarray
    variance: np.ndarray
    n_vehicles: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.state_index = np.asarray(self.state_index, dtype=int)
        self.variance = np.asarray(self.variance, dtype=float)
        q = self.values.size
        if not (self.state_index.size == q and self.variance.size == q):
            raise ConfigurationError("measurement arrays must share one length")
        if q:
            if np.any(self.state_index < 0) or np.any(
                self.state_index >= 2 * self.n_vehicles
            ):
                raise ConfigurationError("state index out of range")
            if np.unique(self.state_index).size != q:
                raise ConfigurationError("duplicate measurement rows")
            if np.any(self.variance < 0.0):
                raise ConfigurationError("measurement variances must be >= 0")

    def __len__(self) -> int:
        return self.values.size

    def h_matrix(self) -> np.ndarray:
        """Dense incidence matrix (one 1 per row), for checks and oracles."""
        H = np.zeros((len(self), 2 * self.n_vehicles))
        H[np.arange(len(self)), self.state_index] = 1.0
        return H

    @classmethod
    def empty(cls, t: float, n_vehicles: int) -> "MeasurementBatch":
        return cls(
            t=t,
            values=np.empty(0),
            state_index=np.empty(0, dtype=int),
            variance=np.empty(0),
            n_vehicles=n_vehicles,
        )


def _inverse_spacing(v: float, sample: HistoricalSample, j: int) -> float:
    return float(
        sample.d[j] - (sample.v_f[j] / sample.c[j]) * np.log1p(-v / sample.v_f[j])
    )


def _pseudo_spacing_moments(speeds: np.ndarray, sample: HistoricalSample):
    """Mean/variance/valid-count of the inverse relation per probe speed.

    Tuples whose free-flow speed is at or below the probe speed cannot
    produce it and are skipped.  The tuple sweep is blocked so buffers
    stay cache-resident.
    """
    v = np.asarray(speeds, dtype=float)
    q = v.size
    j_total = sample.size
    counts = np.zeros(q)
    sum_dev = np.zeros(q)
    sum_dev2 = np.zeros(q)
    # deviations are taken about the fastest tuple's value, which is valid
    # for every admissible probe speed and keeps degenerate samples exact
    jref = int(np.argmax(sample.v_f))
    with np.errstate(invalid="ignore"):
        ref = sample.d[jref] - (sample.v_f[jref] / sample.c[jref]) * np.log1p(
            -np.minimum(v / sample.v_f[jref], 1.0 - 1e-15)
        )
    block = max(min(j_total, 2**18 // max(q, 1)), 64)
    for lo in range(0, j_total, block):
        hi = lo + min(block, j_total - lo)
        ratio = np.minimum(v[:, None] / sample.v_f[lo:hi], 1.0 - 1e-15)
        table = sample.d[lo:hi] - (sample.v_f[lo:hi] / sample.c[lo:hi]) * np.log1p(
            -ratio
        )
        valid = sample.v_f[lo:hi] > v[:, None]
        dev = np.where(valid, table - ref[:, None], 0.0)
        counts += valid.sum(axis=1)
        sum_dev += dev.sum(axis=1)
        sum_dev2 += np.einsum("ij,ij->i", dev, dev)
    mean_dev = np.divide(sum_dev, counts, out=np.zeros(q), where=counts > 0)
    means = ref + mean_dev
    sq = sum_dev2 - counts * mean_dev**2
    variances = np.where(
        counts > 1, np.maximum(sq, 0.0) / np.maximum(counts - 1, 1), 0.0
    )
    return means, variances, counts


def pseudo_spacing_stats(v: float, sample: HistoricalSample):
    """Mean/variance of the inverse relation at speed ``v`` over the sample.

    Tuples whose free-flow speed is at or below ``v`` are skipped; if none
    remain the speed is outside the model's support.
    """
    means, variances, counts = _pseudo_spacing_moments([v], sample)
    if counts[0] == 0:
        raise ConfigurationError(
            f"probe speed {v:.3f} m/s is at or above every sampled free-flow speed"
        )
    return float(means[0]), float(variances[0])


def _draw_valid_tuple(v: float, sample: HistoricalSample, rng) -> int:
    """Uniform tuple index among those with ``v_f > v`` (rejection)."""
    for _ in range(512):
        j = int(rng.integers(sample.size))
        if sample.v_f[j] > v:
            return j
    valid = np.flatnonzero(sample.v_f > v)
    return int(valid[rng.integers(valid.size)])


def measure_unequipped(
    truth: TrajectorySet,
    t: float,
    probes: ProbeSet,
    sample: HistoricalSample,
    rng: np.random.Generator,
    draw_key: tuple | None = None,
) -> MeasurementBatch:
    """Position rows plus noisy spacing pseudo-measurements for each probe.

    The pseudo-spacing value is the inverse relation at the probe's
    measured speed through a tuple drawn uniformly from the historical
    sample (conditioned on the tuple being able to reach that speed); its
    variance entry is the sample variance of the same quantity.

    With ``draw_key`` (an int tuple, e.g. base entropy plus step index)
    each probe's tuple draw comes from a substream keyed by the vehicle
    id, so penetration sweeps see common random numbers: adding probes
    never resamples the draws of the probes already present.
    """
    k = truth.at_time(t)
    n = truth.n_vehicles
    idx = np.asarray(probes.indices, dtype=int)
    speeds = truth.v[k, idx]
    _, variances, counts = _pseudo_spacing_moments(speeds, sample)
    if np.any(counts == 0):
        bad = int(idx[np.argmax(counts == 0)])
        raise ConfigurationError(
            f"vehicle {bad} moves at {truth.v[k, bad]:.3f} m/s, at or above "
            "every sampled free-flow speed"
        )
    pseudo = np.empty(idx.size)
    for row in range(idx.size):
        if draw_key is not None:
            source = np.random.default_rng(
                np.random.SeedSequence(draw_key + (int(idx[row]),))
            )
        else:
            source = rng
        j = _draw_valid_tuple(float(speeds[row]), sample, source)
        pseudo[row] = _inverse_spacing(float(speeds[row]), sample, j)
    return MeasurementBatch(
        t=t,
        values=np.concatenate([pseudo, truth.x[k, idx]]),
        state_index=np.concatenate([idx - 1, n + idx - 1]),
        variance=np.concatenate([variances, np.zeros(idx.size)]),
        n_vehicles=n,
    )


def measure_equipped(
    truth: TrajectorySet, t: float, probes: ProbeSet
) -> MeasurementBatch:
    """Exact neighborhood measurements: up to five rows per probe.

    Rows for vehicle n are the spacings of n and n+1 and the positions of
    n-1, n, n+1, dropping rows that reference the boundary or run past
    the platoon tail, and deduplicating rows shared by adjacent probes.
    """
    k = truth.at_time(t)
    n = truth.n_vehicles
    spacing_ids = set()
    position_ids = set()
    for veh in probes.indices:
        spacing_ids.add(veh)
        if veh + 1 <= n:
            spacing_ids.add(veh + 1)
        for p in (veh - 1, veh, veh + 1):
            if 1 <= p <= n:
                position_ids.add(p)
    spacing_ids = sorted(spacing_ids)
    position_ids = sorted(position_ids)
    values = [float(truth.s[k, veh - 1]) for veh in spacing_ids]
    values += [float(truth.x[k, veh]) for veh in position_ids]
    index = [veh - 1 for veh in spacing_ids] + [n + veh - 1 for veh in position_ids]
    return MeasurementBatch(
        t=t,
        values=np.asarray(values),
        state_index=np.asarray(index, dtype=int),
        variance=np.zeros(len(index)),
        n_vehicles=n,
    )


def kb_predict(
    state: MeanState,
    P: np.ndarray,
    dt: float,
    sample: HistoricalSample,
    v0,
    diffusion_scaling: str = "alg2",
    strict_psd: bool = False,
):
    """Mean and covariance prediction (the shared moment machinery).

    ``v0`` is either one boundary speed held over the interval or a value
    per prediction substep.  Substepping follows the same stability rule
    as the moment integration, so the two stay bit-identical.
    """
    if np.ndim(v0) == 0:
        v0 = np.full(prediction_substeps(dt, sample, state.dn), float(v0))
    return predict_interval(state, P, dt, v0, sample, diffusion_scaling, strict_psd)


def kb_update(
    state: MeanState,
    P: np.ndarray,
    batch: MeasurementBatch,
    dt: float,
    regularization: float = REGULARIZATION_M2,
    joseph: bool = False,
    strict_psd: bool = False,
    dt_scaled_innovation: bool = False,
):
    """Measurement update; an empty batch is the identity.

    Returns ``(state, P, gain, residual)``.  The innovation covariance is
    solved, never inverted; the posterior covariance is symmetrized and
    repaired if it violates the numerical-PSD tolerance (always when a
    diagonal goes negative, every step under ``strict_psd``).

    ``dt_scaled_innovation`` multiplies the prior term of the innovation
    covariance by the step (``R = dt H P- H^T + Omega``).  That variant
    shrinks every correction by ``1/dt``, so exact measurements are only
    approached geometrically instead of being pinned; the default is the
    exact-pinning form ``R = H P- H^T + Omega``.
    """
    if len(batch) == 0:
        return state, P, None, np.empty(0)
    z = state.z()
    ix = batch.state_index
    residual = batch.values - z[ix]
    prior_factor = dt if dt_scaled_innovation else 1.0
    chol = None
    for attempt in (0, 1):
        PH = P[ix, :]  # rows of P picked by the one-hot measurement matrix
        R = prior_factor * PH[:, ix] + np.diag(batch.variance)
        R[np.diag_indices_from(R)] += regularization
        try:
            chol = cho_factor(R, lower=True, check_finite=False)
            break
        except np.linalg.LinAlgError as exc:
            if attempt == 1:
                zero_var = ix[batch.variance <= regularization]
                raise ConfigurationError(
                    "innovation covariance is singular beyond regularization; "
                    f"zero-variance rows target state entries {zero_var.tolist()}"
                ) from exc
            # a slightly indefinite prior makes R indefinite: clip and retry
            P = _clip_negative_eigenvalues(P)
    gain = cho_solve(chol, PH, check_finite=False).T  # (2N, q)
    z_new = z + gain @ residual
    if joseph:
        n2 = P.shape[0]
        IKH = np.eye(n2)
        IKH[:, ix] -= gain
        P_new = IKH @ P @ IKH.T + (gain * batch.variance) @ gain.T
    else:
        P_new = P - gain @ PH
    P_new = 0.5 * (P_new + P_new.T)
    P_new, _ = repair_cov(P_new, strict_psd)
    n = state.n
    new_state = MeanState(t=state.t, s=z_new[:n], x=z_new[n:], dn=state.dn)
    return new_state, P_new, gain, residual


@dataclass
class FilterConfig:
    """Knobs of one filter run."""

    model: str = "unequipped"  # "unequipped" | "equipped" | "none"
    diffusion_scaling: str = "alg2"
    regularization: float = REGULARIZATION_M2
    joseph: bool = False
    dt_scaled_innovation: bool = False
    keep_gains: bool = False
    hygiene_checks: bool = False
    dump_times: tuple = ()

    def __post_init__(self):
        if self.model not in ("unequipped", "equipped", "none"):
            raise ConfigurationError(f"unknown measurement model {self.model!r}")


@dataclass
class FilterOutput:
    """Posterior mean/variance series plus per-step diagnostics."""

    t: np.ndarray
    s: np.ndarray
    x: np.ndarray
    var_s: np.ndarray
    var_x: np.ndarray
    dn: float
    dt: float
    residual_rms: np.ndarray
    trace_pre_update: np.ndarray
    trace_post_update: np.ndarray
    clip_count: int = 0
    hygiene_violations: list = field(default_factory=list)
    gains: list | None = None
    cov_dumps: dict = field(default_factory=dict)

    @property
    def n_vehicles(self) -> int:
        return self.s.shape[1]


def _hygiene(P: np.ndarray, t: float, violations: list) -> None:
    # strict_psd repairs make P numerically PSD by construction; what is
    # asserted here is symmetry and a nonnegative diagonal
    scale = float(np.max(np.abs(P)))
    if scale > 0.0:
        asym = float(np.max(np.abs(P - P.T))) / scale
        if asym > 1e-9:
            violations.append((t, "symmetry", asym))
    if np.any(np.diag(P) < 0.0):
        violations.append((t, "negative variance", float(np.min(np.diag(P)))))


def run_filter(
    truth: TrajectorySet,
    probes: ProbeSet | None,
    sample: HistoricalSample,
    boundary,
    horizon_s: float,
    initial_spacing_m,
    config: FilterConfig | None = None,
    rng: np.random.Generator | None = None,
    dn: float = 1.0,
) -> FilterOutput:
    """Alternate prediction and update over the filter grid.

    The filter step is the sample's mean reaction time.  Measurements are
    generated from the truth trajectory by previous-value hold at each
    update instant.  With no probes (or ``model="none"``) the run is the
    open-loop moment integration.
    """
    config = config or FilterConfig()
    n = truth.n_vehicles
    dt = filter_dt(sample, dn)
    n_sub = prediction_substeps(dt, sample, dn)
    check_cfl(dt / n_sub, sample, dn)
    if config.model == "unequipped" and rng is None:
        raise ConfigurationError("the unequipped model draws tuples and needs an rng")
    # one base key per run: pseudo-measurement draws are then keyed by
    # (step, vehicle), giving common random numbers across probe sets
    draw_base = int(rng.integers(2**63)) if rng is not None else 0

    s0 = np.broadcast_to(np.asarray(initial_spacing_m, dtype=float), (n,)).copy()
    n_steps = int(np.floor(horizon_s / dt))
    t_grid = np.arange(n_steps + 1) * dt
    t_sub = np.arange(n_steps * n_sub + 1) * (dt / n_sub)
    v0_sub = boundary.speeds(t_sub)
    x0_grid = boundary.positions(t_grid)

    state = MeanState(t=0.0, s=s0, x=x0_grid[0] - np.cumsum(s0), dn=dn)
    P = np.zeros((2 * n, 2 * n))

    s_out = np.empty((n_steps + 1, n))
    x_out = np.empty_like(s_out)
    var_s = np.zeros_like(s_out)
    var_x = np.zeros_like(s_out)
    residual_rms = np.zeros(n_steps + 1)
    trace_pre = np.zeros(n_steps + 1)
    trace_post = np.zeros(n_steps + 1)
    gains = [] if config.keep_gains else None
    violations: list = []
    clip_count = 0
    dump_idx = {}
    for q in config.dump_times:
        k = int(np.searchsorted(t_grid, float(q) + 1e-9, side="right") - 1)
        dump_idx.setdefault(max(k, 0), []).append(float(q))
    dumps = {}

    no_measurements = config.model == "none" or probes is None or len(probes) == 0
    # strict PSD enforcement protects the innovation factorization; the
    # open-loop path stays byte-identical to the moment integration
    strict = not no_measurements

    def emit(k):
        s_out[k] = state.s
        x_out[k] = state.x
        diag = np.diag(P)
        var_s[k] = diag[:n]
        var_x[k] = diag[n:]
        for q in dump_idx.get(k, ()):
            dumps[q] = P.copy()

    with blas_single_thread():
        emit(0)
        for k in range(n_steps):
            state, P, repaired = predict_interval(
                state,
                P,
                dt,
                v0_sub[k * n_sub : (k + 1) * n_sub],
                sample,
                config.diffusion_scaling,
                strict,
            )
            clip_count += repaired
            t_now = t_grid[k + 1]
            trace_pre[k + 1] = np.trace(P)
            if no_measurements:
                trace_post[k + 1] = trace_pre[k + 1]
                emit(k + 1)
                continue
            if config.model == "equipped":
                batch = measure_equipped(truth, t_now, probes)
            else:
                batch = measure_unequipped(
                    truth, t_now, probes, sample, rng, (draw_base, k)
                )
            state, P, gain, residual = kb_update(
                state,
                P,
                batch,
                dt,
                config.regularization,
                config.joseph,
                True,
                config.dt_scaled_innovation,
            )
            trace_post[k + 1] = np.trace(P)
            residual_rms[k + 1] = (
                float(np.sqrt(np.mean(residual**2))) if residual.size else 0.0
            )
            if gains is not None:
                gains.append(gain)
            if config.hygiene_checks:
                _hygiene(P, t_now, violations)
                if trace_post[k + 1] > trace_pre[k + 1] * (1.0 + 1e-9) + 1e-12:
                    violations.append((t_now, "trace", trace_post[k + 1] - trace_pre[k + 1]))
            emit(k + 1)


    return FilterOutput(
        t=t_grid,
        s=s_out,
        x=x_out,
        var_s=var_s,
        var_x=var_x,
        dn=dn,
        dt=dt,
        residual_rms=residual_rms,
        trace_pre_update=trace_pre,
        trace_post_update=trace_post,
        clip_count=clip_count,
        hygiene_violations=violations,
        gains=gains,
        cov_dumps=dumps,
    )
