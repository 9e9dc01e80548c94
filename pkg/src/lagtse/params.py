"""Bounded driver-parameter distributions: sampling, time steps, fitting.

The three driver parameters are independent scaled-Beta random variables on
strictly positive bounded supports.  Sampling goes through the inverse CDF
so that a stream of uniforms maps deterministically to tuples; the inverse
is found by bisection on the regularized incomplete beta function, which
keeps draws bit-reproducible across platforms (no dependence on a library
inverse whose implementation may vary).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import betainc

from . import units
from .errors import ConfigurationError
from .relations import HistoricalSample

__all__ = [
    "BetaMarginal",
    "ParamDistribution",
    "sample_params",
    "sample_params_arrays",
    "simulation_dt",
    "filter_dt",
    "fit_params",
]

_BISECT_ITERS = 50  # halves [0, 1] to ~9e-16, beyond the 1e-12 target

SHAPE_CLIP = (0.5, 50.0)


def beta_inv_cdf(alpha: float, beta: float, u):
    """Inverse regularized-incomplete-beta by bisection, to 1e-12 absolute."""
    u = np.asarray(u, dtype=float)
    lo = np.zeros_like(u)
    hi = np.ones_like(u)
    for _ in range(_BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        below = betainc(alpha, beta, mid) < u
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class BetaMarginal:
    """Scaled Beta(alpha, beta) on ``[lo, hi]``.

    ``lo == hi`` is the documented degenerate case: a point mass, useful
    for deterministic scenarios and trivial oracles.
    """

    lo: float
    hi: float
    alpha: float = 2.0
    beta: float = 2.0

    def __post_init__(self):
        if not all(
            math.isfinite(v) for v in (self.lo, self.hi, self.alpha, self.beta)
        ):
            raise ConfigurationError("marginal fields must be finite")
        if self.lo <= 0.0 or self.hi < self.lo:
            raise ConfigurationError(
                f"support [{self.lo}, {self.hi}] must satisfy 0 < lo <= hi"
            )
        if self.alpha <= 0.0 or self.beta <= 0.0:
            raise ConfigurationError("beta shapes must be > 0")

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def inv_cdf(self, u):
        if self.width == 0.0:
            return np.full_like(np.asarray(u, dtype=float), self.lo)
        return self.lo + self.width * beta_inv_cdf(self.alpha, self.beta, u)

    @property
    def mean(self) -> float:
        return self.lo + self.width * self.alpha / (self.alpha + self.beta)


@dataclass(frozen=True)
class ParamDistribution:
    """Independent marginals for ``(v_f, d, c)``, all SI."""

    v_f: BetaMarginal
    d: BetaMarginal
    c: BetaMarginal

    @classmethod
    def from_traffic_units(
        cls,
        v_f_kmh=(40.0, 80.0),
        d_m=(5.88, 9.09),
        c_vph=(1100.0, 5100.0),
        shapes=(2.0, 2.0),
    ) -> "ParamDistribution":
        """Build from km/h / m / veh/h supports (converted to SI here)."""
        a, b = shapes
        return cls(
            v_f=BetaMarginal(
                units.kmh_to_mps(v_f_kmh[0]), units.kmh_to_mps(v_f_kmh[1]), a, b
            ),
            d=BetaMarginal(d_m[0], d_m[1], a, b),
            c=BetaMarginal(
                units.vph_to_vps(c_vph[0]), units.vph_to_vps(c_vph[1]), a, b
            ),
        )

    @classmethod
    def point_mass(cls, v_f: float, d: float, c: float) -> "ParamDistribution":
        return cls(
            v_f=BetaMarginal(v_f, v_f),
            d=BetaMarginal(d, d),
            c=BetaMarginal(c, c),
        )

    def marginals(self):
        return {"v_f": self.v_f, "d": self.d, "c": self.c}

    def to_json_dict(self) -> dict:
        out = {}
        for name, marg in self.marginals().items():
            out[name] = {
                "lo": marg.lo,
                "hi": marg.hi,
                "alpha": marg.alpha,
                "beta": marg.beta,
            }
        out["units"] = "SI"
        return out

    @classmethod
    def from_json_dict(cls, data: dict) -> "ParamDistribution":
        if data.get("units") != "SI":
            raise ConfigurationError(
                f"parameter distributions must declare units 'SI', got {data.get('units')!r}"
            )
        margs = {}
        for name in ("v_f", "d", "c"):
            if name not in data:
                raise ConfigurationError(f"missing marginal {name!r}")
            m = data[name]
            margs[name] = BetaMarginal(
                float(m["lo"]), float(m["hi"]), float(m["alpha"]), float(m["beta"])
            )
        return cls(**margs)

    def save_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)

    @classmethod
    def load_json(cls, path) -> "ParamDistribution":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


def sample_params_arrays(dist: ParamDistribution, n: int, rng: np.random.Generator):
    """Draw ``n`` tuples; returns arrays ``(v_f, d, c)`` each of length n.

    Per tuple, three uniforms are consumed in the order (v_f, d, c), so a
    given seed yields the same tuple sequence whether drawn one at a time
    or as a block.
    """
    if n < 1:
        raise ConfigurationError("need n >= 1 draws")
    u = rng.random((n, 3))
    v_f = dist.v_f.inv_cdf(u[:, 0])
    d = dist.d.inv_cdf(u[:, 1])
    c = dist.c.inv_cdf(u[:, 2])
    return v_f, d, c


def sample_params(dist: ParamDistribution, rng: np.random.Generator):
    """Draw a single driver tuple."""
    from .relations import DriverParams

    v_f, d, c = sample_params_arrays(dist, 1, rng)
    return DriverParams(float(v_f[0]), float(d[0]), float(c[0]))


def historical_sample(
    dist: ParamDistribution, size: int, rng: np.random.Generator
) -> HistoricalSample:
    """Draw the offline sample that backs the mean relation."""
    v_f, d, c = sample_params_arrays(dist, size, rng)
    return HistoricalSample(v_f, d, c)


def _c_values(params) -> np.ndarray:
    if isinstance(params, HistoricalSample):
        return params.c
    if isinstance(params, np.ndarray):
        arr = params
    else:
        arr = np.asarray(
            [p.c if hasattr(p, "c") else p for p in params], dtype=float
        )
    if arr.size == 0:
        raise ConfigurationError("empty parameter list")
    return arr


def simulation_dt(params, dn: float = 1.0) -> float:
    """Largest stable step for a sample path: ``min_n dn / c_n``.

    Meets the wave-speed stability bound for every driver in the platoon.
    ``params`` may be a list of driver tuples, a historical sample, or a
    bare array of wave slopes.
    """
    c = _c_values(params)
    return float(np.min(dn / c))


def filter_dt(sample: HistoricalSample, dn: float = 1.0) -> float:
    """Mean reaction time over the historical sample: ``mean_j dn / c_j``."""
    return float(np.mean(dn / sample.c))


# ---------------------------------------------------------------------------
# Fitting from trajectory data


def _stationary_pairs(traj, vehicle: int, accel_threshold: float):
    """(spacing, speed) pairs where the vehicle is near stationary."""
    v = traj.v[:, vehicle]
    s = traj.s[:, vehicle - 1]
    accel = np.gradient(v, traj.dt)
    keep = np.abs(accel) <= accel_threshold
    keep &= np.isfinite(s) & (s > 0.0) & (v >= 0.0)
    return s[keep], v[keep]


def _fit_single(s, v, box) -> tuple[float, float, float] | None:
    """Least squares of the clamped relation over one vehicle's pairs."""
    (vf_lo, vf_hi), (d_lo, d_hi), (c_lo, c_hi) = box

    def loss(theta):
        vf, d, c = theta
        pred = np.clip(vf - vf * np.exp(-(c / vf) * (s - d)), 0.0, vf)
        return float(np.mean((pred - v) ** 2))

    x0 = np.array(
        [
            np.clip(1.02 * np.max(v) + 0.3, vf_lo, vf_hi),
            np.clip(np.min(s), d_lo, d_hi),
            0.5 * (c_lo + c_hi),
        ]
    )
    res = minimize(
        loss,
        x0,
        method="Nelder-Mead",
        bounds=[(vf_lo, vf_hi), (d_lo, d_hi), (c_lo, c_hi)],
        options={"xatol": 1e-8, "fatol": 1e-12, "maxiter": 4000},
    )
    if not np.all(np.isfinite(res.x)):
        return None
    return tuple(res.x)


def _beta_moments(values: np.ndarray, lo: float, hi: float) -> BetaMarginal:
    """Method-of-moments Beta fit on the rescaled values, shapes clipped."""
    u = np.clip((values - lo) / (hi - lo), 1e-9, 1.0 - 1e-9)
    m = float(np.mean(u))
    var = float(np.var(u, ddof=1)) if u.size > 1 else 0.0
    var = max(var, 1e-12)
    t = m * (1.0 - m) / var - 1.0
    alpha = np.clip(m * t, *SHAPE_CLIP)
    beta = np.clip((1.0 - m) * t, *SHAPE_CLIP)
    return BetaMarginal(lo, hi, float(alpha), float(beta))


def fit_params(
    trajectories,
    bounds,
    accel_threshold: float = 0.1,
    min_pairs: int = 10,
    min_vehicles: int = 5,
) -> ParamDistribution:
    """Fit the parameter law from observed trajectories.

    Per vehicle, near-stationary (spacing, speed) pairs are selected and a
    bounded least-squares fit of the speed-spacing relation recovers that
    vehicle's tuple; the Beta marginals then come from the method of
    moments on the per-vehicle estimates.  Vehicles with fewer than
    ``min_pairs`` usable pairs are skipped.

    Parameters
    ----------
    trajectories : TrajectorySet
    bounds : ((vf_lo, vf_hi), (d_lo, d_hi), (c_lo, c_hi))
        Support box, SI units.  Fitted values are constrained to it.
    """
    n_veh = trajectories.n_vehicles
    estimates = []
    for vehicle in range(1, n_veh + 1):
        s, v = _stationary_pairs(trajectories, vehicle, accel_threshold)
        if s.size < min_pairs:
            continue
        theta = _fit_single(s, v, bounds)
        if theta is not None:
            estimates.append(theta)
    if len(estimates) < min_vehicles:
        raise ConfigurationError(
            f"only {len(estimates)} vehicles had >= {min_pairs} near-stationary "
            f"pairs (|accel| <= {accel_threshold} m/s^2); need {min_vehicles}"
        )
    est = np.asarray(estimates, dtype=float)
    return ParamDistribution(
        v_f=_beta_moments(est[:, 0], *bounds[0]),
        d=_beta_moments(est[:, 1], *bounds[1]),
        c=_beta_moments(est[:, 2], *bounds[2]),
    )
