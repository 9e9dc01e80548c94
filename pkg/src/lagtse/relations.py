"""Speed-spacing relations for heterogeneous drivers.

Each driver is described by a 3-tuple ``(v_f, d, c)``: desired free-flow
speed (m/s), minimum safety distance (m), and the wave-slope constant
(veh/s, the inverse of the reaction time when car-following).  The
stationary speed-spacing map of a driver is exponential,

    V(s) = v_f - v_f * exp(-(c / v_f) * (s - d)),

clamped to ``[0, v_f]`` so that spacings at or below the safety distance
produce zero speed instead of a negative one.  The relation has a unique
inverse on ``[0, v_f)``,

    S(v) = d - (v_f / c) * ln(1 - v / v_f),

which is what makes it usable for assimilating speed measurements.

Population-level quantities (the mean relation, its slope, and the speed
variance at fixed spacing) are computed against a fixed historical sample
of driver tuples rather than in closed form; the sample is drawn once
offline and reused.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

__all__ = [
    "DriverParams",
    "HistoricalSample",
    "nf_speed",
    "nf_spacing",
    "mean_speed",
    "mean_spacing",
    "speed_variance",
    "mean_speed_gradient",
    "relation_curves",
]

SAMPLE_CSV_HEADER = ["v_f_mps", "d_m", "c_vps"]


@dataclass(frozen=True)
class DriverParams:
    """One driver's tuple: free-flow speed, safety distance, wave slope.

    All values SI and strictly positive: ``v_f`` in m/s, ``d`` in m/veh,
    ``c`` in veh/s.
    """

    v_f: float
    d: float
    c: float

    def __post_init__(self):
        for name in ("v_f", "d", "c"):
            value = getattr(self, name)
            if not math.isfinite(value) or value <= 0.0:
                raise ConfigurationError(
                    f"driver parameter {name}={value!r} must be finite and > 0"
                )


class HistoricalSample:
    """An immutable sample of J driver tuples backing the mean relation.

    Parameters
    ----------
    v_f, d, c : array_like
        Equal-length 1-D arrays of per-driver values (SI units).
    """

    def __init__(self, v_f, d, c):
        v_f = np.atleast_1d(np.asarray(v_f, dtype=float)).copy()
        d = np.atleast_1d(np.asarray(d, dtype=float)).copy()
        c = np.atleast_1d(np.asarray(c, dtype=float)).copy()
        if not (v_f.shape == d.shape == c.shape) or v_f.ndim != 1:
            raise ConfigurationError("sample arrays must be 1-D and equal length")
        if v_f.size < 1:
            raise ConfigurationError("sample must contain at least one tuple")
        for name, arr in (("v_f", v_f), ("d", d), ("c", c)):
            if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
                raise ConfigurationError(f"sample column {name} must be finite and > 0")
        for arr in (v_f, d, c):
            arr.flags.writeable = False
        self.v_f = v_f
        self.d = d
        self.c = c
        # per-tuple decay constants, cached for the hot evaluation path
        self._k = c / v_f
        self._kd = self._k * d
        self._k.flags.writeable = False
        self._kd.flags.writeable = False

    @property
    def size(self) -> int:
        return self.v_f.size

    def __len__(self) -> int:
        return self.v_f.size

    def tuples(self):
        """Iterate the sample as :class:`DriverParams`."""
        for j in range(self.size):
            yield DriverParams(self.v_f[j], self.d[j], self.c[j])

    @classmethod
    def from_tuples(cls, tuples) -> "HistoricalSample":
        tuples = list(tuples)
        if not tuples:
            raise ConfigurationError("empty tuple list")
        return cls(
            [t.v_f for t in tuples], [t.d for t in tuples], [t.c for t in tuples]
        )

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(SAMPLE_CSV_HEADER)
            for j in range(self.size):
                writer.writerow(
                    [repr(float(self.v_f[j])), repr(float(self.d[j])), repr(float(self.c[j]))]
                )

    @classmethod
    def read_csv(cls, path) -> "HistoricalSample":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != SAMPLE_CSV_HEADER:
                raise ConfigurationError(
                    f"expected header {SAMPLE_CSV_HEADER}, found {header}"
                )
            rows = [[float(cell) for cell in row] for row in reader if row]
        if not rows:
            raise ConfigurationError(f"no tuples in {path}")
        arr = np.asarray(rows, dtype=float)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2])


def _check_spacing(s):
    s = np.asarray(s, dtype=float)
    if not np.all(np.isfinite(s)):
        raise ConfigurationError("spacing must be finite")
    return s


def nf_speed(s, params: DriverParams):
    """Driver speed at spacing ``s``, clamped to ``[0, v_f]``.

    Increasing in ``s`` above the safety distance ``d``; identically zero
    for ``s <= d``; approaches ``v_f`` as ``s`` grows.
    """
    s = _check_spacing(s)
    raw = params.v_f - params.v_f * np.exp(-(params.c / params.v_f) * (s - params.d))
    return np.clip(raw, 0.0, params.v_f)


def nf_spacing(v, params: DriverParams):
    """Spacing at which the driver travels at speed ``v`` (inverse map).

    Defined for ``0 <= v < v_f``; the logarithm is singular at ``v_f``.
    """
    v = np.asarray(v, dtype=float)
    if np.any(~np.isfinite(v)) or np.any(v < 0.0):
        raise ConfigurationError("speed must be finite and >= 0")
    if np.any(v >= params.v_f):
        raise ConfigurationError(
            f"speed {np.max(v):.6g} m/s is at or above the free-flow speed "
            f"{params.v_f:.6g} m/s; the inverse relation is undefined there"
        )
    out = params.d - (params.v_f / params.c) * np.log1p(-v / params.v_f)
    return out if np.ndim(v) else float(out)


def _speed_matrix(s, sample: HistoricalSample):
    """Clamped speeds of every sample tuple at every spacing: shape (len(s), J)."""
    s = np.atleast_1d(_check_spacing(s))
    col = s[:, None]
    raw = sample.v_f - sample.v_f * np.exp(
        -(sample.c / sample.v_f) * (col - sample.d)
    )
    np.clip(raw, 0.0, sample.v_f, out=raw)
    return s, raw


def mean_speed(s, sample: HistoricalSample):
    """Mean relation: average of the per-tuple speeds at spacing ``s``."""
    s_arr, speeds = _speed_matrix(s, sample)
    out = speeds.mean(axis=1)
    return out if np.ndim(s) else float(out[0])


def speed_variance(s, sample: HistoricalSample):
    """Sample variance (ddof=1) of the per-tuple speeds at spacing ``s``."""
    if sample.size < 2:
        raise ConfigurationError("speed_variance needs a sample of at least 2 tuples")
    s_arr, speeds = _speed_matrix(s, sample)
    out = speeds.var(axis=1, ddof=1)
    return out if np.ndim(s) else float(out[0])


def mean_speed_gradient(s, sample: HistoricalSample):
    """Slope of the mean relation, averaged analytically over the sample.

    Per tuple the slope is ``c * exp(-(c / v_f) * (s - d))`` above the
    safety distance and zero below it; at ``s == d`` exactly the right
    limit ``c`` is used so the value is deterministic at the kink.
    """
    s_arr, speeds = _speed_matrix(s, sample)
    grads = _gradient_matrix(s_arr, speeds, sample)
    out = grads.mean(axis=1)
    return out if np.ndim(s) else float(out[0])


def _gradient_matrix(s_arr, speeds, sample):
    # exp(-(c/v_f)(s-d)) recovered from the clamped speed; clamp region has
    # zero slope, with the kink s == d assigned its right limit c.
    decay = (sample.v_f - speeds) / sample.v_f
    return np.where(s_arr[:, None] >= sample.d, sample.c * decay, 0.0)


def mean_spacing(v: float, sample: HistoricalSample, tol: float = 1e-10) -> float:
    """Spacing at which the mean relation reaches speed ``v`` (bisection).

    Defined for ``0 < v < sup`` of the mean relation (the average of the
    free-flow speeds); the mean relation is monotone so the root is unique
    up to the flat clamp region at low spacings.
    """
    v = float(v)
    v_sup = float(np.mean(sample.v_f))
    if not 0.0 < v < v_sup:
        raise ConfigurationError(
            f"speed {v:.6g} m/s outside the mean relation's range (0, {v_sup:.6g})"
        )
    lo = float(np.min(sample.d))
    hi = float(np.max(sample.d)) + 1.0
    while mean_speed(hi, sample) < v:
        hi *= 2.0
        if hi > 1e9:
            raise ConfigurationError(f"mean relation never reaches {v:.6g} m/s")
    while hi - lo > tol * max(hi, 1.0):
        mid = 0.5 * (lo + hi)
        if mean_speed(mid, sample) < v:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def relation_curves(s, sample: HistoricalSample):
    """Mean relation, its gradient, and the speed variance in one pass.

    Returns ``(v_bar, g_bar, sigma2)`` as arrays shaped like ``s``.  This
    is the hot path of the moment and filter recursions: one exponential
    evaluation per (spacing, tuple) pair serves all three curves.
    """
    s_arr = np.atleast_1d(_check_spacing(s))
    n = s_arr.size
    j = sample.size
    # Tuple blocks sized to stay cache-resident: the naive (n, J) buffers
    # are tens of MB and turn every pass into a DRAM round trip.
    block = max(min(j, 2**18 // max(n, 1)), 64)
    # speeds are accumulated about a per-spacing reference (the first
    # tuple's speed), which keeps the variance exact for degenerate
    # samples and numerically stable in general
    ref = None
    sum_dev = np.zeros(n)
    sum_dev2 = np.zeros(n)
    sum_g = np.zeros(n)
    scratch = np.empty((n, min(block, j)))
    speeds = np.empty_like(scratch)
    for lo in range(0, j, block):
        hi = min(lo + block, j)
        E = scratch[:, : hi - lo]
        V = speeds[:, : hi - lo]
        np.multiply(s_arr[:, None], -sample._k[lo:hi], out=E)
        E += sample._kd[lo:hi]
        # overflow deep inside the clamp region is benign: the speed
        # clamps to zero and the slope mask drops the tuple
        with np.errstate(over="ignore"):
            np.exp(E, out=E)
            np.multiply(E, sample.v_f[lo:hi], out=V)
        np.subtract(sample.v_f[lo:hi], V, out=V)
        np.maximum(V, 0.0, out=V)
        if ref is None:
            ref = V[:, 0].copy()
        V -= ref[:, None]
        sum_dev += V.sum(axis=1)
        sum_dev2 += np.einsum("ij,ij->i", V, V)
        # slope per tuple is c * E above the safety distance (E <= 1)
        E[E > 1.0] = 0.0
        sum_g += E @ sample.c[lo:hi]
    mean_dev = sum_dev / j
    v_bar = ref + mean_dev
    sigma2 = sum_dev2 / j - mean_dev * mean_dev
    if j > 1:
        sigma2 *= j / (j - 1.0)
    np.clip(sigma2, 0.0, None, out=sigma2)
    g_bar = sum_g / j
    return v_bar, g_bar, sigma2
