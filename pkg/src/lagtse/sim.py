"""Ground-truth generation: stochastic sample paths of a platoon.

A platoon of ``N`` followers trails a boundary vehicle (index 0) whose
speed profile is prescribed, typically a signal-cycle square wave.  Each
follower gets its own random parameter tuple; the spacing recursion is
explicit Euler at the largest step that satisfies the wave-speed stability
bound for every drawn driver, and positions cascade from the boundary so
the spacing identity ``s_n = x_{n-1} - x_n`` holds exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, PhysicsError
from .params import ParamDistribution, sample_params_arrays, simulation_dt

__all__ = [
    "SignalSpec",
    "BoundaryTrajectory",
    "TrajectorySet",
    "leader_speed",
    "simulate_sample_path",
    "simulate_ensemble",
    "EnsembleResult",
]


@dataclass(frozen=True)
class SignalSpec:
    """Square-wave leader profile: red for the last ``red_s`` of each cycle.

    During cycles ``j = 1..n_cycles`` the speed is zero on the window
    ``(j*cycle_s - red_s, j*cycle_s]`` and ``go_speed`` otherwise; after
    the last cycle it is ``post_speed``.  All speeds m/s, times s.
    """

    cycle_s: float
    red_s: float
    go_speed: float
    n_cycles: int
    post_speed: float

    def __post_init__(self):
        if not (0.0 < self.red_s < self.cycle_s):
            raise ConfigurationError("need 0 < red_s < cycle_s")
        if self.go_speed <= 0.0:
            raise ConfigurationError("go_speed must be > 0")
        if self.n_cycles < 1:
            raise ConfigurationError("need at least one cycle")
        if self.post_speed < 0.0:
            raise ConfigurationError("post_speed must be >= 0")


def leader_speed(t, spec: SignalSpec):
    """Boundary speed at time ``t`` (scalar or array)."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0.0):
        raise ConfigurationError("time must be >= 0")
    after = t > spec.n_cycles * spec.cycle_s
    j = np.clip(np.ceil(t / spec.cycle_s), 1, spec.n_cycles)
    red = (t > j * spec.cycle_s - spec.red_s) & (t <= j * spec.cycle_s)
    out = np.where(after, spec.post_speed, np.where(red, 0.0, spec.go_speed))
    return out if t.ndim else float(out)


class BoundaryTrajectory:
    """Boundary vehicle: a speed function plus its integrated position.

    Position is the trapezoidal integral of speed on whatever grid the
    caller supplies, from a configurable origin.
    """

    def __init__(self, speed_fn, origin_m: float = 0.0):
        self._speed_fn = speed_fn
        self.origin_m = float(origin_m)

    @classmethod
    def from_signal(cls, spec: SignalSpec, origin_m: float = 0.0):
        return cls(lambda t: leader_speed(t, spec), origin_m)

    @classmethod
    def from_series(cls, t, v, origin_m: float = 0.0):
        """Linear interpolation of a sampled speed series."""
        t = np.asarray(t, dtype=float)
        v = np.asarray(v, dtype=float)
        if t.ndim != 1 or t.shape != v.shape or t.size < 2:
            raise ConfigurationError("boundary series needs matching 1-D t, v arrays")
        if np.any(np.diff(t) <= 0):
            raise ConfigurationError("boundary timestamps must increase")
        return cls(lambda q: np.interp(q, t, v), origin_m)

    def speeds(self, t_grid: np.ndarray) -> np.ndarray:
        return np.asarray(self._speed_fn(t_grid), dtype=float)

    def positions(self, t_grid: np.ndarray) -> np.ndarray:
        v = self.speeds(t_grid)
        x = np.empty_like(v)
        x[0] = self.origin_m
        steps = np.diff(t_grid)
        x[1:] = self.origin_m + np.cumsum(0.5 * steps * (v[:-1] + v[1:]))
        return x


@dataclass
class TrajectorySet:
    """Uniform-grid trajectories of the boundary plus ``N`` followers.

    ``x`` and ``v`` have shape (K+1, N+1) with column 0 the boundary;
    ``s`` has shape (K+1, N) where column ``n-1`` is the spacing of
    vehicle ``n`` to its leader.
    """

    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    s: np.ndarray
    dt: float
    dn: float = 1.0
    theta: tuple | None = None  # realized (v_f, d, c) arrays, if simulated
    meta: dict = field(default_factory=dict)

    @property
    def n_vehicles(self) -> int:
        return self.s.shape[1]

    @property
    def n_steps(self) -> int:
        return self.t.size - 1

    def at_time(self, t_query: float):
        """Previous-value-hold row index for a query time."""
        idx = int(np.searchsorted(self.t, t_query + 1e-12, side="right") - 1)
        return min(max(idx, 0), self.t.size - 1)

    def validate(self, tol: float = 1e-9) -> None:
        gap = self.x[:, :-1] - self.x[:, 1:]
        if not np.allclose(gap, self.s, rtol=0.0, atol=tol):
            raise PhysicsError("spacing identity s_n = x_{n-1} - x_n violated")
        if np.any(self.s <= 0.0):
            raise PhysicsError("nonpositive spacing present")


def _clamped_speeds(s_row, v_f, d, c):
    raw = v_f - v_f * np.exp(-(c / v_f) * (s_row - d))
    return np.clip(raw, 0.0, v_f)


def simulate_sample_path(
    n_vehicles: int,
    horizon_s: float,
    boundary: BoundaryTrajectory,
    initial_spacing_m,
    dist: ParamDistribution,
    rng: np.random.Generator,
    dn: float = 1.0,
) -> TrajectorySet:
    """Simulate one stochastic realization of the platoon.

    Draws a parameter tuple per follower, picks the step ``min_n dn/c_n``,
    and iterates the spacing recursion; a nonpositive spacing aborts with
    the offending step rather than being clamped, since it signals an
    inconsistent scenario.
    """
    if n_vehicles < 1:
        raise ConfigurationError("need at least one follower")
    if horizon_s <= 0.0:
        raise ConfigurationError("horizon must be > 0")
    s0 = np.broadcast_to(
        np.asarray(initial_spacing_m, dtype=float), (n_vehicles,)
    ).copy()
    if np.any(s0 <= 0.0):
        raise ConfigurationError("initial spacings must be > 0")

    v_f, d, c = sample_params_arrays(dist, n_vehicles, rng)
    dt = simulation_dt(c, dn)
    n_steps = int(np.floor(horizon_s / dt))
    t = np.arange(n_steps + 1) * dt

    x = np.empty((n_steps + 1, n_vehicles + 1))
    v = np.empty_like(x)
    s = np.empty((n_steps + 1, n_vehicles))

    v[:, 0] = boundary.speeds(t)
    x[:, 0] = boundary.positions(t)
    s[0] = s0
    x[0, 1:] = x[0, 0] - np.cumsum(s0)

    for k in range(n_steps + 1):
        v[k, 1:] = _clamped_speeds(s[k], v_f, d, c)
        if k == n_steps:
            break
        s[k + 1] = s[k] + (dt / dn) * (v[k, :-1] - v[k, 1:])
        if np.any(s[k + 1] <= 0.0):
            bad = int(np.argmax(s[k + 1] <= 0.0)) + 1
            raise PhysicsError(
                f"nonpositive spacing for vehicle {bad} at step {k + 1} "
                f"(t = {(k + 1) * dt:.3f} s)"
            )
        x[k + 1, 1:] = x[k + 1, 0] - np.cumsum(s[k + 1])

    return TrajectorySet(
        t=t, x=x, v=v, s=s, dt=dt, dn=dn, theta=(v_f, d, c)
    )


@dataclass
class EnsembleResult:
    """Independent realizations plus their running average spacing process.

    Members each run on their own grid; the average lives on the coarsest
    member grid, with members carried onto it by previous-value hold.
    """

    members: list
    t: np.ndarray
    avg_s: np.ndarray
    avg_x: np.ndarray


def _hold(t_src: np.ndarray, values: np.ndarray, t_query: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(t_src, t_query + 1e-12, side="right") - 1
    return values[np.clip(idx, 0, t_src.size - 1)]


def simulate_ensemble(
    n_members: int,
    n_vehicles: int,
    horizon_s: float,
    boundary: BoundaryTrajectory,
    initial_spacing_m,
    dist: ParamDistribution,
    seed,
    dn: float = 1.0,
) -> EnsembleResult:
    """Simulate ``n_members`` independent realizations and their average.

    Member streams are spawned from the master seed by member index, so
    the ensemble is reproducible and members are independent.
    """
    if n_members < 1:
        raise ConfigurationError("need at least one member")
    root = (
        seed
        if isinstance(seed, np.random.SeedSequence)
        else np.random.SeedSequence(seed)
    )
    streams = root.spawn(n_members)
    members = [
        simulate_sample_path(
            n_vehicles,
            horizon_s,
            boundary,
            initial_spacing_m,
            dist,
            np.random.default_rng(stream),
            dn,
        )
        for stream in streams
    ]
    dt_common = max(m.dt for m in members)
    n_steps = int(np.floor(horizon_s / dt_common))
    t = np.arange(n_steps + 1) * dt_common
    avg_s = np.zeros((t.size, n_vehicles))
    avg_x = np.zeros((t.size, n_vehicles + 1))
    for m in members:
        avg_s += _hold(m.t, m.s, t)
        avg_x += _hold(m.t, m.x, t)
    avg_s /= n_members
    avg_x /= n_members
    return EnsembleResult(members=members, t=t, avg_s=avg_s, avg_x=avg_x)
