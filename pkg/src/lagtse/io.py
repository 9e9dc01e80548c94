"""File formats: trajectory CSV, scenario JSON, run manifests.

All CSV is RFC-4180 with LF endings and UTF-8; floats are written with
``repr`` so read-write round trips are exact to the last bit.  Scenario
files spell units in their key names (``_kmh``, ``_vph``); everything is
converted to SI on load.  Parameter-distribution JSON is SI only.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import units
from .errors import ConfigurationError
from .params import ParamDistribution
from .sim import BoundaryTrajectory, SignalSpec, TrajectorySet

__all__ = [
    "ScenarioConfig",
    "load_scenario",
    "write_trajectory_csv",
    "read_trajectory_csv",
    "write_filter_csv",
    "build_manifest",
    "write_manifest",
]

TRAJECTORY_HEADER = ["veh_id", "t_s", "x_m", "v_mps", "s_m"]
FILTER_HEADER = ["t_s", "veh_id", "s_hat_m", "x_hat_m", "s_var_m2", "x_var_m2"]

_VERSION = "0.1.0"

_KNOWN_KEYS = {
    "n_vehicles",
    "horizon_s",
    "delta_n",
    "initial_spacing_m",
    "signal",
    "boundary_csv",
    "boundary_origin_m",
    "params",
    "params_file",
    "seed",
    "penetration",
    "measurement_model",
    "diffusion_scaling",
    "joseph_update",
    "regularization_m2",
    "mean_sample_size",
    "dump_cov",
    "queue_speed_kmh",
    "comment",
}
_KNOWN_SIGNAL_KEYS = {"cycle_s", "red_s", "go_speed_kmh", "n_cycles", "post_speed_kmh"}


@dataclass
class ScenarioConfig:
    """A fully resolved scenario, SI units throughout."""

    n_vehicles: int
    horizon_s: float
    delta_n: float
    initial_spacing_m: object  # scalar or per-vehicle list
    signal: SignalSpec | None
    boundary_csv: str | None
    boundary_origin_m: float
    distribution: ParamDistribution
    seed: int
    penetration: float
    measurement_model: str
    diffusion_scaling: str
    joseph_update: bool
    regularization_m2: float
    mean_sample_size: int
    dump_cov: tuple
    queue_speed_mps: float
    warnings: list = field(default_factory=list)

    def boundary(self) -> BoundaryTrajectory:
        if self.signal is not None:
            return BoundaryTrajectory.from_signal(self.signal, self.boundary_origin_m)
        t, v = _read_boundary_csv(self.boundary_csv)
        return BoundaryTrajectory.from_series(t, v, self.boundary_origin_m)

    def resolved_dict(self) -> dict:
        sig = None
        if self.signal is not None:
            sig = {
                "cycle_s": self.signal.cycle_s,
                "red_s": self.signal.red_s,
                "go_speed_mps": self.signal.go_speed,
                "n_cycles": self.signal.n_cycles,
                "post_speed_mps": self.signal.post_speed,
            }
        init = self.initial_spacing_m
        if isinstance(init, np.ndarray):
            init = init.tolist()
        return {
            "n_vehicles": self.n_vehicles,
            "horizon_s": self.horizon_s,
            "delta_n": self.delta_n,
            "initial_spacing_m": init,
            "signal": sig,
            "boundary_csv": self.boundary_csv,
            "boundary_origin_m": self.boundary_origin_m,
            "params": self.distribution.to_json_dict(),
            "seed": self.seed,
            "penetration": self.penetration,
            "measurement_model": self.measurement_model,
            "diffusion_scaling": self.diffusion_scaling,
            "joseph_update": self.joseph_update,
            "regularization_m2": self.regularization_m2,
            "mean_sample_size": self.mean_sample_size,
            "dump_cov": list(self.dump_cov),
            "queue_speed_kmh": units.mps_to_kmh(self.queue_speed_mps),
        }


def _read_boundary_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["t_s", "v_mps"]:
            raise ConfigurationError(
                f"boundary file {path} must have header t_s,v_mps, found {header}"
            )
        rows = [(float(a), float(b)) for a, b in reader]
    if len(rows) < 2:
        raise ConfigurationError(f"boundary file {path} needs at least 2 samples")
    arr = np.asarray(rows)
    return arr[:, 0], arr[:, 1]


def load_scenario(path) -> ScenarioConfig:
    """Parse and validate a scenario JSON file (units converted to SI)."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if not text.strip():
        raise ConfigurationError(f"scenario file {path} is empty")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"scenario file {path} is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ConfigurationError("scenario JSON must be an object")

    warnings = [f"unknown key {k!r}" for k in sorted(set(raw) - _KNOWN_KEYS)]

    def need(key):
        if key not in raw:
            raise ConfigurationError(f"scenario is missing required key {key!r}")
        return raw[key]

    n_vehicles = int(need("n_vehicles"))
    horizon_s = float(need("horizon_s"))
    if n_vehicles < 1 or horizon_s <= 0.0:
        raise ConfigurationError("need n_vehicles >= 1 and horizon_s > 0")
    delta_n = float(raw.get("delta_n", 1.0))
    if delta_n <= 0.0:
        raise ConfigurationError("delta_n must be > 0")

    init = need("initial_spacing_m")
    if isinstance(init, list):
        init = np.asarray(init, dtype=float)
        if init.size != n_vehicles:
            raise ConfigurationError(
                f"initial_spacing_m lists {init.size} values for {n_vehicles} vehicles"
            )
    else:
        init = float(init)

    has_signal = raw.get("signal") is not None
    has_boundary = raw.get("boundary_csv") is not None
    if has_signal == has_boundary:
        raise ConfigurationError(
            "exactly one of 'signal' and 'boundary_csv' must be given"
        )
    signal = None
    if has_signal:
        sig = raw["signal"]
        warnings += [
            f"unknown signal key {k!r}" for k in sorted(set(sig) - _KNOWN_SIGNAL_KEYS)
        ]
        signal = SignalSpec(
            cycle_s=float(sig["cycle_s"]),
            red_s=float(sig["red_s"]),
            go_speed=units.kmh_to_mps(float(sig["go_speed_kmh"])),
            n_cycles=int(sig["n_cycles"]),
            post_speed=units.kmh_to_mps(float(sig.get("post_speed_kmh", sig["go_speed_kmh"]))),
        )

    if ("params" in raw) == ("params_file" in raw):
        raise ConfigurationError(
            "exactly one of 'params' and 'params_file' must be given"
        )
    if "params" in raw:
        dist = ParamDistribution.from_json_dict(raw["params"])
    else:
        dist = ParamDistribution.load_json(raw["params_file"])

    penetration = float(raw.get("penetration", 0.0))
    if not 0.0 <= penetration <= 1.0:
        raise ConfigurationError("penetration must be in [0, 1]")
    model = raw.get("measurement_model", "unequipped")
    if model not in ("unequipped", "equipped", "none"):
        raise ConfigurationError(f"unknown measurement_model {model!r}")
    scaling = raw.get("diffusion_scaling", "alg2")
    if scaling not in ("alg2", "standard"):
        raise ConfigurationError(f"unknown diffusion_scaling {scaling!r}")
    mean_sample_size = int(raw.get("mean_sample_size", 10_000))
    if mean_sample_size < 2:
        raise ConfigurationError("mean_sample_size must be >= 2")

    return ScenarioConfig(
        n_vehicles=n_vehicles,
        horizon_s=horizon_s,
        delta_n=delta_n,
        initial_spacing_m=init,
        signal=signal,
        boundary_csv=raw.get("boundary_csv"),
        boundary_origin_m=float(raw.get("boundary_origin_m", 0.0)),
        distribution=dist,
        seed=int(raw.get("seed", 0)),
        penetration=penetration,
        measurement_model=model,
        diffusion_scaling=scaling,
        joseph_update=bool(raw.get("joseph_update", False)),
        regularization_m2=float(raw.get("regularization_m2", 1e-6)),
        mean_sample_size=mean_sample_size,
        dump_cov=tuple(float(q) for q in raw.get("dump_cov", ())),
        queue_speed_mps=units.kmh_to_mps(float(raw.get("queue_speed_kmh", 5.0))),
        warnings=warnings,
    )


# ---------------------------------------------------------------------------
# Trajectories


def write_trajectory_csv(traj: TrajectorySet, path, sidecar: dict | None = None):
    """Write a trajectory (boundary row included) plus an optional sidecar."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_HEADER)
        for veh in range(traj.x.shape[1]):
            for k in range(traj.t.size):
                s_cell = "" if veh == 0 else repr(float(traj.s[k, veh - 1]))
                writer.writerow(
                    [
                        veh,
                        repr(float(traj.t[k])),
                        repr(float(traj.x[k, veh])),
                        repr(float(traj.v[k, veh])),
                        s_cell,
                    ]
                )
    if sidecar is not None:
        meta = dict(sidecar)
        meta.setdefault("dt_s", traj.dt)
        meta.setdefault("delta_n", traj.dn)
        if traj.theta is not None:
            v_f, d, c = traj.theta
            meta.setdefault(
                "realized_params",
                {
                    "v_f_mps": list(map(float, v_f)),
                    "d_m": list(map(float, d)),
                    "c_vps": list(map(float, c)),
                },
            )
        with open(str(path) + ".json", "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2)


def _resample_positions(t_src, x_src, grid):
    return np.interp(grid, t_src, x_src)


def read_trajectory_csv(path, target_dt: float | None = None) -> TrajectorySet:
    """Read trajectories, resampling to a uniform grid when needed.

    Vehicles are reindexed by their position at first appearance (leader
    first).  Positions are linearly interpolated onto the grid; speeds are
    taken from the file when present on the exact grid, otherwise by
    central finite differences of position.  Spacings are recomputed from
    positions, and any overlap is a hard error naming the offenders.
    """
    by_vehicle: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ConfigurationError(f"{path} is empty")
        if header[:4] != TRAJECTORY_HEADER[:4]:
            raise ConfigurationError(
                f"{path}: expected columns {TRAJECTORY_HEADER[:4]} (optionally s_m), "
                f"found {header}"
            )
        has_speed_col = len(header) >= 4
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            veh = int(row[0])
            t = float(row[1])
            x = float(row[2])
            v = float(row[3]) if has_speed_col and row[3] != "" else np.nan
            by_vehicle.setdefault(veh, []).append((t, x, v, line_no))
    if not by_vehicle:
        raise ConfigurationError(f"{path} contains no data rows")

    series = {}
    for veh, rows in by_vehicle.items():
        rows.sort(key=lambda r: r[0])
        arr = np.asarray([(r[0], r[1], r[2]) for r in rows], dtype=float)
        if np.any(np.diff(arr[:, 0]) <= 0):
            raise ConfigurationError(f"duplicate timestamps for vehicle {veh}")
        series[veh] = arr

    # order by position at first common appearance: leader = largest x
    t_start = max(arr[0, 0] for arr in series.values())
    t_end = min(arr[-1, 0] for arr in series.values())
    if t_end <= t_start:
        raise ConfigurationError("vehicles share no common time window")
    order = sorted(
        series,
        key=lambda veh: -float(
            _resample_positions(series[veh][:, 0], series[veh][:, 1], np.array([t_start]))[0]
        ),
    )

    steps = np.concatenate([np.diff(series[veh][:, 0]) for veh in order])
    uniform = np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12)
    if target_dt is None:
        dt = float(steps[0]) if uniform else float(np.median(steps))
    else:
        dt = float(target_dt)
    n_steps = int(np.floor((t_end - t_start) / dt + 1e-9))
    grid = t_start + np.arange(n_steps + 1) * dt

    n_cols = len(order)
    x = np.empty((grid.size, n_cols))
    v = np.empty_like(x)
    for col, veh in enumerate(order):
        arr = series[veh]
        x[:, col] = _resample_positions(arr[:, 0], arr[:, 1], grid)
        if np.all(np.isfinite(arr[:, 2])):
            v[:, col] = np.interp(grid, arr[:, 0], arr[:, 2])
        else:
            v[:, col] = np.gradient(x[:, col], dt)

    s = x[:, :-1] - x[:, 1:]
    bad = np.argwhere(s <= 0.0)
    if bad.size:
        k, j = bad[0]
        raise ConfigurationError(
            f"vehicles {order[j]} and {order[j + 1]} overlap at t = {grid[k]:.3f} s "
            f"(spacing {s[k, j]:.3f} m)"
        )
    return TrajectorySet(
        t=grid - grid[0],
        x=x,
        v=v,
        s=s,
        dt=dt,
        meta={"source": str(path), "vehicle_order": [int(o) for o in order]},
    )


def write_filter_csv(output, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(FILTER_HEADER)
        for k in range(output.t.size):
            for veh in range(1, output.n_vehicles + 1):
                writer.writerow(
                    [
                        repr(float(output.t[k])),
                        veh,
                        repr(float(output.s[k, veh - 1])),
                        repr(float(output.x[k, veh - 1])),
                        repr(float(output.var_s[k, veh - 1])),
                        repr(float(output.var_x[k, veh - 1])),
                    ]
                )


# ---------------------------------------------------------------------------
# Manifests


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def build_manifest(command: str, config: dict, seed, outputs) -> dict:
    return {
        "command": command,
        "config": config,
        "config_sha256": config_hash(config),
        "seed": seed,
        "outputs": [str(p) for p in outputs],
        "created_unix_s": time.time(),
        "version": _VERSION,
    }


def write_manifest(manifest: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
