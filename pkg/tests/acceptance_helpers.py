"""Worker functions for the acceptance suite's parallel sweeps."""

import warnings

import numpy as np

from lagtse import (
    BoundaryTrajectory,
    FilterConfig,
    ParamDistribution,
    SignalSpec,
    historical_sample,
    run_filter,
    simulate_sample_path,
)
from lagtse.assimilation import nested_probe_sets
from lagtse.macro import queue_series, rmse, true_queue_series
from lagtse.units import kmh_to_mps

SWEEP_RATES = (0.05, 0.10, 0.20, 0.30, 0.50)
QUEUE_RATES = (0.05, 0.50)


def reference_signal() -> SignalSpec:
    return SignalSpec(
        cycle_s=120.0,
        red_s=70.0,
        go_speed=kmh_to_mps(60.0),
        n_cycles=6,
        post_speed=kmh_to_mps(60.0),
    )


def _setup(master: tuple, n_vehicles: int, horizon: float):
    dist = ParamDistribution.from_traffic_units()
    children = np.random.SeedSequence(master).spawn(4)
    sample = historical_sample(dist, 10_000, np.random.default_rng(children[0]))
    boundary = BoundaryTrajectory.from_signal(reference_signal())
    truth = simulate_sample_path(
        n_vehicles, horizon, boundary, 36.0, dist, np.random.default_rng(children[1])
    )
    return sample, boundary, truth, children


def sweep_worker(args):
    """One (seed, rate) cell of the penetration sweep; returns summaries."""
    seed, rate = args
    warnings.filterwarnings("ignore")
    n, horizon = 200, 1000.0
    sample, boundary, truth, children = _setup((41_000, seed), n, horizon)
    probes = nested_probe_sets(n, SWEEP_RATES, np.random.default_rng(children[2]))[rate]
    out = run_filter(
        truth,
        probes,
        sample,
        boundary,
        horizon,
        36.0,
        FilterConfig(
            model="unequipped", hygiene_checks=True, dump_times=(500.0, 1000.0)
        ),
        np.random.default_rng(children[3]),
    )
    truth_s = truth.s[[truth.at_time(q) for q in out.t]]
    eig_floor = []
    for P in out.cov_dumps.values():
        eig_floor.append(float(np.linalg.eigvalsh(P).min() / max(np.trace(P), 1e-30)))
    return {
        "seed": seed,
        "rate": rate,
        "rmse": rmse(out.s, truth_s),
        "violations": out.hygiene_violations,
        "trace_ok": bool(
            np.all(
                out.trace_post_update[1:]
                <= out.trace_pre_update[1:] * (1.0 + 1e-9) + 1e-12
            )
        ),
        "eig_floor": eig_floor,
        "repairs": out.clip_count,
    }


def queue_worker(args):
    """One (seed, rate) queue replication; returns coverage and queue RMSE."""
    seed, rate = args
    warnings.filterwarnings("ignore")
    n, horizon = 100, 480.0
    sample, boundary, truth, children = _setup((42_000, seed), n, horizon)
    probes = nested_probe_sets(n, QUEUE_RATES, np.random.default_rng(children[2]))[rate]
    out = run_filter(
        truth,
        probes,
        sample,
        boundary,
        horizon,
        36.0,
        FilterConfig(model="unequipped"),
        np.random.default_rng(children[3]),
    )
    estimated = queue_series(out, sample)
    true_counts = true_queue_series(truth, out.t)
    k_hat = int(np.argmax(estimated.count))
    q_true_max = float(np.max(true_counts))
    covered = bool(
        np.floor(estimated.lower[k_hat]) <= q_true_max <= np.ceil(estimated.upper[k_hat])
    )
    return {
        "seed": seed,
        "rate": rate,
        "covered": covered,
        "queue_rmse": rmse(estimated.count, true_counts),
    }
