"""Command-line entry point.

Subcommands::

    lagtse simulate SCENARIO [--ensemble M] [--out DIR]
    lagtse estimate SCENARIO --truth CSV [--penetration P[,P...]] [--model M]
    lagtse verify [--suite moments|convergence|deviation|all] [...counts]
    lagtse fields INPUT_CSV [--dx DX] [--dt DT] [--out PATH]

Every command writes a manifest (before its outputs) sufficient to re-run
it bit for bit.  stdout is a human table unless ``--json`` is given.
Exit codes: 0 ok, 2 configuration error, 3 physics abort, 4 failed
verification.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import io as lio
from . import macro, oracles, units
from .assimilation import FilterConfig, ProbeSet, nested_probe_sets, run_filter
from .errors import ConfigurationError, OracleFailure, PhysicsError
from .params import ParamDistribution, historical_sample
from .relations import mean_speed, mean_speed_gradient, speed_variance
from .sim import simulate_ensemble, simulate_sample_path

SLOPE_WINDOW = (-0.65, -0.35)


def _resolve_scenario(path: str) -> Path:
    p = Path(path)
    if p.exists():
        return p
    base = os.environ.get("LAGTSE_CONFIG_DIR")
    if base:
        candidate = Path(base) / path
        if candidate.exists():
            return candidate
    raise ConfigurationError(f"scenario file not found: {path}")


def _hold_rows(t_src, values, t_query):
    idx = np.searchsorted(t_src, np.asarray(t_query) + 1e-12, side="right") - 1
    return values[np.clip(idx, 0, t_src.size - 1)]


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    cfg = lio.load_scenario(_resolve_scenario(args.scenario))
    for w in cfg.warnings:
        print(f"warning: {w}", file=sys.stderr)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_members = args.ensemble
    names = (
        ["truth.csv"]
        if n_members is None
        else [f"member_{m:03d}.csv" for m in range(n_members)] + ["average.csv"]
    )
    manifest = lio.build_manifest(
        "simulate", cfg.resolved_dict(), cfg.seed, [out_dir / n for n in names]
    )
    lio.write_manifest(manifest, out_dir / "manifest.json")

    boundary = cfg.boundary()
    sidecar = {"scenario": cfg.resolved_dict(), "seed": cfg.seed}
    if n_members is None:
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
        traj = simulate_sample_path(
            cfg.n_vehicles,
            cfg.horizon_s,
            boundary,
            cfg.initial_spacing_m,
            cfg.distribution,
            rng,
            cfg.delta_n,
        )
        lio.write_trajectory_csv(traj, out_dir / "truth.csv", sidecar)
        rows = [{"output": str(out_dir / "truth.csv"), "dt_s": traj.dt}]
    else:
        ens = simulate_ensemble(
            n_members,
            cfg.n_vehicles,
            cfg.horizon_s,
            boundary,
            cfg.initial_spacing_m,
            cfg.distribution,
            cfg.seed,
            cfg.delta_n,
        )
        rows = []
        for m, member in enumerate(ens.members):
            path = out_dir / f"member_{m:03d}.csv"
            lio.write_trajectory_csv(member, path, sidecar)
            rows.append({"output": str(path), "dt_s": member.dt})
        avg_path = out_dir / "average.csv"
        with open(avg_path, "w", newline="", encoding="utf-8") as fh:
            fh.write("t_s,veh_id,s_avg_m,x_avg_m\n")
            for k in range(ens.t.size):
                for veh in range(1, cfg.n_vehicles + 1):
                    fh.write(
                        f"{float(ens.t[k])!r},{veh},"
                        f"{float(ens.avg_s[k, veh - 1])!r},"
                        f"{float(ens.avg_x[k, veh])!r}\n"
                    )
        rows.append({"output": str(avg_path), "dt_s": float(ens.t[1] - ens.t[0])})
    _emit(args, rows, header=["output", "dt_s"])
    return 0


# ---------------------------------------------------------------------------
# estimate


def _one_estimate(task):
    (cfg, truth_path, penetration, probe_indices, model, seed_key, out_path) = task
    truth = lio.read_trajectory_csv(truth_path)
    streams = np.random.SeedSequence(seed_key).spawn(3)
    sample = historical_sample(
        cfg.distribution, cfg.mean_sample_size, np.random.default_rng(streams[0])
    )
    probes = (
        ProbeSet(indices=probe_indices, n_total=truth.n_vehicles)
        if probe_indices
        else None
    )
    config = FilterConfig(
        model=model if probes is not None else "none",
        diffusion_scaling=cfg.diffusion_scaling,
        regularization=cfg.regularization_m2,
        joseph=cfg.joseph_update,
        dump_times=cfg.dump_cov,
    )
    output = run_filter(
        truth,
        probes,
        sample,
        cfg.boundary(),
        cfg.horizon_s,
        truth.s[0],
        config,
        np.random.default_rng(streams[2]),
        cfg.delta_n,
    )
    truth_s = _hold_rows(truth.t, truth.s, output.t)
    metrics = {
        "penetration": penetration,
        "model": model,
        "rmse_m": macro.rmse(output.s, truth_s),
        "mape_pct": macro.mape(output.s, truth_s),
        "scope": "all",
    }
    if out_path is not None:
        lio.write_filter_csv(output, out_path)
    return metrics


def cmd_estimate(args) -> int:
    cfg = lio.load_scenario(_resolve_scenario(args.scenario))
    for w in cfg.warnings:
        print(f"warning: {w}", file=sys.stderr)
    pens = (
        [float(p) for p in args.penetration.split(",")]
        if args.penetration
        else [cfg.penetration]
    )
    if any(not 0.0 <= p <= 1.0 for p in pens):
        raise ConfigurationError("penetration values must be in [0, 1]")
    model = args.model or cfg.measurement_model
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = [out_dir / f"filter_p{int(round(p * 100)):03d}.csv" for p in pens]
    manifest = lio.build_manifest(
        "estimate",
        {**cfg.resolved_dict(), "sweep_penetrations": pens, "model": model},
        cfg.seed,
        outputs,
    )
    lio.write_manifest(manifest, out_dir / "manifest.json")

    truth_n = lio.read_trajectory_csv(args.truth).n_vehicles
    # probe sets are nested across the sweep so information only grows
    nonzero = [p for p in pens if p > 0.0]
    nested = (
        nested_probe_sets(
            truth_n, nonzero, np.random.default_rng(np.random.SeedSequence(cfg.seed))
        )
        if nonzero
        else {}
    )
    tasks = [
        (
            cfg,
            args.truth,
            p,
            nested[p].indices if p > 0.0 else (),
            model,
            (cfg.seed, i),
            str(outputs[i]),
        )
        for i, p in enumerate(pens)
    ]
    if args.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_one_estimate, tasks))
    else:
        rows = [_one_estimate(t) for t in tasks]
    _emit(args, rows, header=["penetration", "model", "rmse_m", "mape_pct", "scope"])
    return 0


# ---------------------------------------------------------------------------
# verify


def _verify_moments(dist, n_draws, seed, lines) -> bool:
    ok = True
    root = np.random.SeedSequence(seed)
    sample = historical_sample(dist, 100_000, np.random.default_rng(root.spawn(1)[0]))
    for i, s_m in enumerate((15.0, 30.0, 60.0)):
        mc = oracles.mc_speed_moments(
            s_m, dist, n_draws, np.random.default_rng(root.spawn(i + 2)[i + 1])
        )
        vbar = mean_speed(s_m, sample)
        var = speed_variance(s_m, sample)
        se_mean = float(np.sqrt(mc.se_mean**2 + mc.variance / sample.size))
        gap_mean = abs(vbar - mc.mean) / se_mean
        se_var = float(np.sqrt(mc.se_variance**2 + (mc.se_variance * np.sqrt(mc.n_draws / sample.size)) ** 2))
        gap_var = abs(var - mc.variance) / se_var
        passed = gap_mean <= 3.0 and gap_var <= 3.0
        ok &= passed
        lines.append(
            {
                "check": f"mean/variance at s={s_m:g} m",
                "gap_mean_se": gap_mean,
                "gap_var_se": gap_var,
                "pass": passed,
            }
        )
    # analytic gradient vs central finite difference
    for s_m in (15.0, 30.0, 60.0):
        h = 1e-4
        fd = (mean_speed(s_m + h, sample) - mean_speed(s_m - h, sample)) / (2 * h)
        an = mean_speed_gradient(s_m, sample)
        rel = abs(an - fd) / max(abs(fd), 1e-12)
        passed = rel <= 1e-5
        ok &= passed
        lines.append({"check": f"gradient at s={s_m:g} m", "rel_err": rel, "pass": passed})
    return ok


def _verify_convergence(dist, m_values, n_seeds, seed, lines) -> bool:
    from .sim import BoundaryTrajectory, SignalSpec

    sample = historical_sample(
        dist, 10_000, np.random.default_rng(np.random.SeedSequence((seed, 1)))
    )
    spec = SignalSpec(
        cycle_s=120.0,
        red_s=70.0,
        go_speed=units.kmh_to_mps(60.0),
        n_cycles=6,
        post_speed=units.kmh_to_mps(60.0),
    )
    boundary = BoundaryTrajectory.from_signal(spec)
    report = oracles.convergence_study(
        dist, sample, boundary, 10, 60.0, 36.0, m_values, n_seeds, seed, "coupled"
    )
    passed = SLOPE_WINDOW[0] <= report.slope <= SLOPE_WINDOW[1]
    lines.append(
        {
            "check": "coupled ensemble-average convergence",
            "slope": report.slope,
            "window": list(SLOPE_WINDOW),
            "pass": passed,
        }
    )
    indep = oracles.convergence_study(
        dist, sample, boundary, 10, 60.0, 36.0, m_values, max(n_seeds // 4, 2), seed + 1, "independent"
    )
    lines.append(
        {
            "check": "independent-average convergence (diagnostic, ungated)",
            "slope": indep.slope,
            "note": "plateaus at the nonlinearity gap between the path expectation "
            "and the mean dynamics; see README",
            "pass": True,
        }
    )
    return passed


def _verify_deviation(dist, m_ensemble, replications, seed, lines) -> bool:
    from .moments import integrate_moments
    from .sim import BoundaryTrajectory, SignalSpec

    n, t_eval = 3, 60.0
    sample = historical_sample(
        dist, 10_000, np.random.default_rng(np.random.SeedSequence((seed, 2)))
    )
    spec = SignalSpec(
        cycle_s=120.0,
        red_s=70.0,
        go_speed=units.kmh_to_mps(60.0),
        n_cycles=6,
        post_speed=units.kmh_to_mps(60.0),
    )
    boundary = BoundaryTrajectory.from_signal(spec)
    report = oracles.deviation_covariance(
        dist, boundary, n, t_eval, m_ensemble, replications, 36.0, seed
    )
    emp = report.cov[:n, :n]
    results = {}
    for scaling in ("alg2", "standard"):
        series = integrate_moments(
            n, t_eval + 2.0, boundary, 36.0, sample,
            diffusion_scaling=scaling, dump_times=(t_eval,),
        )
        P = series.cov_dumps[t_eval][:n, :n]
        thresh = 0.1 * float(np.max(np.diag(emp)))
        mask = np.abs(emp) >= thresh
        rel = np.abs(P - emp)[mask] / np.abs(emp)[mask]
        results[scaling] = {
            "max_rel_err_significant": float(np.max(rel)) if rel.size else 0.0,
            "within_25pct": bool(np.all(rel <= 0.25)) if rel.size else True,
            "ode_diag": np.diag(P).tolist(),
        }
    passed = results["alg2"]["within_25pct"]
    lines.append(
        {
            "check": "deviation covariance vs covariance recursion",
            "empirical_diag": np.diag(emp).tolist(),
            "alg2": results["alg2"],
            "standard": results["standard"],
            "pass": passed,
            "note": (
                "parameter noise is frozen per driver, so the measured deviation "
                "covariance grows ballistically while the white-noise recursion "
                "grows linearly; a persistent gap here is reported, not hidden"
            ),
        }
    )
    return passed


def cmd_verify(args) -> int:
    dist = ParamDistribution.from_traffic_units()
    lines: list = []
    ok = True
    if args.suite in ("moments", "all"):
        ok &= _verify_moments(dist, args.draws, args.seed, lines)
    if args.suite in ("convergence", "all"):
        m_values = tuple(int(m) for m in args.m_list.split(","))
        ok &= _verify_convergence(dist, m_values, args.seeds, args.seed, lines)
    if args.suite in ("deviation", "all"):
        ok &= _verify_deviation(
            dist, args.m_ensemble, args.replications, args.seed, lines
        )
    _emit(args, lines, header=["check", "pass"])
    if not ok:
        failing = [l for l in lines if not l.get("pass", True)]
        print(f"verification failed: {json.dumps(failing, default=str)}", file=sys.stderr)
        return 4
    return 0


# ---------------------------------------------------------------------------
# fields


def cmd_fields(args) -> int:
    path = Path(args.input)
    if not path.exists():
        raise ConfigurationError(f"input file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    if header == lio.FILTER_HEADER:
        t, x, v = _read_filter_for_fields(path)
        field = macro.eulerian_fields(t, x, v, args.dx, args.dt)
    else:
        traj = lio.read_trajectory_csv(path)
        field = macro.eulerian_fields(
            traj.t, traj.x[:, 1:], traj.v[:, 1:], args.dx, args.dt, traj.dn
        )
    out = Path(args.out)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        fh.write("t_s,x_m,density_vpkm,speed_kmh\n")
        tc = 0.5 * (field.t_edges[:-1] + field.t_edges[1:])
        xc = 0.5 * (field.x_edges[:-1] + field.x_edges[1:])
        for i in range(tc.size):
            for j in range(xc.size):
                d = field.density[i, j]
                s = field.speed[i, j]
                if np.isnan(d):
                    continue
                fh.write(f"{tc[i]!r},{xc[j]!r},{float(d)!r},{float(s)!r}\n")
    _emit(args, [{"output": str(out), "cells": int(np.isfinite(field.density).sum())}],
          header=["output", "cells"])
    return 0


def _read_filter_for_fields(path):
    data = {}
    with open(path, newline="", encoding="utf-8") as fh:
        import csv as _csv

        reader = _csv.reader(fh)
        next(reader)
        for row in reader:
            t = float(row[0])
            veh = int(row[1])
            data.setdefault(veh, []).append((t, float(row[3])))
    vehicles = sorted(data)
    t = np.asarray([p[0] for p in data[vehicles[0]]])
    x = np.column_stack([np.asarray([p[1] for p in data[v]]) for v in vehicles])
    dt = t[1] - t[0] if t.size > 1 else 1.0
    v = np.gradient(x, dt, axis=0)
    return t, x, v


# ---------------------------------------------------------------------------


def _emit(args, rows, header) -> None:
    if getattr(args, "json", False):
        print(json.dumps(rows, default=str))
        return
    widths = {h: max(len(h), *(len(_fmt(r.get(h, ""))) for r in rows)) for h in header}
    print("  ".join(h.ljust(widths[h]) for h in header))
    for r in rows:
        print("  ".join(_fmt(r.get(h, "")).ljust(widths[h]) for h in header))


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lagtse",
        description="Stochastic Lagrangian platoon simulation and probe-vehicle "
        "state estimation",
    )
    parser.add_argument("--json", action="store_true", help="machine-readable stdout")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate ground-truth trajectories")
    p.add_argument("scenario")
    p.add_argument("--ensemble", type=int, default=None, metavar="M")
    p.add_argument("--out", default="out_simulate")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="run the filter against a truth file")
    p.add_argument("scenario")
    p.add_argument("--truth", required=True)
    p.add_argument("--penetration", default=None, help="value or comma list")
    p.add_argument("--model", choices=["unequipped", "equipped"], default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default="out_estimate")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("verify", help="run the statistical verification suites")
    p.add_argument(
        "--suite",
        choices=["moments", "convergence", "deviation", "all"],
        default="all",
    )
    p.add_argument("--draws", type=int, default=1_000_000)
    p.add_argument("--m-list", default="10,100,1000")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--m-ensemble", type=int, default=400)
    p.add_argument("--replications", type=int, default=200)
    p.add_argument("--seed", type=int, default=20250740)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("fields", help="Eulerian density/speed fields from a CSV")
    p.add_argument("input")
    p.add_argument("--dx", type=float, default=10.0)
    p.add_argument("--dt", type=float, default=1.0)
    p.add_argument("--out", default="fields.csv")
    p.set_defaults(func=cmd_fields)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except PhysicsError as exc:
        print(f"physics abort: {exc}", file=sys.stderr)
        return 3
    except OracleFailure as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
