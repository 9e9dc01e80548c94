import json

import pytest

from lagtse.cli import main

SMALL_SCENARIO = {
    "n_vehicles": 8,
    "horizon_s": 60.0,
    "delta_n": 1.0,
    "initial_spacing_m": 36.0,
    "signal": {
        "cycle_s": 120.0,
        "red_s": 70.0,
        "go_speed_kmh": 60.0,
        "n_cycles": 6,
        "post_speed_kmh": 60.0,
    },
    "params": {
        "v_f": {"lo": 11.11111111111111, "hi": 22.22222222222222, "alpha": 2.0, "beta": 2.0},
        "d": {"lo": 5.88, "hi": 9.09, "alpha": 2.0, "beta": 2.0},
        "c": {"lo": 0.3055555555555556, "hi": 1.4166666666666667, "alpha": 2.0, "beta": 2.0},
        "units": "SI",
    },
    "seed": 99,
    "penetration": 0.5,
    "measurement_model": "unequipped",
    "mean_sample_size": 2000,
}


@pytest.fixture()
def scenario_file(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL_SCENARIO))
    return path


def test_simulate_single(scenario_file, tmp_path, capsys):
    out = tmp_path / "sim"
    assert main(["simulate", str(scenario_file), "--out", str(out)]) == 0
    assert (out / "manifest.json").exists()
    assert (out / "truth.csv").exists()
    assert (out / "truth.csv.json").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "simulate"


def test_simulate_ensemble_file_count(scenario_file, tmp_path):
    out = tmp_path / "ens"
    assert main(["simulate", str(scenario_file), "--ensemble", "3", "--out", str(out)]) == 0
    members = sorted(p.name for p in out.glob("member_*.csv"))
    assert members == ["member_000.csv", "member_001.csv", "member_002.csv"]
    assert (out / "average.csv").exists()


def test_simulate_repeatable_bytes(scenario_file, tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    main(["simulate", str(scenario_file), "--out", str(out_a)])
    main(["simulate", str(scenario_file), "--out", str(out_b)])
    assert (out_a / "truth.csv").read_bytes() == (out_b / "truth.csv").read_bytes()


def test_estimate_metrics_json(scenario_file, tmp_path, capsys):
    sim_out = tmp_path / "sim"
    main(["simulate", str(scenario_file), "--out", str(sim_out)])
    capsys.readouterr()
    est_out = tmp_path / "est"
    code = main(
        [
            "--json",
            "estimate",
            str(scenario_file),
            "--truth",
            str(sim_out / "truth.csv"),
            "--penetration",
            "0.5",
            "--model",
            "equipped",
            "--out",
            str(est_out),
        ]
    )
    assert code == 0
    rows = json.loads(capsys.readouterr().out)
    assert len(rows) == 1
    assert set(rows[0]) >= {"penetration", "rmse_m", "mape_pct"}
    assert (est_out / "filter_p050.csv").exists()


def test_estimate_sweep_rows(scenario_file, tmp_path, capsys):
    sim_out = tmp_path / "sim"
    main(["simulate", str(scenario_file), "--out", str(sim_out)])
    capsys.readouterr()
    code = main(
        [
            "--json",
            "estimate",
            str(scenario_file),
            "--truth",
            str(sim_out / "truth.csv"),
            "--penetration",
            "0.25,0.5,1.0",
            "--out",
            str(tmp_path / "sweep"),
        ]
    )
    assert code == 0
    rows = json.loads(capsys.readouterr().out)
    assert [r["penetration"] for r in rows] == [0.25, 0.5, 1.0]


def test_missing_scenario_exit_code(tmp_path, capsys):
    assert main(["simulate", str(tmp_path / "nope.json")]) == 2


def test_physics_abort_exit_code(tmp_path, capsys):
    # a reversing external boundary drives spacings negative
    boundary = tmp_path / "reverse.csv"
    boundary.write_text("t_s,v_mps\n0.0,-5.0\n300.0,-5.0\n")
    raw = dict(SMALL_SCENARIO)
    del raw["signal"]
    raw["boundary_csv"] = str(boundary)
    raw["initial_spacing_m"] = 6.0
    raw["horizon_s"] = 300.0
    scen = tmp_path / "reverse.json"
    scen.write_text(json.dumps(raw))
    assert main(["simulate", str(scen), "--out", str(tmp_path / "out")]) == 3


def test_fields_from_trajectory(scenario_file, tmp_path, capsys):
    sim_out = tmp_path / "sim"
    main(["simulate", str(scenario_file), "--out", str(sim_out)])
    out_csv = tmp_path / "fields.csv"
    code = main(
        [
            "fields",
            str(sim_out / "truth.csv"),
            "--dx",
            "25",
            "--dt",
            "5",
            "--out",
            str(out_csv),
        ]
    )
    assert code == 0
    lines = out_csv.read_text().splitlines()
    assert lines[0] == "t_s,x_m,density_vpkm,speed_kmh"
    assert len(lines) > 10


def test_verify_moments_suite(capsys):
    code = main(
        ["--json", "verify", "--suite", "moments", "--draws", "200000", "--seed", "5"]
    )
    assert code == 0
    rows = json.loads(capsys.readouterr().out)
    assert all(r["pass"] for r in rows)
