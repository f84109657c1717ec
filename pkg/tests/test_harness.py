import csv
import io
import json
import math
from importlib import resources

import pytest

from ctrlagents.cli import main
from ctrlagents.controllers import ConfigError, ControllerSpec
from ctrlagents.harness import (
    compare_logs,
    load_config,
    monte_carlo,
    optimize,
    parse_config,
    resolve_method,
)
from ctrlagents.metrics import compute_metrics
from ctrlagents.plants import make_plant
from ctrlagents.scenarios import default_ladder
from ctrlagents.simulator import default_sim, run_episode

DATA = resources.files("ctrlagents").joinpath("data")


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


SMALL = {
    "plant": "dc_motor",
    "controllers": ["P"],
    "scenarios": [{"id": "I", "initial_condition_range": [3.14, 3.14]}],
    "max_iterations": 4,
    "min_iterations": 2,
    "sim": {"dt": 0.01, "horizon": 3.0},
    "agents": {"default": "heuristic"},
}


@pytest.mark.parametrize(
    "cfg",
    [{}, {"plant": "cart_pole"}, {"plant": "dc_motor", "colour": "red"},
     {"plant": "dc_motor", "controllers": ["P"], "ranges": {"P": {"Kd": [0, 1]}}},
     {"plant": "dc_motor", "targets": {"mse": -1, "settling_time": 1, "overshoot": 1}},
     {"plant": "dc_motor", "scenarios": [{"id": "I", "initial_condition_range": [2, 1]}]}],
)
def test_bad_configs_exit_2(tmp_path, cfg, capsys):
    assert main(["optimize", "--config", str(_write(tmp_path, cfg))]) == 2
    assert "error:" in capsys.readouterr().err


def test_missing_config_file_exits_2(tmp_path):
    assert main(["optimize", "--config", str(tmp_path / "nope.json")]) == 2


def test_optimize_writes_run_directory(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["optimize", "--config", str(_write(tmp_path, SMALL)), "--out", str(out), "--seed", "3"]) == 0
    for name in ("config.json", "iterations.jsonl", "log.txt", "transcript.jsonl", "report.json"):
        assert (out / name).exists(), name
    rep = json.loads((out / "report.json").read_text())
    assert rep["summary"].startswith("Completed ") and rep["plant"] == "dc_motor"
    assert json.loads((out / "config.json").read_text())["seeds"] == [3]
    log = (out / "log.txt").read_text().splitlines()
    assert log and all(l.startswith("#") for l in log)
    assert len((out / "iterations.jsonl").read_text().splitlines()) == len(log)
    assert "Completed" in capsys.readouterr().out


def test_same_seed_gives_identical_report(tmp_path):
    cfg = load_config(_write(tmp_path, SMALL))
    a = optimize(cfg, tmp_path / "a", seed=5)
    b = optimize(cfg, tmp_path / "b", seed=5)
    assert (a.run_dir / "report.json").read_bytes() == (b.run_dir / "report.json").read_bytes()
    assert (a.run_dir / "log.txt").read_bytes() == (b.run_dir / "log.txt").read_bytes()


def test_default_run_directory_under_output_dir(tmp_path):
    cfg = load_config(_write(tmp_path, {**SMALL, "output_dir": "runs"}))
    res = optimize(cfg)
    assert res.run_dir.parent == tmp_path / "runs" and res.run_dir.name.endswith("-dc_motor")


def test_plotdata(tmp_path):
    out = tmp_path / "run"
    main(["replay", "--config", str(DATA / "dc_motor_p_replay.json"), "--out", str(out)])
    assert main(["plotdata", str(out), "--out", str(tmp_path / "plots")]) == 0
    rows = list(csv.reader(io.StringIO((tmp_path / "plots" / "evolution.csv").read_text())))
    assert rows[0] == ["iter", "Kp", "mse", "Ts", "Mp"] and len(rows) == 28
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["plotdata", str(empty)]) == 2


def test_plotdata_resimulates_best(tmp_path):
    out = tmp_path / "run"
    optimize(load_config(_write(tmp_path, SMALL)), out)
    main(["plotdata", str(out)])
    lines = (out / "best_trajectory.csv").read_text().splitlines()
    assert lines[0] == "t,i,omega,theta,u,e" and len(lines) == 302


def test_compare_logs():
    ref = ["#1/30 | Type:P | Kp:50.000 | MSE:0.9203 | Ts:4.78 | Tr:1.89 | %OS:18.25 | ZC:8 | CZC:8 | CE:9060.51 | "
           "e_ss:0.02 | isStb:True"]
    same = compare_logs(ref, ref)
    assert same["structure_match"] and same["flagged_fields"] == []
    off = compare_logs([ref[0].replace("MSE:0.9203", "MSE:1.9203")], ref)
    assert off["flagged_fields"] == ["mse"]
    assert not compare_logs(ref * 2, ref)["structure_match"]


def test_monte_carlo_single_run_equals_one_episode():
    plant = make_plant("pendulum")
    sim = default_sim("pendulum")
    sc = default_ladder("pendulum")[2]
    m = resolve_method({"name": "fsf", "kind": "FSF", "gains": {"K1": 10.0, "K2": 1.0}}, plant)
    (row,) = monte_carlo(plant, [m], [sc], sim, runs=1, seed0=42)
    ref = compute_metrics(run_episode(plant, ControllerSpec("FSF", {"K1": 10.0, "K2": 1.0}), sc, sim, seed=42))
    assert row.mse == ref.mse and row.runs == 1
    assert row.settling_time == ref.settling_time or (math.isinf(row.settling_time) and math.isinf(ref.settling_time))


def test_monte_carlo_parallel_matches_serial():
    plant = make_plant("pendulum")
    sim = default_sim("pendulum")
    m = resolve_method({"name": "lqr", "lqr": {"q": [10, 1], "r": 0.1}}, plant)
    sc = default_ladder("pendulum")[1:2]
    a = monte_carlo(plant, [m], sc, sim, runs=4, jobs=1)
    b = monte_carlo(plant, [m], sc, sim, runs=4, jobs=2)
    assert a == b


def test_montecarlo_cli(tmp_path, capsys):
    cfg = {"plant": "pendulum", "scenarios": "default", "montecarlo": {"runs": 2, "methods": [
        {"name": "FSF", "kind": "FSF", "gains": {"K1": 10, "K2": 1}}, {"name": "LQR", "lqr": {"q": [10, 1], "r": 0.1}}]}}
    out = tmp_path / "t.csv"
    assert main(["montecarlo", "--config", str(_write(tmp_path, cfg)), "--jobs", "1", "--out", str(out)]) == 0
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert len(rows) == 6 and {r["method"] for r in rows} == {"FSF", "LQR"}


def test_method_validation():
    with pytest.raises(ConfigError):
        resolve_method({"name": "x", "kind": "PI", "gains": {"Kp": 1}}, make_plant("dc_motor"))
    with pytest.raises(ConfigError):
        resolve_method({"name": "x"}, make_plant("dc_motor"))


def test_lqr_cli(tmp_path, capsys):
    out = tmp_path / "audit.json"
    assert main(["lqr", "--plant", "pendulum", "--q", "10", "1", "--r", "0.1", "--out", str(out)]) == 0
    audit = json.loads(out.read_text())
    assert audit["stable"] and audit["residual"] <= 1e-9 and set(audit["K"]) == {"K1", "K2"}
    bad = _write(tmp_path, {"plant": "dc_motor", "lqr": {"q": [1], "r": 1, "A": [[1]], "B": [[0]]}})
    assert main(["lqr", "--config", str(bad)]) == 2
    assert main(["lqr", "--plant", "pendulum"]) == 2


def test_transport_failure_exits_3(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("CTRL_TEST_KEY", "x")
    cfg = {**SMALL, "agents": {"default": "heuristic", "actor": "live", "endpoint": {
        "base_url": "http://127.0.0.1:9/v1", "model": "m", "api_key_env": "CTRL_TEST_KEY", "timeout": 2,
        "max_retries": 0}}}
    out = tmp_path / "run"
    assert main(["optimize", "--config", str(_write(tmp_path, cfg)), "--out", str(out)]) == 3
    assert json.loads((out / "report.json").read_text())["status"] == "transport_error"


def test_live_backend_without_key_exits_2(tmp_path, monkeypatch):
    monkeypatch.delenv("CTRL_TEST_KEY", raising=False)
    cfg = {**SMALL, "agents": {"default": "live", "endpoint": {
        "base_url": "http://127.0.0.1:9/v1", "model": "m", "api_key_env": "CTRL_TEST_KEY"}}}
    assert main(["optimize", "--config", str(_write(tmp_path, cfg)), "--out", str(tmp_path / "r")]) == 2


def test_replay_exhaustion_exits_2(tmp_path):
    t = tmp_path / "t.jsonl"
    t.write_text(json.dumps({"role": "actor", "response": {"Kp": 1.0}}) + "\n")
    cfg = {**SMALL, "agents": {"default": "heuristic", "actor": "replay", "replay": str(t)}, "failure_cap": 3}
    assert main(["optimize", "--config", str(_write(tmp_path, cfg)), "--out", str(tmp_path / "r")]) == 2


def test_parse_config_defaults():
    cfg = parse_config({"plant": "ball_beam"})
    assert cfg.sim.horizon == 20.0 and len(cfg.ladder) == 3 and cfg.seeds == [0]
    assert cfg.plan(0).queue == ("P", "PI", "PD", "PID", "FSF")
