import json
import shutil

import numpy as np
import pytest
import yaml

from d2c import cli
from d2c.dynamics import Trajectory
from d2c.lqr import GainSchedule
from d2c.sysid import LtvModel

from conftest import CONFIGS


def linear_raw():
    return yaml.safe_load((CONFIGS / "linear.yaml").read_text())


def write_config(tmp_path, raw, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(raw))
    return str(path)


def test_missing_alpha_names_key(tmp_path, capsys):
    raw = linear_raw()
    del raw["openloop"]["alpha"]
    code = cli.main(["optimize", "--config", write_config(tmp_path, raw), "--out", str(tmp_path / "o")])
    assert code == 1
    assert "openloop.alpha" in capsys.readouterr().err


def test_missing_seed_rejected(tmp_path, capsys):
    raw = linear_raw()
    del raw["seed"]
    assert cli.main(["optimize", "--config", write_config(tmp_path, raw), "--out", str(tmp_path / "o")]) == 1
    assert "seed" in capsys.readouterr().err


def test_malformed_yaml_reports_line(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("seed: 0\nsystem: [unclosed\n")
    assert cli.main(["optimize", "--config", str(path), "--out", str(tmp_path / "o")]) == 1
    assert "line" in capsys.readouterr().err


def test_unknown_subcommand_exits_1():
    with pytest.raises(SystemExit) as info:
        cli.main(["train"])
    assert info.value.code == 1


def test_pipeline_artifacts(linear_run):
    out = linear_run.path
    manifest = json.loads((out / "manifest.json").read_text())
    expected = {"openloop.json", "nominal.csv", "model.json", "fit_report.json", "gains.json", "policy.json",
                "eval.json", "config.resolved.yaml"}
    assert expected <= set(manifest["artifacts"])
    assert set(manifest["logs"]) == {"history.csv", "timings.json"}
    for name in ("openloop.json", "model.json", "fit_report.json", "gains.json", "eval.json"):
        meta = json.loads((out / name).read_text())["meta"]
        assert meta["config_hash"] == linear_run.cfg.hash and meta["seed"] == 0
    assert linear_run.policy.metadata["config_hash"] == linear_run.cfg.hash
    assert set(linear_run.timings) == {"open_loop_seconds", "closed_loop_seconds", "evaluate_seconds"}


def test_identified_model_matches_configured_system(linear_run):
    model = LtvModel.load(linear_run.path / "model.json")
    assert np.abs(model.A - linear_run.system.A).max() < 1e-8
    assert np.abs(model.B - linear_run.system.B).max() < 1e-8


def test_nominal_csv_matches_policy(linear_run):
    traj = Trajectory.from_csv(linear_run.path / "nominal.csv")
    assert np.array_equal(traj.states, linear_run.policy.nominal_states)


def test_identify_without_nominal_fails(tmp_path, capsys):
    code = cli.main(["identify", "--config", str(CONFIGS / "linear.yaml"), "--out", str(tmp_path / "x")])
    assert code == 1
    assert "openloop.json" in capsys.readouterr().err


def test_stagewise_commands_rerun_identically(tmp_path):
    out = tmp_path / "stages"
    cfg = str(CONFIGS / "linear.yaml")
    for cmd in ("optimize", "identify", "synthesize"):
        assert cli.main([cmd, "--config", cfg, "--out", str(out)]) == 0
    first = {n: (out / n).read_bytes() for n in ("openloop.json", "model.json", "gains.json")}
    for cmd in ("optimize", "identify", "synthesize"):
        assert cli.main([cmd, "--config", cfg, "--out", str(out)]) == 0
    assert first == {n: (out / n).read_bytes() for n in first}


def _scalar_config(tmp_path, B):
    raw = {
        "seed": 0,
        "system": {"name": "linear", "horizon": 2, "dt": 1.0, "params": {"A": [[1.0]], "B": [[B]]}, "x1": [1.0]},
        "cost": {"Q": 1.0, "R": 1.0, "Q_T": 1.0, "goal": [0.0]},
        "openloop": {"sigma_du": 0.01, "m": 10, "alpha": 0.1, "max_iters": 10, "tol": 1e-6},
    }
    return write_config(tmp_path, raw, f"scalar_{B}.yaml")


def test_synthesize_standalone_hand_case(tmp_path):
    LtvModel.constant([[1.0]], [[1.0]], 2).save(tmp_path / "m.json")
    out = tmp_path / "g.json"
    code = cli.main(["synthesize", "--model", str(tmp_path / "m.json"), "--weights", _scalar_config(tmp_path, 1.0),
                     "--out", str(out)])
    assert code == 0
    g = GainSchedule.load(out)
    assert g.K[0, 0, 0] == pytest.approx(-0.5, abs=1e-15)
    assert g.P[0, 0, 0] == pytest.approx(1.5, abs=1e-15)


def test_synthesize_zero_actuation(tmp_path):
    LtvModel.constant([[0.9]], [[0.0]], 2).save(tmp_path / "m.json")
    out = tmp_path / "g.json"
    assert cli.main(["synthesize", "--model", str(tmp_path / "m.json"), "--config",
                     _scalar_config(tmp_path, 0.0), "--out", str(out)]) == 0
    assert np.all(GainSchedule.load(out).K == 0.0)


def test_refuses_mixed_configs(tmp_path, capsys):
    out = tmp_path / "mix"
    cfg = str(CONFIGS / "linear.yaml")
    assert cli.main(["optimize", "--config", cfg, "--out", str(out)]) == 0
    assert cli.main(["optimize", "--config", cfg, "--out", str(out), "--seed", "5"]) == 1
    assert "--force" in capsys.readouterr().err
    assert cli.main(["optimize", "--config", cfg, "--out", str(out), "--seed", "5", "--force"]) == 0


def test_stage_failure_exit_2(tmp_path, capsys):
    raw = linear_raw()
    raw["openloop"].update(alpha=1e4, max_iters=50)
    code = cli.main(["pipeline", "--config", write_config(tmp_path, raw), "--out", str(tmp_path / "f")])
    assert code == 2
    assert "stage 'optimize'" in capsys.readouterr().err
    assert (tmp_path / "f" / "timings.json").exists()


def test_zero_noise_pipeline_evaluation(tmp_path):
    raw = linear_raw()
    raw["eval"]["epsilon"] = 0.0
    raw["eval"]["rollouts"] = 50
    out = tmp_path / "z"
    assert cli.main(["pipeline", "--config", write_config(tmp_path, raw), "--out", str(out)]) == 0
    report = json.loads((out / "eval.json").read_text())
    assert report["cost_variance"] == 0.0
    assert report["terminal_mse"] == 0.0


def test_run_command(linear_run, tmp_path):
    out = tmp_path / "traj.csv"
    assert cli.main(["run", "--policy", str(linear_run.path / "policy.json"), "--epsilon", "0", "--seed", "1",
                     "--out", str(out)]) == 0
    traj = Trajectory.from_csv(out)
    assert np.abs(traj.states - linear_run.policy.nominal_states).max() <= 1e-12
    noisy = tmp_path / "noisy.csv"
    assert cli.main(["run", "--policy", str(linear_run.path / "policy.json"), "--epsilon", "0.2", "--seed", "1",
                     "--out", str(noisy), "--open-loop"]) == 0
    assert not np.array_equal(Trajectory.from_csv(noisy).states, traj.states)


def test_analysis_commands(linear_run, tmp_path):
    out = tmp_path / "copy"
    shutil.copytree(linear_run.path, out)
    cfg = str(CONFIGS / "linear.yaml")
    assert cli.main(["evaluate", "--config", cfg, "--out", str(out), "--epsilon", "0.2", "--mode", "open",
                     "--rollouts", "100"]) == 0
    assert (out / "eval_open_eps0.2.json").exists()
    assert cli.main(["scaling-study", "--config", cfg, "--out", str(out), "--rollouts", "400", "--linearity"]) == 0
    scaling = json.loads((out / "scaling.json").read_text())
    assert max(scaling["linearity"]["max_residual"]) <= 1e-10
    assert cli.main(["robustness-curve", "--config", cfg, "--out", str(out), "--rollouts", "100",
                     "--epsilon-grid", "0,0.5"]) == 0
    header = (out / "robustness.csv").read_text().splitlines()[0]
    assert header == "mode,epsilon,mean,var,terminal_mse,divergence_frac"


def test_analysis_needs_policy(tmp_path, capsys):
    assert cli.main(["evaluate", "--config", str(CONFIGS / "linear.yaml"), "--out", str(tmp_path / "e")]) == 1
    assert "pipeline" in capsys.readouterr().err


def _artifact_bytes(out):
    manifest = json.loads((out / "manifest.json").read_text())
    return manifest, {n: (out / n).read_bytes() for n in manifest["artifacts"]}


def test_pipeline_deterministic_across_threads(tmp_path):
    cfg = str(CONFIGS / "linear.yaml")
    runs = []
    for k, threads in enumerate(("1", "3")):
        out = tmp_path / f"r{k}"
        assert cli.main(["pipeline", "--config", cfg, "--out", str(out), "--threads", threads]) == 0
        runs.append(_artifact_bytes(out))
    assert runs[0][1] == runs[1][1]
    assert (tmp_path / "r0" / "manifest.json").read_bytes() == (tmp_path / "r1" / "manifest.json").read_bytes()
