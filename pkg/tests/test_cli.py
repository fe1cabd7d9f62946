import json
import subprocess
import sys

import jsonschema
import pytest

from faircert.cli import main, report_schema

MOONS = ["--synthetic", "halfmoons", "--samples", "200"]
CENSUS = ["--synthetic", "census", "--samples", "300"]


@pytest.fixture(scope="module")
def model(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    path = d / "model.json"
    assert main(["train", *MOONS, "--epochs", "3", "--hidden", "8", "--out", str(path), "--log", str(d / "log.csv")]) == 0
    return path


def test_hoeffding_prints_sample_size(capsys):
    assert main(["hoeffding", "--tau", "0.05", "--lambda", "0.05"]) == 0
    assert capsys.readouterr().out.strip() == "738"


def test_usage_and_input_errors_exit_two(tmp_path, model):
    assert main(["no-such-command"]) == 2
    assert main(["hoeffding", "--tau", "-1", "--lambda", "0.05"]) == 2
    assert main(["evaluate", "--model", str(tmp_path / "missing.json"), *MOONS]) == 2
    assert main(["evaluate", "--model", str(model), *CENSUS]) == 2  # feature dimension mismatch
    assert main(["certify-local", "--model", str(model), "--data", str(tmp_path / "x.csv")]) == 2


def test_train_writes_model_log_and_manifest(model):
    assert model.exists() and (model.parent / "log.csv").exists()
    man = json.loads((model.parent / "model.json.manifest.json").read_text())
    assert man["command"] == "train" and man["argv"][0] == "train"


def test_zero_budget_distributional_bound_equals_lfc(tmp_path, model, capsys):
    rep, ev = tmp_path / "rep.json", tmp_path / "ev.json"
    common = ["--model", str(model), *MOONS, "--n", "30", "--delta", "0.05", "--gamma", "0"]
    assert main(["certify-dif", *common, "--iters", "20", "--starts", "2", "--lower-steps", "5",
                 "--out", str(rep)]) == 0
    assert main(["evaluate", *common, "--out", str(ev)]) == 0
    r, e = json.loads(rep.read_text()), json.loads(ev.read_text())
    jsonschema.validate(r, report_schema())
    assert r["eps_upper"] == e["lfc"] == e["a_dfc"]


def test_replay_reproduces_report(tmp_path, model):
    out = tmp_path / "rep.json"
    args = ["certify-dif", "--model", str(model), *MOONS, "--n", "10", "--gamma", "0.05", "--iters", "20",
            "--starts", "2", "--lower-steps", "5", "--K", "40", "--out", str(out)]
    assert main(args) == 0
    first = out.read_text()
    out.unlink()
    assert main(["replay", str(out) + ".manifest.json"]) == 0
    assert out.read_text() == first


def test_metric_and_evaluate_on_census(tmp_path, capsys):
    m = tmp_path / "w.json"
    assert main(["metric", "weighted", *CENSUS, "--out", str(m)]) == 0
    net = tmp_path / "ftu.json"
    assert main(["train", *CENSUS, "--mode", "ftu", "--epochs", "2", "--hidden", "8", "--out", str(net)]) == 0
    ev = tmp_path / "ev.json"
    assert main(["evaluate", "--model", str(net), "--metric", str(m), *CENSUS, "--n", "20", "--gamma", "0.02",
                 "--shift-synthetic", "0.5", "--out", str(ev)]) == 0
    doc = json.loads(ev.read_text())
    assert doc["e_dfc"] >= doc["lfc"] and doc["a_dfc_lower"] <= doc["a_dfc"]
    assert set(doc["group"]) == {"dem_parity", "eq_odds", "eq_opp", "if_parity"}


def test_wasserstein_command(tmp_path):
    out = tmp_path / "w.json"
    assert main(["wasserstein", *CENSUS, "--shift-synthetic", "0", "0.5", "1.0", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert len(doc["matrix"]) == 3 and doc["matrix"][0][0] == 0


def test_console_script_honours_thread_env(tmp_path):
    env = {"FAIRCERT_THREADS": "1", "PATH": "/usr/bin:/bin"}
    ok = subprocess.run([sys.executable, "-m", "faircert.cli", "hoeffding", "--tau", "0.1", "--lambda", "0.05"],
                        capture_output=True, text=True, env=env)
    assert ok.returncode == 0 and ok.stdout.strip() == "185"
    env["FAIRCERT_THREADS"] = "zero"
    bad = subprocess.run([sys.executable, "-m", "faircert.cli", "hoeffding", "--tau", "0.1", "--lambda", "0.05"],
                         capture_output=True, text=True, env=env)
    assert bad.returncode == 2
