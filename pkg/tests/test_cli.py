import json
import os

import numpy as np
import pytest

from dcm.cli import main

SPEC = {
    "n_customers": 120,
    "n_periods": 4,
    "n_outcomes": 2,
    "n_surrogates": 2,
    "n_es": 1,
    "n_covariates": 1,
    "same_period_enabled": True,
    "positive_dynamics": True,
    "noise_sd": {"outcome": 0.3, "surrogate_non_es": 0.3, "es_interaction": 0.3},
    "seed": 12,
}


def write_json(path, payload):
    path.write_text(json.dumps(payload))
    return str(path)


@pytest.fixture()
def workspace(tmp_path):
    spec_path = write_json(tmp_path / "spec.json", SPEC)
    panel = tmp_path / "panel.csv"
    truth = tmp_path / "truth.json"
    config = tmp_path / "config.json"
    rc = main(
        [
            "synth",
            "--spec", spec_path,
            "--out", str(panel),
            "--truth", str(truth),
            "--config-out", str(config),
        ]
    )
    assert rc == 0
    return tmp_path


def test_synth_train_score_zero_shock(workspace, capsys):
    shock = write_json(
        workspace / "noop.json",
        {"label": "noop",
         "entries": [{"variables": "es_interaction", "periods": "all",
                       "mode": "scale", "value": 1.0}]},
    )
    out = workspace / "run"
    assert main(["train", "--config", str(workspace / "config.json"),
                 "--panel", str(workspace / "panel.csv"), "--out-dir", str(out)]) == 0
    assert (out / "model.json").exists()
    assert (out / "manifest_train.json").exists()

    assert main(["score", "--config", str(workspace / "config.json"),
                 "--panel", str(workspace / "panel.csv"),
                 "--model", str(out / "model.json"),
                 "--shock", shock, "--out-dir", str(out)]) == 0
    rows = (out / "counterfactual.csv").read_text().strip().splitlines()[1:]
    deltas = [float(r.split(",")[-1]) for r in rows]
    assert deltas and all(d == 0.0 for d in deltas)

    manifest = json.loads((out / "manifest_score.json").read_text())
    assert manifest["command"] == "score"
    assert set(manifest["inputs"]) == {"config", "panel", "model", "shock"}


def test_score_with_mismatched_config_fails(workspace, capsys, tmp_path):
    out = workspace / "run"
    assert main(["train", "--config", str(workspace / "config.json"),
                 "--panel", str(workspace / "panel.csv"), "--out-dir", str(out)]) == 0
    edited = json.loads((workspace / "config.json").read_text())
    edited["ridge_lambda"] = 0.123
    edited_path = write_json(tmp_path / "edited.json", edited)
    shock = write_json(
        workspace / "off.json",
        {"label": "off",
         "entries": [{"variables": "es_interaction", "periods": "all",
                       "mode": "set", "value": 0.0}]},
    )
    rc = main(["score", "--config", edited_path,
               "--panel", str(workspace / "panel.csv"),
               "--model", str(out / "model.json"),
               "--shock", shock, "--out-dir", str(out)])
    assert rc == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "ConfigMismatch"


def test_full_flow_shapley_bootstrap_report(workspace):
    config = str(workspace / "config.json")
    panel = str(workspace / "panel.csv")
    out = workspace / "run"
    assert main(["train", "--config", config, "--panel", panel, "--out-dir", str(out)]) == 0

    shock = write_json(
        workspace / "off.json",
        {"label": "es:off",
         "entries": [{"variables": "es_interaction", "periods": "all",
                       "mode": "set", "value": 0.0}]},
    )
    assert main(["score", "--config", config, "--panel", panel,
                 "--model", str(out / "model.json"), "--shock", shock,
                 "--out-dir", str(out)]) == 0

    players = write_json(
        workspace / "players.json",
        {"players": [{"name": "channel0", "variables": "channel0"}]},
    )
    assert main(["shapley", "--config", config, "--panel", panel,
                 "--model", str(out / "model.json"), "--players", players,
                 "--out-dir", str(out)]) == 0
    shapley_lines = (out / "shapley.csv").read_text().strip().splitlines()
    assert shapley_lines[0] == "player,phi,share_of_total,method,se"
    assert shapley_lines[1].startswith("channel0,")

    assert main(["bootstrap", "--config", config, "--panel", panel,
                 "--shock", shock, "--replicates", "10", "--seed", "4",
                 "--out-dir", str(out)]) == 0
    assert (out / "bootstrap.csv").exists()

    assert main(["report", str(out / "counterfactual.csv"),
                 "--config", config, "--groups", "pg0", "pg1",
                 "--normalize", "total", "--out-dir", str(out)]) == 0
    report_lines = (out / "report.csv").read_text().strip().splitlines()
    assert len(report_lines) == 3


def test_batch_score_survives_bad_scenario(workspace, capsys):
    config = str(workspace / "config.json")
    panel = str(workspace / "panel.csv")
    out = workspace / "run"
    assert main(["train", "--config", config, "--panel", panel, "--out-dir", str(out)]) == 0
    good = write_json(
        workspace / "good.json",
        {"label": "good",
         "entries": [{"variables": "es_interaction", "periods": "all",
                       "mode": "set", "value": 0.0}]},
    )
    bad = write_json(
        workspace / "bad.json",
        {"label": "bad",
         "entries": [{"variables": "ghost", "periods": "all",
                       "mode": "set", "value": 0.0}]},
    )
    rc = main(["batch-score", "--config", config, "--panel", panel,
               "--model", str(out / "model.json"), "--shock", good, bad,
               "--out-dir", str(out)])
    assert rc == 1  # bad scenario reported as an error
    assert (out / "counterfactual_good.csv").exists()  # good one still scored
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert "bad.json" in err["scenarios"]


def test_usage_errors_exit_2():
    assert main(["score"]) == 2
    assert main([]) == 2


def test_missing_file_is_machine_readable(tmp_path, capsys):
    rc = main(["train", "--config", str(tmp_path / "none.json"),
               "--panel", str(tmp_path / "none.csv"), "--out-dir", str(tmp_path)])
    assert rc == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "FileNotFound"