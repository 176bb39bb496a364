import csv
import json

import pytest

import run
from cocyclelab import experiments, parallel
from cocyclelab.configs import DEFAULT_SCENARIO_DIR

TINY = {
    "name": "tiny",
    "description": "two hyperbolic-elliptic atoms in SL(2,R)",
    "n": 2,
    "seed": 11,
    "atoms": [
        {"label": "h", "probability": 0.25, "matrix": {"kind": "diagonal", "entries": [2.0, 0.5]},
         "include_inverse": True},
        {"label": "r", "probability": 0.25, "matrix": {"kind": "rotation", "angle": 0.7}, "include_inverse": True},
    ],
    "experiments": [
        {"kind": "exponents", "n_steps": 5000, "n_trials": 2},
        {"kind": "tracking", "n_steps": 5000, "n_trials": 2, "horizons": [10, 5000]},
    ],
}


@pytest.fixture(autouse=True)
def restore_default_workers(monkeypatch):
    monkeypatch.setattr(parallel, "_default_workers", parallel.default_workers())


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def test_list_scenarios(capsys):
    assert run.main(["list-scenarios", "--scenario-dir", str(DEFAULT_SCENARIO_DIR)]) == run.EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert [line.split()[0] for line in lines] == sorted(p.stem for p in DEFAULT_SCENARIO_DIR.glob("*.json"))


def test_list_empty_catalog(tmp_path, capsys):
    assert run.main(["list-scenarios", "--scenario-dir", str(tmp_path)]) == run.EXIT_OK
    assert capsys.readouterr().out == ""


def test_malformed_config_is_a_config_error(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text(json.dumps({**TINY, "n": "two"}))
    assert run.main(["run", str(path), "--out", str(tmp_path / "out")]) == run.EXIT_CONFIG_ERROR
    assert "invalid scenario" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_missing_scenario_and_bad_workers(tiny_config, tmp_path):
    assert run.main(["run", "no-such-scenario", "--scenario-dir", str(tmp_path)]) == run.EXIT_CONFIG_ERROR
    assert run.main(["run", str(tiny_config), "--workers", "0"]) == run.EXIT_CONFIG_ERROR


def test_report_bytes_do_not_depend_on_workers(tiny_config, tmp_path):
    serial, pooled = tmp_path / "serial", tmp_path / "pooled"
    assert run.main(["run", str(tiny_config), "--workers", "1", "--out", str(serial)]) == run.EXIT_OK
    assert run.main(["run", str(tiny_config), "--workers", "2", "--out", str(pooled)]) == run.EXIT_OK
    report = (serial / "tiny" / "report.json").read_bytes()
    assert report == (pooled / "tiny" / "report.json").read_bytes()

    parsed = json.loads(report)
    assert parsed["seed"] == 11
    assert parsed["failures"] == []
    assert [e["kind"] for e in parsed["experiments"]] == ["exponents", "tracking"]
    assert (serial / "tiny" / "timing.json").exists()

    with (serial / "tiny" / "curves" / "tracking__defect_per_step.csv").open() as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["horizon", "value"]
    assert [row[0] for row in rows[1:]] == ["10", "5000"]


def test_seed_override_changes_the_report(tiny_config, tmp_path):
    assert run.main(["run", str(tiny_config), "--seed", "12", "--out", str(tmp_path)]) == run.EXIT_OK
    assert json.loads((tmp_path / "tiny" / "report.json").read_text())["seed"] == 12


def test_failed_experiment_still_writes_a_partial_report(tiny_config, tmp_path, monkeypatch, capsys):
    def broken(system, exp, seed, context):
        return {"status": "error", "message": "exponent estimation failed", "error": "singular product"}

    monkeypatch.setitem(experiments.HANDLERS, "exponents", broken)
    assert run.main(["run", str(tiny_config), "--out", str(tmp_path)]) == run.EXIT_EXPERIMENT_FAILURE
    report = json.loads((tmp_path / "tiny" / "report.json").read_text())
    assert report["failures"] == [{"experiment": "exponents", "message": "singular product"}]
    assert report["experiments"][1]["status"] == "success"
    assert "singular product" in capsys.readouterr().err
