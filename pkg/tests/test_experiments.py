import numpy as np
import pytest

from cocyclelab import experiments
from cocyclelab.configs import DEFAULT_SCENARIO_DIR
from cocyclelab.oseledets import LyapunovReport
from cocyclelab.scenarios import ExperimentConfig, build_system, load_scenario
from cocyclelab.stationary import MeasureCloud


def scenario_experiment(name, kind):
    config = load_scenario(name, DEFAULT_SCENARIO_DIR)
    exp = next(e for e in config.experiments if e.kind == kind)
    return build_system(config), config, exp


def test_exponents_handler(hyperbolic_system):
    context = {}
    result = experiments.run_exponents(hyperbolic_system, ExperimentConfig(kind="exponents", n_steps=100, n_trials=2),
                                       0, context)
    assert result["status"] == "success"
    np.testing.assert_allclose(result["report"]["exponents"], [1.0, 0.0, -1.0], atol=1e-12)
    assert result["antisymmetry_residual"] == pytest.approx(0.0, abs=1e-12)
    assert result["degenerate_roots"] == []
    assert isinstance(context["report"], LyapunovReport)


def test_non_finite_exponents_become_a_failure_record(hyperbolic_system, monkeypatch):
    def broken(*args, **kwargs):
        return LyapunovReport(orientation="forward", n_steps=1, n_trials=1, exponents=[float("nan")] * 3,
                              standard_errors=[0.0] * 3, multiplicities=[1, 1, 1], block_exponents=[0.0] * 3,
                              root_rates=[0.0, 0.0], degenerate_roots=[], dual_roots=[], sum_residual=0.0,
                              sum_standard_error=0.0, cluster_rel_tol=1e-2)

    monkeypatch.setattr(experiments, "estimate_exponents", broken)
    result = experiments.run_tracking(hyperbolic_system, ExperimentConfig(kind="tracking", horizons=[5, 10]), 0, {})
    assert result["status"] == "error"
    assert "non-finite" in result["error"]


def test_tracking_handler_reuses_the_shared_report(hyperbolic_system):
    context = {}
    exp = ExperimentConfig(kind="tracking", n_steps=50, n_trials=2, horizons=[5, 20])
    result = experiments.run_tracking(hyperbolic_system, exp, 0, context)
    assert result["status"] == "success"
    assert result["curves"]["defect_per_step"]["horizons"] == [5, 20]
    np.testing.assert_allclose(result["tracking"]["defects"], 0.0, atol=1e-9)
    assert "report" in context


def test_tracking_status_follows_the_relative_defect(hyperbolic_system, monkeypatch):
    def drifting(system, word, x0, horizons, exponents=None):
        return {"horizons": list(horizons), "defects": [0.5] * len(horizons), "lambda_hat": [1.0, 0.0, -1.0],
                "lambda_norm": float(np.sqrt(2.0))}

    monkeypatch.setattr(experiments, "geodesic_tracking", drifting)
    exp = ExperimentConfig(kind="tracking", n_steps=50, n_trials=2, horizons=[5, 20])
    result = experiments.run_tracking(hyperbolic_system, exp, 0, {})
    assert result["status"] == "error"
    assert "above" in result["message"]


def test_flags_status_needs_generic_position(hyperbolic_system, monkeypatch):
    exp = ExperimentConfig(kind="flags", n_steps=50, n_trials=2, n_paths=4, flag_horizon=30)
    result = experiments.run_flags(hyperbolic_system, exp, 0, {})
    assert result["status"] == "success"
    assert result["survey"]["w0_fraction"] == 1.0

    def mostly_generic(*args, **kwargs):
        return {"paths": 100, "w0_count": 95, "w0_fraction": 0.95, "block_dimension_ok": 100}

    monkeypatch.setattr(experiments, "transversality_survey", mostly_generic)
    result = experiments.run_flags(hyperbolic_system, exp, 0, {})
    assert result["status"] == "error"
    assert "95/100" in result["message"]


def test_blocks_status_follows_the_rate_gaps(hyperbolic_system, monkeypatch):
    exp = ExperimentConfig(kind="blocks", n_steps=50, n_trials=2, n_paths=2, horizons=[10, 100], flag_horizon=20)
    result = experiments.run_blocks(hyperbolic_system, exp, 0, {})
    assert result["status"] == "success"
    assert result["conjugation"]["gaps_consistent"]

    original = experiments.verify_conjugation

    def disagreeing(*args, **kwargs):
        return {**original(*args, **kwargs), "gaps_consistent": False}

    monkeypatch.setattr(experiments, "verify_conjugation", disagreeing)
    result = experiments.run_blocks(hyperbolic_system, exp, 0, {})
    assert result["status"] == "error"
    assert "rate gaps" in result["message"]


def test_stationary_status_needs_pullback_concentration(hyperbolic_system, monkeypatch):
    exp = ExperimentConfig(kind="stationary", n_steps=50, n_trials=2, burn_in=200, n_samples=100, horizons=[5, 20],
                           flag_horizon=20)
    result = experiments.run_stationary(hyperbolic_system, exp, 0, {})
    assert result["status"] == "success"
    assert result["pullback"]["masses"][-1] == pytest.approx(1.0)

    original = experiments.pullback_limit

    def spread_out(*args, **kwargs):
        pullback = original(*args, **kwargs)
        pullback["masses"] = [0.5] * len(pullback["masses"])
        return pullback

    monkeypatch.setattr(experiments, "pullback_limit", spread_out)
    result = experiments.run_stationary(hyperbolic_system, exp, 0, {})
    assert result["status"] == "error"
    assert "pullback mass" in result["message"]


def test_regularity_refuses_a_non_stationary_cloud():
    cloud = MeasureCloud.point_mass(np.eye(2))
    cloud.stationary = False
    result = experiments.run_regularity(None, ExperimentConfig(kind="regularity"), 0, {"cloud": cloud})
    assert result["status"] == "error"
    assert "stationarity" in result["error"]


def test_every_kind_has_a_handler():
    assert set(experiments.HANDLERS) == set(ExperimentConfig.model_fields["kind"].annotation.__args__)


def test_identities_handler(hyperbolic_system):
    exp = ExperimentConfig(kind="identities", n_samples_identities=300)
    result = experiments.run_identities(hyperbolic_system, exp, 7, {})
    assert result["status"] == "success"
    assert all(result["checks"].values())
    assert result["residuals"]["n"] == 3


def test_reducible_line_control_has_an_atom():
    system, config, exp = scenario_experiment("reducible-line-control", "regularity")
    result = experiments.run_regularity(system, exp, config.seed, {})
    assert result["status"] == "success"
    assert result["atom"]["verdict"] == "ATOM"
    assert result["regularity"]["atom"] == "ATOM"


def test_diagonal_negative_control_is_unbounded():
    system, config, exp = scenario_experiment("diag-negative-control", "conformality")
    assert exp.horizons[-1] == 10_000
    # the spectrum is (0, 0, 0): one block of dimension 3
    report = LyapunovReport(orientation="forward", n_steps=1, n_trials=1, exponents=[0.0] * 3,
                            standard_errors=[0.0] * 3, multiplicities=[3], block_exponents=[0.0], root_rates=[0.0, 0.0],
                            degenerate_roots=[1, 2], dual_roots=[1, 2], sum_residual=0.0, sum_standard_error=0.0,
                            cluster_rel_tol=1e-2)
    context = {"report": report}

    result = experiments.run_conformality(system, exp, config.seed, context)
    assert result["verdicts"] == ["UNBOUNDED"]
    medians = result["conformality"]["tightness"][0]["medians"]
    assert medians[-1] > medians[0]


def test_realified_sl2c_blocks_are_conformal():
    system, config, exp = scenario_experiment("sl2c-realified", "conformality")
    _, _, exponents = scenario_experiment("sl2c-realified", "exponents")
    context = {}
    result = experiments.run_exponents(system, exponents, config.seed, context)
    assert result["degenerate_roots"] == [1, 3]
    assert context["report"].multiplicities == [2, 2]

    result = experiments.run_conformality(system, exp, config.seed, context)
    assert result["status"] == "success"
    assert result["verdicts"] == ["TIGHT", "TIGHT"]
    assert all(form is not None for form in result["conformality"]["forms"])
