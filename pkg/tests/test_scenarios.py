import json

import numpy as np
import pytest

from cocyclelab.configs import DEFAULT_SCENARIO_DIR
from cocyclelab.errors import ConfigError
from cocyclelab.scenarios import (
    ExperimentConfig,
    build_system,
    catalog_digest,
    list_scenarios,
    load_scenario,
    normalized_json,
    parse_scenario,
    resolve_scenario,
    scenario_digest,
)

BUNDLED = {
    "diag-negative-control",
    "reducible-line-control",
    "rotation",
    "sl2-mixed",
    "sl2c-realified",
    "sl3-generic",
}


def scenario(**overrides):
    config = {
        "name": "tiny",
        "n": 2,
        "atoms": [{"label": "h", "probability": 0.5, "matrix": {"kind": "diagonal", "entries": [2.0, 0.5]},
                   "include_inverse": True}],
    }
    config.update(overrides)
    return json.dumps(config)


def test_bundled_catalog():
    catalog = list_scenarios(DEFAULT_SCENARIO_DIR)
    assert {entry["name"] for entry in catalog} == BUNDLED
    assert [entry["name"] for entry in catalog] == sorted(entry["name"] for entry in catalog)
    assert all(len(entry["digest"]) == 64 for entry in catalog)
    assert catalog_digest(catalog) == catalog_digest(list_scenarios(DEFAULT_SCENARIO_DIR))


@pytest.mark.parametrize("name", sorted(BUNDLED))
def test_bundled_scenarios_build(name):
    config = load_scenario(name, DEFAULT_SCENARIO_DIR)
    system = build_system(config)
    assert system.n == config.n
    assert system.probabilities.sum() == pytest.approx(1.0)
    assert config.experiments
    np.testing.assert_allclose(np.linalg.det(system.matrices), 1.0, atol=1e-12)


def test_empty_or_missing_catalog(tmp_path):
    assert list_scenarios(tmp_path) == []
    assert list_scenarios(tmp_path / "missing") == []


def test_catalog_skips_malformed_files(tmp_path):
    (tmp_path / "good.json").write_text(scenario(name="good"))
    (tmp_path / "bad.json").write_text("{not json")
    assert [entry["name"] for entry in list_scenarios(tmp_path)] == ["good"]


def test_probability_sum_invariant():
    atoms = [{"label": "h", "probability": 0.45, "matrix": {"kind": "diagonal", "entries": [2.0, 0.5]},
              "include_inverse": True}]
    with pytest.raises(ConfigError, match="probability-sum invariant"):
        parse_scenario(scenario(atoms=atoms))


def test_horizon_order_invariant():
    with pytest.raises(ConfigError, match="horizon-order invariant"):
        parse_scenario(scenario(experiments=[{"kind": "exponents", "horizons": [100, 10]}]))


def test_eps_grid_must_span_two_decades():
    with pytest.raises(ConfigError, match="span 2 decades"):
        parse_scenario(scenario(experiments=[{"kind": "regularity", "eps": [0.01, 0.02, 0.04]}]))
    parse_scenario(scenario(experiments=[{"kind": "regularity", "eps": [0.01, 1.0]}]))


def test_unknown_fields_and_kinds_are_rejected():
    with pytest.raises(ConfigError):
        parse_scenario(scenario(colour="red"))
    with pytest.raises(ConfigError):
        parse_scenario(scenario(experiments=[{"kind": "fourier"}]))


def test_determinant_invariant():
    atoms = [{"label": "d", "probability": 0.5, "matrix": {"kind": "diagonal", "entries": [2.0, 1.0]},
              "include_inverse": True}]
    with pytest.raises(ConfigError, match="determinant invariant"):
        build_system(parse_scenario(scenario(atoms=atoms)))


def test_complex_matrices_need_realify():
    atoms = [{"label": "p", "probability": 0.5,
              "matrix": {"kind": "diagonal", "entries": [1.0, 1.0], "phases": [0.5, -0.5]},
              "include_inverse": True}]
    with pytest.raises(ConfigError, match="realify"):
        build_system(parse_scenario(scenario(atoms=atoms)))
    with pytest.raises(ConfigError):
        parse_scenario(scenario(n=3, realify=True, atoms=atoms))


def test_realified_atoms_have_complex_structure():
    system = build_system(load_scenario("sl2c-realified", DEFAULT_SCENARIO_DIR))
    assert system.n == 4
    for m in system.matrices[:, 0]:
        np.testing.assert_allclose(m[:2, :2], m[2:, 2:], atol=1e-12)
        np.testing.assert_allclose(m[:2, 2:], -m[2:, :2], atol=1e-12)


def test_inverse_atoms_follow_the_base_map():
    atoms = [{"label": "s", "probability": 0.5, "base_map": [1, 0], "include_inverse": True,
              "matrices": [{"kind": "diagonal", "entries": [2.0, 0.5]}, {"kind": "rotation", "angle": 0.3}]}]
    system = build_system(parse_scenario(scenario(states=["a", "b"], atoms=atoms)))
    assert system.n_states == 2
    assert system.symmetric_partner == [1, 0]


def test_normalized_json_round_trip():
    config = load_scenario("sl3-generic", DEFAULT_SCENARIO_DIR)
    text = normalized_json(config)
    assert normalized_json(parse_scenario(text)) == text
    assert scenario_digest(parse_scenario(text)) == scenario_digest(config)
    changed = config.model_copy(update={"seed": config.seed + 1})
    assert scenario_digest(changed) != scenario_digest(config)


def test_experiment_defaults():
    exp = ExperimentConfig(kind="regularity")
    assert exp.horizons == [100, 1000, 10000]
    assert exp.eps[0] == pytest.approx(0.001)
    assert len(exp.eps) == 8


def test_resolve_scenario(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(scenario())
    assert resolve_scenario(path) == path
    assert resolve_scenario("tiny", tmp_path) == path
    with pytest.raises(ConfigError):
        resolve_scenario("nowhere", tmp_path)
