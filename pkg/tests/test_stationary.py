import numpy as np
import pytest
from scipy import stats

from cocyclelab.boundary import FullFlag, flag_distance
from cocyclelab.errors import InvalidInputError, NotStationaryError
from cocyclelab.liegroup import random_orthogonal
from cocyclelab.oseledets import estimate_exponents, forward_flag
from cocyclelab.stationary import (
    MeasureCloud,
    atom_test,
    contraction_profile,
    furstenberg_check,
    largest_ball_mass,
    pullback_limit,
    regularity_scan,
    simulate_stationary,
    stationarity_spread,
)
from cocyclelab.walk import sample_word
from tests.conftest import rotation, single_state

EPS_GRID = [0.001 * 2 ** i for i in range(8)]


def repeated_cloud(basis, count):
    bases = np.broadcast_to(basis, (count,) + basis.shape).copy()
    return MeasureCloud(basis.shape[0], np.full(count, 1.0 / count), np.zeros(count, dtype=int), bases)


def random_cloud(rng, n, count):
    bases = np.stack([random_orthogonal(rng, n) for _ in range(count)])
    return MeasureCloud(n, np.full(count, 1.0 / count), np.zeros(count, dtype=int), bases)


def test_cloud_validation(rng):
    with pytest.raises(InvalidInputError):
        MeasureCloud(2, np.array([0.5, 0.4]), np.zeros(2), np.stack([np.eye(2)] * 2))
    with pytest.raises(InvalidInputError):
        MeasureCloud(2, np.ones(1), np.zeros(1), np.eye(3)[None])
    cloud = random_cloud(rng, 2, 10)
    assert len(cloud.at_state(0)) == 10
    with pytest.raises(InvalidInputError):
        cloud.at_state(1)


def test_identity_cocycle_keeps_the_standard_flag():
    system = single_state(2, [np.eye(2)], name="identity")
    cloud = simulate_stationary(system, burn_in=5, n_samples=50, seed=0, init="standard")
    np.testing.assert_allclose(cloud.bases, np.broadcast_to(np.eye(2), (50, 2, 2)))
    assert cloud.stationary
    np.testing.assert_allclose(cloud.weights.sum(), 1.0)


def test_irrational_rotation_orbit_equidistributes():
    system = single_state(2, [rotation(1.0)], allow_asymmetric=True, name="rotation")
    cloud = simulate_stationary(system, burn_in=10, n_samples=1000, seed=4, n_chains=1, init="point")
    line = cloud.bases[:, :, 0]
    angles = np.mod(np.arctan2(line[:, 1], line[:, 0]), np.pi) / np.pi
    assert stats.kstest(angles, "uniform").statistic <= 2.0 / np.sqrt(len(cloud))


def test_simulation_is_reproducible(sl2_mixed):
    a = simulate_stationary(sl2_mixed, burn_in=50, n_samples=100, seed=8, n_chains=20, thin=2)
    b = simulate_stationary(sl2_mixed, burn_in=50, n_samples=100, seed=8, n_chains=20, thin=2)
    np.testing.assert_array_equal(a.bases, b.bases)
    assert len(a) == 100
    with pytest.raises(InvalidInputError):
        simulate_stationary(sl2_mixed, burn_in=50, n_samples=100, seed=8, init="sideways")


def test_diagnostic_flags_an_unconverged_cloud(hyperbolic_system):
    early = simulate_stationary(hyperbolic_system, burn_in=1, n_samples=500, seed=0)
    assert not early.stationary
    assert early.diagnostic["max_z"] > 3.0
    settled = simulate_stationary(hyperbolic_system, burn_in=100, n_samples=500, seed=0)
    assert settled.stationary


def test_stationarity_spread(sl2_mixed):
    result = stationarity_spread(sl2_mixed, burn_in=200, n_samples=300, seed=1, n_starts=2)
    assert result["starts"] == 2
    assert len(result["integrals"]) == 2
    with pytest.raises(InvalidInputError):
        stationarity_spread(sl2_mixed, burn_in=200, n_samples=300, seed=1, n_starts=1)


def test_largest_ball_mass(rng):
    cloud = repeated_cloud(np.eye(3), 20)
    mass, index = largest_ball_mass(cloud, 0.01)
    assert mass == pytest.approx(1.0)
    assert 0 <= index < 20


def test_atom_verdicts(rng):
    point = repeated_cloud(np.eye(3), 300)
    assert atom_test(point, [0.004, 0.04, 0.4]).verdict == "ATOM"

    spread = random_cloud(rng, 3, 400)
    verdict = atom_test(spread, [0.01, 0.1, 1.0])
    assert verdict.verdict == "NO-ATOM"
    assert verdict.masses == sorted(verdict.masses)

    assert atom_test(random_cloud(rng, 3, 50), [0.001, 0.1]).verdict == "INCONCLUSIVE"
    with pytest.raises(InvalidInputError):
        atom_test(point, [0.0, 0.1])
    with pytest.raises(InvalidInputError):
        atom_test(point, [0.01, 0.02, 0.04])


def test_mass_decaying_with_the_radius_is_not_an_atom():
    angles = np.linspace(-0.003, 0.003, 2000)
    bases = np.stack([rotation(a) for a in angles])
    cloud = MeasureCloud(2, np.full(angles.size, 1.0 / angles.size), np.zeros(angles.size, dtype=int), bases)
    verdict = atom_test(cloud, EPS_GRID)
    assert verdict.masses[0] >= 0.25
    assert verdict.masses[-1] == pytest.approx(1.0)
    assert verdict.verdict == "NO-ATOM"


def test_regularity_scan_finds_a_point_mass():
    cloud = repeated_cloud(np.eye(3), 300)
    report = regularity_scan(cloud, EPS_GRID, n_g=8, seed=0)
    assert report.masses[0] == pytest.approx(1.0)
    assert report.masses == sorted(report.masses)
    assert report.n_g == 16
    assert report.atom == "INCONCLUSIVE"
    assert report.largest_ball_mass == pytest.approx(1.0)


def test_regularity_masses_are_monotone(rng):
    report = regularity_scan(random_cloud(rng, 3, 500), EPS_GRID, n_g=16, seed=2)
    assert all(a <= b for a, b in zip(report.masses, report.masses[1:]))
    assert report.masses[0] < 0.1


def test_sl2_stationary_measure_has_no_atom(sl2_mixed):
    cloud = simulate_stationary(sl2_mixed, burn_in=500, n_samples=2000, seed=3)
    assert atom_test(cloud, EPS_GRID).verdict == "NO-ATOM"


def test_furstenberg_check_at_the_attracting_flag(hyperbolic_system):
    report = estimate_exponents(hyperbolic_system, n_steps=100, n_trials=2, seed=0)
    result = furstenberg_check(hyperbolic_system, MeasureCloud.point_mass(FullFlag.std(3)), report, n_mc=1000, seed=0)
    assert result["consistent"]
    for root in result["roots"]:
        assert root["integral"] == pytest.approx(1.0)

    repelling = furstenberg_check(hyperbolic_system, MeasureCloud.point_mass(FullFlag.reversed(3)), report,
                                  n_mc=1000, seed=0)
    assert not repelling["consistent"]


def test_furstenberg_check_needs_a_stationary_cloud(hyperbolic_system):
    report = estimate_exponents(hyperbolic_system, n_steps=100, n_trials=2, seed=0)
    cloud = MeasureCloud.point_mass(FullFlag.std(3))
    cloud.stationary = False
    with pytest.raises(NotStationaryError):
        furstenberg_check(hyperbolic_system, cloud, report, n_mc=100, seed=0)


def test_pullback_concentrates_on_the_forward_flag(hyperbolic_system, rng):
    cloud = random_cloud(rng, 3, 200)
    word = sample_word(hyperbolic_system, seed=0, trial=0, length=30)
    reference = forward_flag(hyperbolic_system, word, 0, [10, 30])
    result = pullback_limit(hyperbolic_system, cloud, word, 0, [0, 30], eps=0.05, reference=reference)
    assert result["levels"] == [1, 2]
    assert result["masses"][0] < 0.5
    assert result["masses"][-1] == pytest.approx(1.0)
    assert flag_distance(result["centers"][-1], FullFlag.reversed(3)) <= 1e-6
    assert result["reference_distances"][-1] <= 1e-6
    assert len(result["center_steps"]) == 1


def test_forward_push_contracts_onto_the_attracting_flag(hyperbolic_system, rng):
    cloud = random_cloud(rng, 3, 200)
    word = sample_word(hyperbolic_system, seed=0, trial=0, length=50)
    result = contraction_profile(hyperbolic_system, word, 0, cloud, [0, 50], eps=0.05)
    assert result["masses"][0] < 0.5
    assert result["masses"][-1] == pytest.approx(1.0)


def test_generic_sl3_pullback(sl3_generic):
    cloud = simulate_stationary(sl3_generic, burn_in=300, n_samples=400, seed=1)
    word = sample_word(sl3_generic, seed=1, trial=0, length=300)
    reference = forward_flag(sl3_generic, word, 0, [150, 300])
    result = pullback_limit(sl3_generic, cloud, word, 0, [0, 300], eps=0.05, reference=reference)
    assert result["masses"][-1] >= 0.9
    assert result["masses"][-1] > result["masses"][0]
    assert result["reference_distances"][-1] <= 1e-2


def test_pullback_rejects_bad_horizons(hyperbolic_system, rng):
    cloud = random_cloud(rng, 3, 10)
    word = sample_word(hyperbolic_system, seed=0, trial=0, length=5)
    with pytest.raises(InvalidInputError):
        pullback_limit(hyperbolic_system, cloud, word, 0, [3, 2])
    with pytest.raises(InvalidInputError):
        pullback_limit(hyperbolic_system, cloud, word, 0, [10])


def test_furstenberg_error_bar_reflects_the_cloud_size(sl2_mixed, rng):
    report = estimate_exponents(sl2_mixed, n_steps=5000, n_trials=4, seed=1)
    cloud = random_cloud(rng, 2, 400)
    small = furstenberg_check(sl2_mixed, cloud, report, n_mc=400, seed=0)
    large = furstenberg_check(sl2_mixed, cloud, report, n_mc=1_000_000, seed=0)
    assert large["n_mc"] == small["n_mc"] == 400
    assert large["roots"][0]["integral_se"] == pytest.approx(small["roots"][0]["integral_se"])
    assert large["roots"][0]["integral_se"] > 0.0


def test_furstenberg_formula_holds_on_sl2_mixed(sl2_mixed):
    report = estimate_exponents(sl2_mixed, n_steps=20000, n_trials=8, seed=4)
    cloud = simulate_stationary(sl2_mixed, burn_in=500, n_samples=4000, seed=4)
    assert cloud.stationary
    result = furstenberg_check(sl2_mixed, cloud, report, n_mc=1_000_000, seed=4)
    assert result["consistent"], result
    assert result["roots"][0]["integral"] == pytest.approx(report.root_rates[0], rel=0.1)
