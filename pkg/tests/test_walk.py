import numpy as np
import pytest

from cocyclelab.errors import InvalidInputError
from cocyclelab.liegroup import cartan_log, random_element
from cocyclelab.walk import (
    Atom,
    CocycleSystem,
    ProductAccumulator,
    Word,
    backward_product,
    diagonal_log_path,
    forward_product,
    naive_product,
    product_path,
    sample_word,
    state_path,
    trial_rng,
)
from tests.conftest import single_state


def swap_system(a, b, base_distribution=None):
    """Two states exchanged by every atom, with the inverse atom included"""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    atoms = [
        Atom(0.5, (1, 0), (a, b), "s"),
        Atom(0.5, (1, 0), (np.linalg.inv(b), np.linalg.inv(a)), "s^-1"),
    ]
    return CocycleSystem(2, ["x", "y"], atoms, base_distribution=base_distribution, name="swap")


def test_probability_sum_invariant_is_enforced():
    with pytest.raises(InvalidInputError, match="probability-sum invariant"):
        single_state(2, [np.eye(2)], probabilities=[0.9], allow_asymmetric=True)


def test_symmetry_invariant_is_enforced():
    with pytest.raises(InvalidInputError, match="symmetry invariant"):
        single_state(2, [np.diag([2.0, 0.5])])


def test_base_map_must_be_a_permutation():
    atoms = [Atom(1.0, (0, 0), (np.eye(2), np.eye(2)))]
    with pytest.raises(InvalidInputError, match="permutation"):
        CocycleSystem(2, ["x", "y"], atoms, allow_asymmetric=True)


def test_matrices_must_have_unit_determinant():
    with pytest.raises(InvalidInputError, match="determinant"):
        single_state(2, [np.diag([2.0, 1.0])], allow_asymmetric=True)


def test_base_distribution_must_be_stationary():
    r = np.array([[0.0, -1.0], [1.0, 0.0]])
    with pytest.raises(InvalidInputError, match="not stationary"):
        swap_system(r, r.T, base_distribution=[0.9, 0.1])
    system = swap_system(r, r.T)
    np.testing.assert_allclose(system.base_distribution, [0.5, 0.5])


def test_inverse_partners_follow_the_base_map():
    a = np.array([[2.0, 1.0], [1.0, 1.0]])
    b = np.array([[1.0, 0.0], [3.0, 1.0]])
    system = swap_system(a, b)
    assert system.symmetric_partner == [1, 0]
    np.testing.assert_array_equal(system.inverse_maps, [[1, 0], [1, 0]])


def test_state_lookup():
    system = swap_system(np.eye(2), np.eye(2))
    assert system.state_index("y") == 1
    assert system.state_index(0) == 0
    with pytest.raises(InvalidInputError):
        system.state_index("z")
    np.testing.assert_array_equal(state_path(system, [0, 1, 0], "x"), [0, 1, 0, 1])


def test_trial_rng_is_keyed_by_seed_trial_and_stream():
    a = trial_rng(7, 3).standard_normal(5)
    np.testing.assert_array_equal(a, trial_rng(7, 3).standard_normal(5))
    assert not np.array_equal(a, trial_rng(7, 4).standard_normal(5))
    assert not np.array_equal(a, trial_rng(7, 3, stream=1).standard_normal(5))


def test_sample_word_is_deterministic(sl3_generic):
    w1 = sample_word(sl3_generic, seed=11, trial=2, length=50)
    w2 = sample_word(sl3_generic, seed=11, trial=2, length=50)
    np.testing.assert_array_equal(w1.atoms, w2.atoms)
    assert w1.atoms.min() >= 0 and w1.atoms.max() < sl3_generic.n_atoms
    # a later trial does not depend on how many earlier trials were drawn
    w3 = sample_word(sl3_generic, seed=11, trial=5, length=50)
    assert not np.array_equal(w1.atoms, w3.atoms)


def test_two_sided_word_views():
    word = Word(np.arange(10), "two-sided", origin=4)
    np.testing.assert_array_equal(word.forward_atoms, [4, 5, 6, 7, 8, 9])
    np.testing.assert_array_equal(word.backward_atoms, [3, 2, 1, 0])
    shifted = word.shifted(2)
    np.testing.assert_array_equal(shifted.forward_atoms, [6, 7, 8, 9])
    np.testing.assert_array_equal(shifted.backward_atoms, [5, 4, 3, 2, 1, 0])
    with pytest.raises(InvalidInputError):
        Word(np.arange(3)).backward_atoms
    with pytest.raises(InvalidInputError):
        Word(np.arange(3), "sideways")


def test_sampled_two_sided_word_has_past_and_future(sl2_mixed):
    word = sample_word(sl2_mixed, seed=1, trial=0, length=20, orientation="two-sided", past=5)
    assert len(word) == 25
    assert word.origin == 5
    assert len(word.forward_atoms) == 20


def test_accumulator_matches_direct_product(sl3_generic):
    word = sample_word(sl3_generic, seed=3, trial=0, length=30)
    acc = forward_product(sl3_generic, word, 0)
    direct = naive_product(sl3_generic, word.atoms, 0)
    scale = np.max(np.abs(direct))
    assert np.max(np.abs(acc.matrix() - direct)) <= 1e-9 * scale


def test_accumulator_singular_values_match_svd(sl3_generic):
    word = sample_word(sl3_generic, seed=3, trial=1, length=10)
    acc = forward_product(sl3_generic, word, 0)
    expected = cartan_log(naive_product(sl3_generic, word.atoms, 0))
    np.testing.assert_allclose(acc.a_log(), expected, atol=1e-6)


def test_accumulator_with_seed_basis(rng):
    g = random_element(rng, 3)
    q, _ = np.linalg.qr(random_element(rng, 3))
    acc = ProductAccumulator(3, basis=q).advance(g)
    np.testing.assert_allclose(acc.matrix(), g, atol=1e-10)
    with pytest.raises(InvalidInputError):
        ProductAccumulator(3, basis=2 * np.eye(3))


def test_long_products_stay_finite(hyperbolic_system):
    word = sample_word(hyperbolic_system, seed=0, trial=0, length=2000)
    acc = forward_product(hyperbolic_system, word, 0)
    q, log_d, upper = acc.state()
    np.testing.assert_allclose(log_d, [2000.0, 0.0, -2000.0], atol=1e-8)
    assert np.all(np.isfinite(upper))
    np.testing.assert_allclose(acc.a_log(), [2000.0, 0.0, -2000.0], atol=1e-6)


def test_backward_product_inverts_the_reversed_forward_product(rng):
    mats = [random_element(rng, 3) for _ in range(3)]
    system = single_state(3, mats, allow_asymmetric=True)
    word = sample_word(system, seed=5, trial=0, length=12, orientation="backward")
    acc = backward_product(system, word, 0)
    expected = np.linalg.inv(naive_product(system, word.atoms[::-1], 0))
    np.testing.assert_allclose(acc.matrix(), expected, rtol=1e-8, atol=1e-8 * np.max(np.abs(expected)))


def test_product_path_snapshots(sl2_mixed):
    word = sample_word(sl2_mixed, seed=2, trial=0, length=40)
    path = product_path(sl2_mixed, word, 0, [0, 10, 40])
    assert [s.horizon for s in path.snapshots] == [0, 10, 40]
    np.testing.assert_allclose(path.at(0).accumulator.matrix(), np.eye(2))
    np.testing.assert_allclose(path.at(10).accumulator.matrix(), naive_product(sl2_mixed, word.atoms[:10], 0),
                               rtol=1e-9, atol=1e-9)
    with pytest.raises(KeyError):
        path.at(5)
    with pytest.raises(InvalidInputError):
        product_path(sl2_mixed, word, 0, [10, 5])
    with pytest.raises(InvalidInputError):
        product_path(sl2_mixed, word, 0, [41])


def test_renormalization_period_does_not_change_exponent_logs(sl3_generic):
    word = sample_word(sl3_generic, seed=4, trial=0, length=200)
    every = diagonal_log_path(sl3_generic, word.atoms, 0, renormalize_every=1)["log_d"]
    sparse = diagonal_log_path(sl3_generic, word.atoms, 0, renormalize_every=5)["log_d"]
    np.testing.assert_allclose(every, sparse, atol=1e-8)
    assert abs(every.sum()) <= 1e-8


def test_diagonal_log_checkpoints(sl2_mixed):
    word = sample_word(sl2_mixed, seed=4, trial=0, length=100)
    result = diagonal_log_path(sl2_mixed, word.atoms, 0, checkpoints=4)
    assert result["checkpoints"].shape == (4, 2)
    np.testing.assert_allclose(result["checkpoints"][-1], result["log_d"])
