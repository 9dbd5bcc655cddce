import numpy as np
import pytest
import scipy.linalg  # type: ignore

import mjplab.numerics
from mjplab.errors import (
    InvalidDistribution,
    SingularMatrix,
)
from mjplab.numerics import Rng


def test_lu_solve():
    a = np.array([[4.0, 3.0], [6.0, 3.0]])
    b = np.array([10.0, 12.0])
    x = mjplab.numerics.lu_solve(a, b)
    assert np.allclose(a @ x, b)
    assert np.allclose(x, [1.0, 2.0])


def test_lu_solve_matrix_rhs():
    rng = Rng(0)
    a = rng.normal(size=(5, 5)) + 5 * np.eye(5)
    b = rng.normal(size=(5, 3))
    assert np.allclose(a @ mjplab.numerics.lu_solve(a, b), b)


def test_lu_solve_singular():
    with pytest.raises(SingularMatrix):
        mjplab.numerics.lu_solve([[1.0, 2.0], [2.0, 4.0]], [1.0, 2.0])


def test_lu_solve_rejects_rectangular():
    with pytest.raises(ValueError):
        mjplab.numerics.lu_solve(np.ones((2, 3)), np.ones(2))


def _assert_same_spectrum(actual, expected, atol=1e-8):
    assert len(actual) == len(expected)
    remaining = list(actual)
    for e in expected:
        distances = [abs(a - e) for a in remaining]
        best = int(np.argmin(distances))
        assert distances[best] < atol, 'eigenvalue %r not found in %r' % (e, actual)
        remaining.pop(best)


@pytest.mark.parametrize(
    ('matrix', 'expected'),
    [
        ([[2.0]], [2.0]),
        ([[0.0, 1.0], [-1.0, 0.0]], [1j, -1j]),
        ([[1.0, 2.0, 3.0], [0.0, 4.0, 5.0], [0.0, 0.0, 6.0]], [1.0, 4.0, 6.0]),
        ([[-1.0, 1.0], [3.0, -3.0]], [0.0, -4.0]),
    ]
)
def test_eigenvalues_known(matrix, expected):
    _assert_same_spectrum(mjplab.numerics.eigenvalues(matrix), expected)


@pytest.mark.parametrize('k', [3, 6, 12])
def test_eigenvalues_random(k):
    a = Rng(k).normal(size=(k, k))
    _assert_same_spectrum(mjplab.numerics.eigenvalues(a), np.linalg.eigvals(a), atol=1e-7)


def test_eigenvalues_generator_has_zero():
    f = np.array([[-2.0, 1.0, 1.0], [0.5, -1.0, 0.5], [1.0, 2.0, -3.0]])
    lambdas = mjplab.numerics.eigenvalues(f)
    assert min(abs(x) for x in lambdas) < 1e-10
    assert all(x.real <= 1e-10 for x in lambdas)


def test_matrix_exponential_zero():
    assert np.array_equal(mjplab.numerics.matrix_exponential(np.zeros((3, 3))), np.eye(3))


@pytest.mark.parametrize('scale', [0.1, 1.0, 5.0])
def test_matrix_exponential_matches_scipy(scale):
    a = Rng(1).normal(size=(4, 4)) * scale
    expected = scipy.linalg.expm(a)
    assert np.allclose(mjplab.numerics.matrix_exponential(a), expected, rtol=1e-8, atol=1e-10)


def test_matrix_exponential_of_generator_is_stochastic():
    f = np.array([[-1.0, 1.0], [3.0, -3.0]])
    p = mjplab.numerics.matrix_exponential(f * 0.7)
    assert np.allclose(p.sum(axis=1), 1.0)
    assert np.all(p >= 0)


@pytest.mark.parametrize('degree', [0, 1, 5, 9])
def test_gauss_legendre_is_exact_for_polynomials(degree):
    rule = mjplab.numerics.gauss_legendre(5, 0.0, 2.0)
    approx = rule.integrate(rule.nodes ** degree)
    assert approx == pytest.approx(2.0 ** (degree + 1) / (degree + 1))


def test_gauss_legendre_weights_sum_to_length():
    rule = mjplab.numerics.gauss_legendre(7, -1.0, 3.0)
    assert len(rule) == 7
    assert rule.weights.sum() == pytest.approx(4.0)
    assert np.all((rule.nodes > -1.0) & (rule.nodes < 3.0))


@pytest.mark.parametrize(('n', 'a', 'b'), [(0, 0.0, 1.0), (3, 1.0, 1.0), (3, 2.0, 1.0)])
def test_gauss_legendre_bad_arguments(n, a, b):
    with pytest.raises(ValueError):
        mjplab.numerics.gauss_legendre(n, a, b)


def test_rng_is_reproducible():
    assert np.array_equal(Rng(3, 7).normal(size=10), Rng(3, 7).normal(size=10))


def test_rng_streams_differ():
    assert not np.array_equal(Rng(3, 0).uniform(size=10), Rng(3, 1).uniform(size=10))
    assert not np.array_equal(Rng(3, 0).uniform(size=10), Rng(4, 0).uniform(size=10))


def test_rng_state_round_trip():
    rng = Rng(5)
    rng.normal(size=3)
    state = rng.get_state()
    expected = rng.normal(size=4)
    restored = mjplab.numerics.rng_new(5, state=state)
    assert np.array_equal(restored.normal(size=4), expected)


def test_categorical_skips_zero_probability():
    rng = Rng(0)
    draws = [rng.categorical([0.5, 0.5, 0.0]) for _ in range(500)]
    assert set(draws) == {0, 1}


def test_categorical_frequencies():
    rng = Rng(11)
    draws = np.array([rng.categorical([0.2, 0.8]) for _ in range(4000)])
    assert np.mean(draws == 1) == pytest.approx(0.8, abs=0.03)


@pytest.mark.parametrize(
    'probs',
    [
        [],
        [0.5, 0.6],
        [-0.1, 1.1],
        [np.nan, 1.0],
        [[0.5, 0.5]],
    ]
)
def test_check_probabilities_rejects(probs):
    with pytest.raises(InvalidDistribution):
        mjplab.numerics.check_probabilities(probs)


def test_exponential_needs_positive_rate():
    with pytest.raises(InvalidDistribution):
        Rng(0).exponential(0.0)
