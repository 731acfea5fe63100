import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sigcorr.densemath import (
    QuadratureError,
    double_factorial,
    expm,
    gauss_legendre,
    kron,
    left,
    pair_partitions,
    pairings,
    quad,
    right,
    sandwich,
    unvec,
    vec,
)

from conftest import random_operator

seeds = st.integers(0, 2**32 - 1)


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(1, 4))
def test_vec_of_product_is_kron(seed, d):
    rng = np.random.default_rng(seed)
    X, rho, Y = (random_operator(rng, d) for _ in range(3))
    assert np.allclose(vec(X @ rho @ Y), kron(X, Y.T) @ vec(rho), atol=1e-13)
    assert np.allclose(sandwich(X, Y) @ vec(rho), vec(X @ rho @ Y), atol=1e-13)
    assert np.allclose(left(X) @ vec(rho), vec(X @ rho), atol=1e-13)
    assert np.allclose(right(Y) @ vec(rho), vec(rho @ Y), atol=1e-13)


@settings(max_examples=30, deadline=None)
@given(seeds, st.integers(1, 4))
def test_unvec_inverts_vec(seed, d):
    A = random_operator(np.random.default_rng(seed), d)
    assert np.array_equal(unvec(vec(A)), A)
    assert np.array_equal(unvec(vec(A), d), A)


def test_vec_is_row_stacking():
    A = np.array([[1, 2], [3, 4]])
    assert list(vec(A)) == [1, 2, 3, 4]


def test_unvec_rejects_bad_length():
    with pytest.raises(ValueError):
        unvec(np.arange(5))


def test_sandwich_dimension_mismatch():
    with pytest.raises(ValueError):
        sandwich(np.eye(2), np.eye(3))


def test_expm_diagonal_and_zero():
    D = np.diag([0.5, -1.0, 2j])
    assert np.allclose(expm(D, 0.7), np.diag(np.exp(0.7 * np.diag(D))), atol=1e-14)
    assert np.array_equal(expm(np.zeros((3, 3))), np.eye(3))


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_expm_matches_eigendecomposition(seed):
    rng = np.random.default_rng(seed)
    A = random_operator(rng, 3)
    mu, V = np.linalg.eig(A)
    ref = V @ np.diag(np.exp(mu)) @ np.linalg.inv(V)
    assert np.allclose(expm(A), ref, atol=1e-10)


def test_expm_errors():
    with pytest.raises(ValueError):
        expm(np.ones((2, 3)))
    with pytest.raises(OverflowError):
        expm(np.array([[800.0]]))


def test_quad_smooth_and_kinked():
    assert quad(np.sin, 0, np.pi) == pytest.approx(2.0, abs=1e-12)
    assert quad(lambda x: np.abs(x - 0.3), 0, 1, points=[0.3]) == pytest.approx(0.29, abs=1e-13)
    value, err = quad(np.exp, 0, 1, full_output=True)
    assert value == pytest.approx(math.e - 1, abs=1e-13)
    assert 0 <= err < 1e-10


def test_quad_budget_exhaustion():
    with pytest.raises(QuadratureError) as info:
        quad(lambda x: np.sin(1 / np.maximum(x, 1e-300)), 0, 1, tol=1e-14, max_panels=20)
    assert info.value.value is not None


@pytest.mark.parametrize("n", [1, 3, 6, 10])
def test_gauss_legendre_exact_for_polynomials(n):
    x, w = gauss_legendre(n, -0.5, 2.0)
    deg = 2 * n - 1
    exact = (2.0 ** (deg + 1) - (-0.5) ** (deg + 1)) / (deg + 1)
    assert w @ x**deg == pytest.approx(exact, rel=1e-12)


@pytest.mark.parametrize("m", range(6))
def test_pairing_count_is_double_factorial(m):
    ps = pairings(m)
    assert len(ps) == double_factorial(2 * m - 1)
    assert len(set(ps)) == len(ps)
    for p in ps:
        flat = sorted(i for pair in p for i in pair)
        assert flat == list(range(2 * m))
        assert all(a < b for a, b in p)


def test_pair_partitions_of_labels_and_odd_sets():
    assert list(pair_partitions("abcd")) == [
        (("a", "b"), ("c", "d")), (("a", "c"), ("b", "d")), (("a", "d"), ("b", "c"))]
    assert list(pair_partitions([1, 2, 3])) == []
    assert list(pair_partitions([])) == [()]


def test_double_factorial_values():
    assert [double_factorial(n) for n in (-1, 0, 1, 5, 6, 9)] == [1, 1, 1, 15, 48, 945]
    with pytest.raises(ValueError):
        double_factorial(-2)
