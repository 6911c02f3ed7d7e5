import numpy as np
import pytest
import sympy
from hypothesis import given, settings, strategies as st
from scipy.interpolate import BSpline

from pqspline.spline_basis import (
    MAX_DEGREE, BasisSpec, DesignMatrix, bernoulli_numbers, bernoulli_poly, build_basis,
    eval_basis, spline_value,
)


def naive_basis(p, K, x):
    """Textbook recursion on right-closed degree-0 intervals, scalar x."""
    t = np.arange(-p, K + p + 1) / K

    def B(j, q):
        # function j of degree q lives on knots t[j] .. t[j+q+1]
        if q == 0:
            lo, hi = t[j], t[j + 1]
            if x == 0.0:
                return 1.0 if j == p else 0.0
            return 1.0 if lo < x <= hi else 0.0
        a = (x - t[j]) / (t[j + q] - t[j]) * B(j, q - 1)
        b = (t[j + q + 1] - x) / (t[j + q + 1] - t[j + 1]) * B(j + 1, q - 1)
        return a + b

    return np.array([B(j, p) for j in range(K + p)])


def test_knots_and_dimension():
    s = build_basis(1, 2)
    np.testing.assert_allclose(s.knots, [-0.5, 0, 0.5, 1, 1.5])
    assert s.dim == 3
    s = build_basis(0, 1)
    np.testing.assert_allclose(s.knots, [0, 1])
    assert s.dim == 1
    s = build_basis(3, 5)
    assert s.dim == 8
    assert s.knots[-1] == pytest.approx(1.6)
    np.testing.assert_allclose(np.diff(s.knots), 0.2)
    assert len(s.knots) == s.dim + s.degree + 1


def test_knots_are_exact_ratios():
    s = build_basis(3, 7)
    np.testing.assert_array_equal(s.knots, np.arange(-3, 11) / 7)
    with pytest.raises(ValueError):
        s.knots[0] = 1.0


@pytest.mark.parametrize("p,K", [(-1, 3), (2, 0), (MAX_DEGREE + 1, 3), (1.5, 3)])
def test_build_basis_rejects(p, K):
    with pytest.raises(ValueError):
        build_basis(p, K)


def test_eval_basis_linear_hand_value():
    np.testing.assert_allclose(eval_basis(build_basis(1, 2), 0.25), [0.5, 0.5, 0.0], atol=1e-15)


def test_eval_basis_degree_zero_bins():
    s = build_basis(0, 4)
    np.testing.assert_array_equal(eval_basis(s, 0.3), [0, 1, 0, 0])
    # right-closed intervals; 0 belongs to the first one
    np.testing.assert_array_equal(eval_basis(s, 0.25), [1, 0, 0, 0])
    np.testing.assert_array_equal(eval_basis(s, 0.0), [1, 0, 0, 0])
    np.testing.assert_array_equal(eval_basis(s, 1.0), [0, 0, 0, 1])


@pytest.mark.parametrize("x", [-1e-12, 1.0 + 1e-12, np.nan])
def test_eval_basis_domain(x):
    with pytest.raises(ValueError):
        eval_basis(build_basis(2, 3), x)


@pytest.mark.parametrize("p,K", [(0, 3), (1, 4), (2, 5), (3, 5), (5, 7), (10, 3)])
def test_matches_naive_recursion(p, K):
    s = build_basis(p, K)
    xs = np.concatenate([np.linspace(0, 1, 23), np.arange(K + 1) / K])
    for x in xs:
        np.testing.assert_allclose(eval_basis(s, x), naive_basis(p, K, float(x)), atol=1e-12)


@pytest.mark.parametrize("p,K", [(1, 6), (2, 4), (3, 10), (4, 9)])
def test_matches_scipy_design_matrix(p, K):
    s = build_basis(p, K)
    x = np.random.default_rng(p * 10 + K).random(200)
    ref = BSpline.design_matrix(x, s.knots, p).toarray()
    np.testing.assert_allclose(eval_basis(s, x), ref, atol=1e-13)


def test_design_matrix_products():
    s = build_basis(3, 6)
    rng = np.random.default_rng(0)
    x = rng.random(50)
    Z = DesignMatrix(s, x)
    dense = Z.toarray()
    c = rng.standard_normal(s.dim)
    v = rng.standard_normal(50)
    w = rng.random(50)
    np.testing.assert_allclose(Z.dot(c), dense @ c, atol=1e-13)
    np.testing.assert_allclose(Z.rdot(v), dense.T @ v, atol=1e-13)
    np.testing.assert_allclose(Z.gram(w), dense.T @ (w[:, None] * dense), atol=1e-13)
    assert Z.shape == (50, s.dim)


@settings(max_examples=60, deadline=None)
@given(p=st.integers(0, 5), K=st.integers(1, 50), seed=st.integers(0, 2**32 - 1))
def test_partition_of_unity_and_support(p, K, seed):
    s = build_basis(p, K)
    x = np.random.default_rng(seed).random(10_000 // 60 + 1)
    Z = eval_basis(s, x)
    np.testing.assert_allclose(Z.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(Z >= 0) and np.all(Z <= 1 + 1e-15)
    assert np.all((Z > 0).sum(axis=1) <= p + 1)
    # function k is zero outside (t_k, t_{k+p+1}]
    t = s.knots
    for k in range(s.dim):
        outside = (x <= t[k]) | (x > t[k + p + 1])
        assert np.all(Z[outside, k] == 0)


def test_partition_of_unity_dense():
    rng = np.random.default_rng(7)
    x = rng.random(10_000)
    for p in range(6):
        for K in (1, 3, 17, 50):
            assert np.max(np.abs(eval_basis(build_basis(p, K), x).sum(1) - 1)) < 1e-12


def test_spline_value_constant_coefficients():
    s = build_basis(3, 5)
    x = np.linspace(0, 1, 41)
    c = np.full(s.dim, 2.5)
    np.testing.assert_allclose(spline_value(s, c, x), 2.5, atol=1e-14)
    np.testing.assert_allclose(spline_value(s, c, x, 1), 0.0, atol=1e-12)


def test_spline_value_line_derivative():
    s = build_basis(3, 8)
    xs = np.linspace(0, 1, 400)
    coef = np.linalg.lstsq(eval_basis(s, xs), 2 * xs, rcond=None)[0]
    assert spline_value(s, coef, 0.5, 1) == pytest.approx(2.0, abs=1e-8)


@pytest.mark.parametrize("p,m", [(2, 1), (3, 1), (3, 2), (3, 3), (5, 4)])
def test_derivative_identity_matches_finite_differences(p, m):
    K = 6
    s = build_basis(p, K)
    coef = np.random.default_rng(p + m).standard_normal(s.dim)
    h = 1e-3
    # interior points away from knots, so the stencil stays in one piece
    x = (np.arange(K) + 0.37) / K
    offsets = np.arange(m + 1) - m / 2
    weights = np.array([(-1) ** (m - j) * float(sympy.binomial(m, j)) for j in range(m + 1)])
    vals = np.array([spline_value(s, coef, x + o * h) for o in offsets])
    fd = weights @ vals / h ** m
    exact = spline_value(s, coef, x, m)
    np.testing.assert_allclose(fd, exact, rtol=1e-5, atol=1e-5 * np.max(np.abs(exact)))


def test_spline_value_rejects():
    s = build_basis(2, 3)
    with pytest.raises(ValueError):
        spline_value(s, np.zeros(s.dim), 0.5, 3)
    with pytest.raises(ValueError):
        spline_value(s, np.zeros(s.dim + 1), 0.5)
    with pytest.raises(ValueError):
        spline_value(s, np.zeros(s.dim), 1.5)


def test_spline_value_scalar_returns_float():
    s = build_basis(1, 2)
    assert isinstance(spline_value(s, np.ones(3), 0.4), float)


def test_bernoulli_values():
    assert bernoulli_poly(2, 0.5) == pytest.approx(-1 / 12, abs=1e-15)
    assert bernoulli_poly(1, 0.5) == pytest.approx(0.0, abs=1e-15)
    assert bernoulli_poly(4, 0.0) == pytest.approx(-1 / 30, abs=1e-15)
    assert bernoulli_poly(0, 0.3) == 1.0
    with pytest.raises(ValueError):
        bernoulli_poly(-1, 0.2)


def test_bernoulli_against_sympy():
    z = sympy.Symbol("z")
    xs = np.linspace(0, 1, 13)
    for n in range(9):
        ref = sympy.lambdify(z, sympy.bernoulli(n, z), "numpy")(xs)
        np.testing.assert_allclose(bernoulli_poly(n, xs), ref, atol=1e-13)


def test_bernoulli_numbers_exact():
    from fractions import Fraction
    assert bernoulli_numbers(6) == [Fraction(1), Fraction(-1, 2), Fraction(1, 6), 0,
                                    Fraction(-1, 30), 0, Fraction(1, 42)]


@pytest.mark.parametrize("n", range(1, 9))
def test_bernoulli_recurrence(n):
    x = np.linspace(0.05, 0.95, 19)
    h = 1e-5
    fd = (bernoulli_poly(n, x + h) - bernoulli_poly(n, x - h)) / (2 * h)
    np.testing.assert_allclose(fd, n * bernoulli_poly(n - 1, x), atol=1e-6)


def test_basisspec_interval_index():
    s = BasisSpec(2, 4)
    np.testing.assert_array_equal(s.interval_index([0.0, 0.25, 0.2500001, 1.0]), [0, 0, 1, 3])
