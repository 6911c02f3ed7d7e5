import warnings

import cvxpy as cp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog

from pqspline._linalg import SingularSystemError
from pqspline.penalty import difference_matrix
from pqspline.solver import (
    ConvergenceWarning, IRLSConfig, check_loss, fit_linear_quantile, fit_local_linear_quantile,
    fit_penalized_mean, fit_penalized_quantile, irls_weights, penalized_objective, psi,
)
from pqspline.spline_basis import DesignMatrix, build_basis, eval_basis


def quantile_interval(y, tau):
    """Minimizer set of sum rho_tau(y - b) by brute force over the kinks."""
    cand = np.unique(y)
    obj = np.array([np.sum(check_loss(y - c, tau)) for c in cand])
    hit = cand[np.isclose(obj, obj.min(), rtol=1e-12, atol=1e-12)]
    return hit.min(), hit.max()


def cvx_fit(x, y, tau, spec, m, lam):
    Z = eval_basis(spec, x)
    D = difference_matrix(m, spec.dim).matrix.astype(float)
    b = cp.Variable(spec.dim)
    r = y - Z @ b
    loss = cp.sum(cp.maximum(tau * r, (tau - 1) * r))
    cp.Problem(cp.Minimize(loss + lam / 2 * cp.sum_squares(D @ b))).solve(solver=cp.CLARABEL)
    return b.value


def test_check_loss_examples():
    assert check_loss(2.0, 0.5) == 1.0
    assert check_loss(-2.0, 0.5) == 1.0
    assert check_loss(-1.0, 0.25) == 0.75
    for tau in (0.01, 0.3, 0.99):
        assert check_loss(0.0, tau) == 0.0
    assert psi(1.0, 0.3) == pytest.approx(0.3)
    assert psi(-1.0, 0.3) == pytest.approx(-0.7)
    for bad in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            check_loss(1.0, bad)


@settings(max_examples=100, deadline=None)
@given(u=st.floats(-1e3, 1e3), v=st.floats(-1e3, 1e3), tau=st.floats(0.001, 0.999))
def test_check_loss_convexity(u, v, tau):
    mid = check_loss(0.5 * (u + v), tau)
    assert mid <= 0.5 * (check_loss(u, tau) + check_loss(v, tau)) + 1e-9 * (1 + abs(u) + abs(v))
    assert check_loss(u, tau) >= 0


def knight_integral(u, v):
    """Closed form of int_0^v (I(u <= s) - I(u <= 0)) ds."""
    pos = np.maximum(0.0, v - np.maximum(u, 0.0))
    neg = -np.maximum(0.0, -np.maximum(u, v))
    return np.where(v >= 0, pos, neg) - v * (u <= 0)


def test_knight_identity():
    rng = np.random.default_rng(42)
    u = rng.uniform(-3, 3, 10_000)
    v = rng.uniform(-3, 3, 10_000)
    tau = rng.uniform(0.01, 0.99, 10_000)
    lhs = check_loss(u - v, tau) - check_loss(u, tau)
    rhs = -v * psi(u, tau) + knight_integral(u, v)
    assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_irls_weight_examples():
    cfg = IRLSConfig(alpha=0.01)
    assert irls_weights(1.0, 0.3, cfg) == pytest.approx(0.15)
    assert irls_weights(-2.0, 0.3, cfg) == pytest.approx(0.175)
    assert irls_weights(0.0, 0.3, cfg) == pytest.approx(15.0)
    assert irls_weights(-0.005, 0.3, cfg) == pytest.approx(35.0)


def test_irls_weights_capped_are_continuous_and_positive():
    a = 0.01
    cfg = IRLSConfig(alpha=a)
    for tau in (0.1, 0.5, 0.9):
        r = np.array([-a - 1e-12, -a, a, a + 1e-12])
        w = irls_weights(r, tau, cfg)
        assert w[0] == pytest.approx(w[1], rel=1e-9)
        assert w[2] == pytest.approx(w[3], rel=1e-9)
    r = np.random.default_rng(0).standard_normal(1000)
    assert np.all(irls_weights(r, 0.37, cfg) > 0)


def test_irls_weights_verbatim_branch():
    cfg = IRLSConfig(alpha=0.1, weight_mode="paper_verbatim")
    np.testing.assert_allclose(irls_weights([0.05, -0.05, 0.0, 1.0], 0.3, cfg),
                               [0.3 * 0.05 / 0.1, 0.7 * -0.05 / 0.1, 0.0, 0.15])


@pytest.mark.parametrize("kw", [dict(alpha=0.0), dict(tol=0.0), dict(max_iter=0),
                                dict(weight_mode="x"), dict(init="x")])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        IRLSConfig(**kw)


def test_default_alpha_scales_with_iqr():
    y = np.arange(101.0)
    assert IRLSConfig().resolve_alpha(y) == pytest.approx(1e-4 * 50)


def test_median_of_five():
    fit = fit_penalized_quantile(np.linspace(0, 1, 5), [1, 2, 3, 4, 5], 0.5, build_basis(0, 1), 1, 0.0)
    assert fit.coef[0] == pytest.approx(3.0, abs=1e-8)
    assert fit.converged


@pytest.mark.parametrize("seed", range(10))
def test_bin_quantile_oracle(seed):
    rng = np.random.default_rng(seed)
    K = int(rng.integers(1, 6))
    n = int(rng.integers(K * 2, 51))
    x = np.concatenate([(np.arange(K) + 0.5) / K, rng.random(n - K)])
    y = np.round(rng.standard_normal(n), 1)  # rounding creates ties
    tau = float(rng.choice([0.1, 0.25, 0.5, 0.75, 0.9]))
    spec = build_basis(0, K)
    fit = fit_penalized_quantile(x, y, tau, spec, 1, 0.0)
    bins = spec.interval_index(x)
    for k in range(K):
        lo, hi = quantile_interval(y[bins == k], tau)
        assert lo - 1e-8 <= fit.coef[k] <= hi + 1e-8


@pytest.mark.parametrize("p,m,lam", [(3, 2, 0.1), (3, 2, 10.0), (2, 3, 1.0), (1, 1, 0.5),
                                     (3, 2, 0.0), (3, 2, 1e4)])
def test_matches_convex_solver(p, m, lam):
    rng = np.random.default_rng(p * 100 + m)
    x = rng.random(80)
    y = np.sin(2 * np.pi * x) + 0.2 * rng.standard_normal(80)
    spec = build_basis(p, 6)
    Z = DesignMatrix(spec, x)
    op = difference_matrix(m, spec.dim)
    for tau in (0.2, 0.5):
        fit = fit_penalized_quantile(x, y, tau, spec, m, lam)
        ref = penalized_objective(Z, y, cvx_fit(x, y, tau, spec, m, lam), tau, op, lam)
        assert fit.objective <= ref + 1e-6 * max(1.0, ref)
        assert fit.objective == pytest.approx(penalized_objective(Z, y, fit.coef, tau, op, lam))


def test_coordinate_first_order_condition():
    rng = np.random.default_rng(3)
    x = rng.random(120)
    y = np.cos(3 * x) + 0.1 * rng.standard_cauchy(120)
    spec = build_basis(3, 8)
    Z = DesignMatrix(spec, x)
    op = difference_matrix(2, spec.dim)
    fit = fit_penalized_quantile(x, y, 0.3, spec, op, 2.0)
    base = fit.objective
    for k in range(spec.dim):
        for step in (1e-4, -1e-4, 1e-2, -1e-2):
            b = fit.coef.copy()
            b[k] += step
            assert penalized_objective(Z, y, b, 0.3, op, 2.0) >= base - 1e-8


@pytest.mark.parametrize("tau", [0.1, 0.5, 0.9])
@pytest.mark.parametrize("lam", [0.0, 1e-3, 1.0, 1e3])
def test_noiseless_line_is_recovered(tau, lam):
    x = np.linspace(0, 1, 40)
    fit = fit_penalized_quantile(x, 2 * x + 1, tau, build_basis(3, 7), 2, lam)
    g = np.linspace(0, 1, 101)
    np.testing.assert_allclose(fit.predict(g), 2 * g + 1, atol=1e-8)


@pytest.mark.parametrize("m", [1, 2, 3])
@pytest.mark.parametrize("c", [-5.0, 3.7])
def test_shift_equivariance(m, c):
    rng = np.random.default_rng(m)
    x = rng.random(70)
    y = np.sin(2 * np.pi * x) + 0.1 * rng.standard_normal(70)
    spec = build_basis(3, 6)
    a = fit_penalized_quantile(x, y, 0.4, spec, m, 0.5)
    b = fit_penalized_quantile(x, y + c, 0.4, spec, m, 0.5)
    g = np.linspace(0, 1, 101)
    np.testing.assert_allclose(b.predict(g), a.predict(g) + c, atol=1e-8)


def test_penalty_order_cap():
    with pytest.raises(ValueError):
        fit_penalized_quantile([0.1, 0.5, 0.9], [1, 2, 3], 0.5, build_basis(1, 3), 3, 1.0)


def test_empty_bin_is_singular():
    x = np.array([0.1, 0.2, 0.3])
    with pytest.raises(SingularSystemError):
        fit_penalized_quantile(x, [1.0, 2.0, 3.0], 0.5, build_basis(0, 4), 1, 0.0)


def test_nonconvergence_is_flagged():
    rng = np.random.default_rng(0)
    x = rng.random(60)
    y = x + rng.standard_normal(60)
    cfg = IRLSConfig(max_iter=1, polish=False)
    with pytest.warns(ConvergenceWarning):
        fit = fit_penalized_quantile(x, y, 0.5, build_basis(3, 5), 2, 1.0, cfg)
    assert not fit.converged
    assert fit.iterations == 1


def test_irls_without_polish_is_close():
    rng = np.random.default_rng(11)
    x = rng.random(100)
    y = np.sin(2 * np.pi * x) + 0.1 * rng.standard_normal(100)
    spec = build_basis(3, 8)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        plain = fit_penalized_quantile(x, y, 0.5, spec, 2, 1.0, IRLSConfig(polish=False))
    exact = fit_penalized_quantile(x, y, 0.5, spec, 2, 1.0)
    assert exact.objective <= plain.objective + 1e-12
    assert plain.objective - exact.objective < 1e-3 * exact.objective
    assert np.all(plain.final_weights > 0)


def test_warm_start_and_given_init():
    rng = np.random.default_rng(5)
    x = rng.random(50)
    y = x ** 2 + 0.05 * rng.standard_normal(50)
    spec = build_basis(2, 5)
    a = fit_penalized_quantile(x, y, 0.5, spec, 2, 0.3)
    b = fit_penalized_quantile(x, y, 0.5, spec, 2, 0.3, IRLSConfig(init="given"),
                               init_coef=np.zeros(spec.dim))
    assert b.objective == pytest.approx(a.objective, rel=1e-9)
    with pytest.raises(ValueError):
        fit_penalized_quantile(x, y, 0.5, spec, 2, 0.3, IRLSConfig(init="given"))


def test_quantile_curves_bracket_median():
    rng = np.random.default_rng(8)
    x = rng.random(400)
    y = np.sin(2 * np.pi * x) + 0.2 * rng.standard_normal(400)
    spec = build_basis(3, 8)
    g = np.linspace(0, 1, 201)
    lo, mid, hi = (fit_penalized_quantile(x, y, t, spec, 2, 1.0).predict(g) for t in (0.25, 0.5, 0.75))
    assert np.mean((lo <= mid) & (mid <= hi)) >= 0.95


def test_penalized_mean_reductions():
    rng = np.random.default_rng(2)
    x = rng.random(60)
    y = np.exp(x) + 0.1 * rng.standard_normal(60)
    spec = build_basis(3, 5)
    Z = eval_basis(spec, x)
    ols = np.linalg.lstsq(Z, y, rcond=None)[0]
    np.testing.assert_allclose(fit_penalized_mean(x, y, spec, 2, 0.0), ols, rtol=1e-9)
    g = np.linspace(0, 1, 11)
    line = fit_penalized_mean(x, 3 * x - 1, spec, 2, 50.0)
    np.testing.assert_allclose(eval_basis(spec, g) @ line, 3 * g - 1, atol=1e-10)
    stiff = fit_penalized_mean(x, y, spec, 2, 1e12)
    slope, icpt = np.polyfit(x, y, 1)
    np.testing.assert_allclose(eval_basis(spec, g) @ stiff, icpt + slope * g, atol=1e-5)


def test_local_linear_constant_data():
    x = np.linspace(0, 1, 30)
    for x0 in (0.0, 0.4, 1.0):
        for h in (0.05, 0.5):
            assert fit_local_linear_quantile(x, np.full(30, 2.5), 0.3, x0, h) == pytest.approx(2.5)


def linprog_linear_quantile(x, y, tau):
    n = len(x)
    X = np.column_stack([np.ones(n), x])
    # variables: beta (free, 2), u+ (n), u- (n)
    c = np.concatenate([np.zeros(2), tau * np.ones(n), (1 - tau) * np.ones(n)])
    A = np.hstack([X, np.eye(n), -np.eye(n)])
    bounds = [(None, None)] * 2 + [(0, None)] * (2 * n)
    res = linprog(c, A_eq=A, b_eq=y, bounds=bounds, method="highs")
    return res.x[:2], res.fun


def test_global_linear_fit_and_wide_bandwidth():
    rng = np.random.default_rng(4)
    x = rng.random(80)
    y = 1 + 2 * x + 0.3 * rng.standard_normal(80)
    beta, best = linprog_linear_quantile(x, y, 0.3)
    a, b = fit_linear_quantile(x, y, 0.3)
    obj = np.sum(check_loss(y - a - b * x, 0.3))
    assert obj <= best * (1 + 1e-4)
    wide = fit_local_linear_quantile(x, y, 0.3, np.array([0.2, 0.7]), 1e6)
    np.testing.assert_allclose(wide, a + b * np.array([0.2, 0.7]), atol=1e-3)


def test_local_linear_tracks_median():
    rng = np.random.default_rng(2000)
    x = rng.random(2000)
    y = np.sin(2 * np.pi * x) + 0.1 * rng.standard_normal(2000)
    assert abs(fit_local_linear_quantile(x, y, 0.5, 0.25, 0.05) - 1.0) < 0.05


def test_local_linear_rejects():
    with pytest.raises(ValueError):
        fit_local_linear_quantile([0.1, 0.2], [1.0, 2.0], 0.5, 0.5, 0.0)
    with pytest.raises(ValueError):
        fit_local_linear_quantile([0.0], [1.0], 0.5, 0.5, 0.1)


def test_near_duplicate_design_points():
    # two observations 1e-11 apart with different responses cannot both be interpolated
    rng = np.random.default_rng(11)
    x = rng.random(120)
    x[1] = x[0] + 1e-11
    y = np.sin(2 * np.pi * x) + 0.1 * rng.standard_normal(120)
    y[1] = y[0] + 0.3
    spec = build_basis(3, 10)
    Z = DesignMatrix(spec, x)
    op = difference_matrix(2, spec.dim)
    for lam in (0.01, 1.0):
        fit = fit_penalized_quantile(x, y, 0.5, spec, 2, lam)
        assert fit.converged
        ref = penalized_objective(Z, y, cvx_fit(x, y, 0.5, spec, 2, lam), 0.5, op, lam)
        assert fit.objective <= ref + 1e-6 * ref


def weighted_linear_quantile(u, y, w, tau):
    """min sum w_i rho_tau(y_i - a - b u_i) as a linear program."""
    n = y.size
    A = np.column_stack([np.ones(n), u])
    c = np.concatenate([[0, 0], tau * w, (1 - tau) * w])
    res = linprog(c, A_eq=np.hstack([A, np.eye(n), -np.eye(n)]), b_eq=y,
                  bounds=[(None, None)] * 2 + [(0, None)] * 2 * n, method="highs")
    return res.fun


@pytest.mark.parametrize("tau,x0,h", [(0.5, 0.3, 0.05), (0.2, 0.0, 0.1), (0.8, 0.9, 0.2)])
def test_local_linear_is_exact_minimizer(tau, x0, h):
    rng = np.random.default_rng(int(100 * x0))
    x = rng.random(300)
    y = np.sin(2 * np.pi * x) + 0.1 * rng.standard_normal(300)
    w = np.exp(-0.5 * ((x - x0) / h) ** 2) / np.sqrt(2 * np.pi)
    a = fit_local_linear_quantile(x, y, tau, x0, h)
    best = weighted_linear_quantile(x - x0, y, w, tau)
    # the slope is not returned; minimize over it for the reported intercept
    slopes = np.linspace(-15, 15, 30001)
    obj = [np.sum(w * check_loss(y - a - s * (x - x0), tau)) for s in slopes]
    assert min(obj) <= best * (1 + 1e-4)
