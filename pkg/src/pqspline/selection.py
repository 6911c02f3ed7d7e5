"""Smoothing parameter selection: GACV for quantile fits, GCV for mean fits."""

import warnings
from dataclasses import dataclass, field

import numpy as np

from ._linalg import SingularSystemError, stacked_hat_trace
from .penalty import difference_matrix
from .solver import (
    ConvergenceWarning, IRLSConfig, _as_data, _check_tau, _local_linear_irls, _penalty_for,
    check_loss, fit_penalized_mean, fit_penalized_quantile,
)
from .spline_basis import DesignMatrix, build_basis

DEFAULT_K_VALUES = (5, 10, 20, 40)
DEFAULT_LAMBDA_VALUES = tuple(np.logspace(-6, 3, 30))


class InvalidConfiguration(ValueError):
    """Effective degrees of freedom reach the sample size."""


@dataclass
class SelectionGrid:
    """Criterion values over a ``(K, lambda)`` grid.

    ``scores[i, j]`` belongs to ``K_values[i]`` and ``lambda_values[j]``;
    excluded cells hold ``nan`` and their reason is kept in ``failures``.
    """

    K_values: tuple
    lambda_values: tuple
    scores: np.ndarray
    df: np.ndarray
    best: tuple
    best_fit: object = None
    failures: dict = field(default_factory=dict)


def effective_df(fit, Z, penalty, lam):
    """Trace of the weighted hat operator at the converged fit.

    ``tr[Z (Z^T W Z + (lam/2) D^T D)^(-1) Z^T W]`` with ``W`` the final IRLS
    weights; the ``lam/2`` matches the ridge used by the iteration.
    """
    op = _penalty_for(fit.spec, penalty)
    top = np.sqrt(fit.final_weights)[:, None] * Z.toarray()
    bottom = np.sqrt(0.5 * lam) * op.matrix if lam > 0 else None
    return stacked_hat_trace(top, bottom)


def _gacv(fit, Z, y, op, lam):
    n = y.shape[0]
    df = effective_df(fit, Z, op, lam)
    if df >= n - 1e-9:
        raise InvalidConfiguration(f"effective df {df:.3f} >= n = {n}")
    loss = float(np.sum(check_loss(y - Z.dot(fit.coef), fit.tau)))
    return loss / (n - df), df


def gacv_score(x, y, tau, spec, penalty=2, lam=0.0, cfg=None):
    """``sum rho_tau(residual) / (n - df)`` for the penalized quantile fit."""
    x, y = _as_data(x, y)
    op = _penalty_for(spec, penalty)
    Z = DesignMatrix(spec, x)
    fit = fit_penalized_quantile(x, y, tau, spec, op, lam, cfg, design=Z)
    return _gacv(fit, Z, y, op, lam)[0]


def default_k_values(n):
    """Entries of :data:`DEFAULT_K_VALUES` with ``K <= sqrt(n)``.

    Knot counts must grow slower than ``sqrt(n)``; near-interpolating cells
    otherwise win GACV on small samples. The smallest entry is always kept.
    """
    keep = tuple(k for k in DEFAULT_K_VALUES if k * k <= n)
    return keep or DEFAULT_K_VALUES[:1]


def select_model(x, y, tau, K_values=None, lambda_values=DEFAULT_LAMBDA_VALUES,
                 degree=3, penalty_order=2, cfg=None):
    """Fit every ``(K, lambda)`` cell and return the GACV minimizer.

    ``K_values=None`` uses :func:`default_k_values`. Cells whose fit fails or
    whose df reaches ``n`` are excluded. Ties go to the smaller ``K``, then
    the smaller ``lambda``. Within a ``K`` column the fits are warm-started
    from the previous ``lambda``.
    """
    _check_tau(tau)
    x, y = _as_data(x, y)
    if K_values is None:
        K_values = default_k_values(y.shape[0])
    K_values = tuple(int(k) for k in K_values)
    lambda_values = tuple(float(v) for v in lambda_values)
    if not K_values or not lambda_values:
        raise ValueError("selection grids must be nonempty")
    scores = np.full((len(K_values), len(lambda_values)), np.nan)
    dfs = np.full_like(scores, np.nan)
    failures = {}
    fits = {}
    lam_order = np.argsort(lambda_values, kind="stable")
    for i, K in enumerate(K_values):
        spec = build_basis(degree, K)
        try:
            op = difference_matrix(penalty_order, spec.dim)
            op = _penalty_for(spec, op)
        except ValueError as err:
            for j in range(len(lambda_values)):
                failures[(K, lambda_values[j])] = str(err)
            continue
        Z = DesignMatrix(spec, x)
        warm = None
        for j in lam_order:
            lam = lambda_values[j]
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", ConvergenceWarning)
                    fit = fit_penalized_quantile(x, y, tau, spec, op, lam, cfg, init_coef=warm,
                                                 design=Z)
                scores[i, j], dfs[i, j] = _gacv(fit, Z, y, op, lam)
                fits[i, j] = fit
                warm = fit.coef
            except (InvalidConfiguration, SingularSystemError, ValueError) as err:
                failures[(K, lam)] = f"{type(err).__name__}: {err}"
    if not np.any(np.isfinite(scores)):
        raise InvalidConfiguration("no admissible cell in the selection grid")
    best = _argmin_tiebreak(scores, K_values, lambda_values, 1e-12 * np.mean(np.abs(y - np.mean(y))))
    return SelectionGrid(K_values, lambda_values, scores, dfs,
                         (K_values[best[0]], lambda_values[best[1]]), fits[best], failures)


def _argmin_tiebreak(scores, K_values, lambda_values, atol=0.0):
    """Index of the minimal score; scores within ``atol`` of it count as ties."""
    finite = np.isfinite(scores)
    low = np.min(scores[finite])
    tied = finite & (scores <= low + atol)
    cells = [(K_values[i], lambda_values[j], i, j) for i, j in zip(*np.nonzero(tied))]
    cells.sort()
    return cells[0][2], cells[0][3]


def mean_df(Z, op, mu):
    """Trace of the hat matrix of the penalized mean fit."""
    return stacked_hat_trace(Z.toarray(), np.sqrt(mu) * op.matrix if mu > 0 else None)


def gcv_score(x, y, spec, penalty=2, mu=0.0):
    """``n RSS / (n - df)^2`` for the penalized mean fit."""
    x, y = _as_data(x, y)
    op = _penalty_for(spec, penalty)
    Z = DesignMatrix(spec, x)
    n = y.shape[0]
    df = mean_df(Z, op, mu)
    if df >= n - 1e-9:
        raise InvalidConfiguration(f"effective df {df:.3f} >= n = {n}")
    coef = fit_penalized_mean(x, y, spec, op, mu, design=Z)
    rss = float(np.sum((y - Z.dot(coef)) ** 2))
    return n * rss / (n - df) ** 2


def select_mu(x, y, spec, penalty=2, mu_values=None):
    """GCV-optimal ``mu`` over a grid; returns ``(mu, scores)``."""
    mu_values = np.logspace(-6, 4, 41) if mu_values is None else np.asarray(mu_values, float)
    scores = np.full(mu_values.shape, np.nan)
    for j, mu in enumerate(mu_values):
        try:
            scores[j] = gcv_score(x, y, spec, penalty, mu)
        except (InvalidConfiguration, SingularSystemError):
            pass
    if not np.any(np.isfinite(scores)):
        raise InvalidConfiguration("no admissible smoothing parameter")
    return float(mu_values[np.nanargmin(scores)]), scores


def local_linear_gacv(x, y, tau, h, cfg=None):
    """GACV for the local linear quantile fit; returns ``(score, df)``.

    ``df`` sums the leverage of each observation on its own fitted value.
    """
    cfg = IRLSConfig() if cfg is None else cfg
    x, y = _as_data(x, y)
    n = y.shape[0]
    a, _, V, _ = _local_linear_irls(x, y, tau, x, h, cfg, cfg.resolve_alpha(y))
    U = x[None, :] - x[:, None]
    s0 = V.sum(1)
    s1 = (V * U).sum(1)
    s2 = (V * U * U).sum(1)
    det = s0 * s2 - s1 * s1
    # first row of (X^T V X)^(-1) applied to the own-point row (1, 0)
    lev = np.diagonal(V) * s2 / det
    df = float(np.sum(lev))
    if df >= n - 1e-9:
        raise InvalidConfiguration(f"effective df {df:.3f} >= n = {n}")
    loss = float(np.sum(check_loss(y - a, tau)))
    return loss / (n - df), df


def select_bandwidth(x, y, tau, h_values=None, cfg=None):
    """GACV-optimal bandwidth for the local linear fit; returns ``(h, scores)``."""
    h_values = np.geomspace(0.01, 0.3, 12) if h_values is None else np.asarray(h_values, float)
    scores = np.full(h_values.shape, np.nan)
    for j, h in enumerate(h_values):
        try:
            scores[j] = local_linear_gacv(x, y, tau, h, cfg)[0]
        except ValueError:
            pass
    if not np.any(np.isfinite(scores)):
        raise InvalidConfiguration("no admissible bandwidth")
    return float(h_values[np.nanargmin(scores)]), scores
