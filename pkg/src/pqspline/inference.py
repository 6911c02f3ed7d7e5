"""Plug-in asymptotic inference for penalized spline quantile fits.

The pieces are a Gaussian-kernel conditional density, the sandwich
variance, the shrinkage and approximation bias estimates, and the pointwise
normal band built from them. Points where a plug-in cannot be evaluated are
carried as ``nan`` so downstream output shows a gap instead of a made-up
number.
"""

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from ._bandwidth import sj_bandwidth
from ._linalg import SingularSystemError, solve_spd
from .solver import _as_data, _check_tau, _penalty_for, fit_penalized_quantile
from .spline_basis import DesignMatrix, _check_domain, bernoulli_poly, build_basis, spline_value

DENSITY_FLOOR = 1e-3
REPORT_COLUMNS = ("x", "eta_hat", "b_a_hat", "b_lambda_hat", "phi_hat", "lower", "upper")

_SQRT_2PI = math.sqrt(2.0 * math.pi)


class ConditionalDensity:
    """Kernel estimate of the conditional density ``f(y | x)``.

    ``f(y|x) = sum_i K_hx(x_i - x) K_hy(y_i - y) / sum_i K_hx(x_i - x)`` with
    Gaussian kernels. Bandwidths default to the Sheather-Jones value of the
    ``x`` sample and of ``residuals`` (or of ``y`` when no residuals are
    supplied).

    Parameters
    ----------
    x, y : array_like
        Observations.
    residuals : array_like, optional
        Residuals of a preliminary fit, used to pick ``y_bandwidth``.
    center : callable, optional
        Location curve ``c``. When given, the ``y`` kernel acts on
        ``(y_i - c(x_i)) - (y - c(x))`` so the local trend of ``c`` inside the
        ``x`` window does not smear the estimate.
    x_bandwidth, y_bandwidth : float, optional
        Override the plug-in bandwidths.
    """

    def __init__(self, x, y, residuals=None, x_bandwidth=None, y_bandwidth=None, center=None):
        x = np.asarray(x, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        if x.shape != y.shape:
            raise ValueError("x and y must have the same length")
        self.x = x
        self.center = center
        self.y = y if center is None else y - np.asarray(center(x), dtype=float)
        if x_bandwidth is None:
            x_bandwidth = sj_bandwidth(x)
        if y_bandwidth is None:
            y_bandwidth = sj_bandwidth(y if residuals is None else residuals)
        if not (x_bandwidth > 0 and y_bandwidth > 0):
            raise ValueError("bandwidths must be positive")
        self.x_bandwidth = float(x_bandwidth)
        self.y_bandwidth = float(y_bandwidth)

    def __call__(self, x, y):
        """Evaluate at paired points; ``nan`` where the ``x`` weights vanish."""
        scalar = np.ndim(x) == 0 and np.ndim(y) == 0
        x, y = np.broadcast_arrays(np.atleast_1d(np.asarray(x, float)),
                                   np.atleast_1d(np.asarray(y, float)))
        if self.center is not None:
            y = y - np.asarray(self.center(x), dtype=float)
        out = np.empty(x.shape)
        # chunk to bound the n-by-m kernel matrices
        step = max(1, 2_000_000 // max(self.x.shape[0], 1))
        for s in range(0, x.shape[0], step):
            xs, ys = x[s:s + step], y[s:s + step]
            kx = np.exp(-0.5 * ((self.x[None, :] - xs[:, None]) / self.x_bandwidth) ** 2)
            ky = np.exp(-0.5 * ((self.y[None, :] - ys[:, None]) / self.y_bandwidth) ** 2)
            den = kx.sum(axis=1)
            num = (kx * ky).sum(axis=1) / (self.y_bandwidth * _SQRT_2PI)
            with np.errstate(invalid="ignore", divide="ignore"):
                out[s:s + step] = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)
        return float(out[0]) if scalar else out


def conditional_density(x_data, y_data, x, y, residuals=None):
    """One-shot :class:`ConditionalDensity` evaluation at ``(x, y)``."""
    return ConditionalDensity(x_data, y_data, residuals)(x, y)


def density_at_fit(fit, x, y, density=None):
    """``f(eta_hat(x_i) | x_i)`` for every observation, floored.

    The default estimate is centred on the fit, so it measures the residual
    density at zero near each ``x_i``. The floor is ``DENSITY_FLOOR`` times
    the median so the sandwich stays invertible where the kernel estimate
    nearly vanishes.
    """
    x, y = _as_data(x, y)
    eta = fit.predict(x)
    if density is None:
        density = ConditionalDensity(x, y, residuals=y - eta, center=fit.predict)
    r = density(x, eta)
    if not np.all(np.isfinite(r)):
        raise ValueError("conditional density is not evaluable at every observation")
    med = np.median(r)
    return np.maximum(r, DENSITY_FLOOR * med) if med > 0 else np.maximum(r, DENSITY_FLOOR)


def _sandwich_parts(fit, Z, penalty, lam, r_diag):
    op = _penalty_for(fit.spec, penalty)
    A = Z.gram(r_diag)
    if lam > 0:
        A = A + lam * op.gram
    return op, A, max(fit.spec.degree, op.order)


def variance_estimate(fit, Z, penalty, lam, r_diag, x):
    """Sandwich variance ``Phi_hat(x)`` of the fitted value.

    ``tau (1 - tau) B(x)^T H^-1 Z^T Z H^-1 B(x)`` with
    ``H = Z^T R Z + lam D^T D`` and ``R = diag(r_diag)``.

    Parameters
    ----------
    fit : QuantileFit
    Z : DesignMatrix
        Design at the observations used for ``fit``.
    penalty : int or PenaltyOperator
    lam : float
        Smoothing parameter of ``fit``.
    r_diag : ndarray
        Conditional density at each fitted value, see :func:`density_at_fit`.
    x : float or array_like
        Evaluation points in ``[0, 1]``.
    """
    op, H, band = _sandwich_parts(fit, Z, penalty, lam, r_diag)
    scalar = np.ndim(x) == 0
    Bx = DesignMatrix(fit.spec, x).toarray()
    V = solve_spd(H, Bx.T, band)
    G = Z.gram()
    phi = fit.tau * (1.0 - fit.tau) * np.einsum("ij,ij->j", V, G @ V)
    phi = np.maximum(phi, 0.0)
    return float(phi[0]) if scalar else phi


def shrinkage_bias_estimate(fit, Z, penalty, lam, r_diag, x):
    """``-lam B(x)^T (Z^T R Z + lam D^T D)^-1 D^T D b_hat``."""
    scalar = np.ndim(x) == 0
    if lam == 0:
        out = np.zeros(np.atleast_1d(x).shape[0])
        _check_domain(np.atleast_1d(x))
    else:
        op, H, band = _sandwich_parts(fit, Z, penalty, lam, r_diag)
        v = solve_spd(H, op.gram @ fit.coef, band)
        out = -lam * DesignMatrix(fit.spec, x).dot(v)
    return float(out[0]) if scalar else out


def approx_bias_from_derivative(deriv, degree, K, x):
    """Approximation bias given the ``(p + 1)``-th derivative at ``x``.

    ``-deriv / (K^(p+1) (p+1)!) Br_{p+1}(K (x - kappa))`` with ``kappa`` the
    left end of the knot interval holding ``x``; ``x = 1`` uses the last
    interval.
    """
    x = _check_domain(x)
    q = degree + 1
    j = np.minimum(np.floor(x * K), K - 1)
    frac = x * K - j
    return -np.asarray(deriv) / (K ** q * math.factorial(q)) * bernoulli_poly(q, frac)


def pilot_fit(x, y, tau, spec, penalty_order, lam, cfg=None):
    """Degree ``p + 2`` fit on the same knots and smoothing parameter."""
    pilot_spec = build_basis(spec.degree + 2, spec.interior_count)
    return fit_penalized_quantile(x, y, tau, pilot_spec, penalty_order, lam, cfg)


def approx_bias_estimate(x, y, tau, spec, at, pilot_lambda, penalty_order=2, cfg=None, pilot=None):
    """Plug-in approximation bias at ``at`` using a degree ``p + 2`` pilot.

    The pilot's ``(p + 1)``-th derivative stands in for the unknown
    derivative of the quantile curve. A precomputed ``pilot`` fit may be
    passed to skip refitting.
    """
    scalar = np.ndim(at) == 0
    pts = _check_domain(np.atleast_1d(np.asarray(at, dtype=float)))
    if pilot is None:
        pilot = pilot_fit(x, y, tau, spec, penalty_order, pilot_lambda, cfg)
    deriv = spline_value(pilot.spec, pilot.coef, pts, spec.degree + 1)
    out = approx_bias_from_derivative(deriv, spec.degree, spec.interior_count, pts)
    return float(out[0]) if scalar else out


def normal_quantile(alpha_level):
    """Two-sided multiplier ``z_{1 - alpha/2}``."""
    if not 0.0 < alpha_level < 1.0:
        raise ValueError(f"alpha level must lie in (0, 1), got {alpha_level}")
    return float(norm.ppf(1.0 - alpha_level / 2.0))


PRINTED_MULTIPLIERS = {0.05: 1.96}


def band_multiplier(alpha_level):
    """Half-width multiplier of the two-sided band.

    The conventional printed value 1.96 at ``alpha_level = 0.05``, the exact
    normal quantile ``z_{1 - alpha/2}`` at any other level.
    """
    z = normal_quantile(alpha_level)
    return PRINTED_MULTIPLIERS.get(float(alpha_level), z)


@dataclass(eq=False)
class InferenceReport:
    """Pointwise plug-ins and bands on an evaluation grid.

    ``lower``/``upper`` are the bias-corrected band; ``lower_raw``/``upper_raw``
    are centred on ``eta_hat`` with the same half-width.
    """

    grid: np.ndarray
    eta_hat: np.ndarray
    b_a_hat: np.ndarray
    b_lambda_hat: np.ndarray
    phi_hat: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    lower_raw: np.ndarray
    upper_raw: np.ndarray
    alpha_level: float
    multiplier: float

    @property
    def half_width(self):
        return self.multiplier * np.sqrt(self.phi_hat)

    def rows(self, uncorrected=False):
        cols = [self.grid, self.eta_hat, self.b_a_hat, self.b_lambda_hat, self.phi_hat,
                self.lower, self.upper]
        if uncorrected:
            cols += [self.lower_raw, self.upper_raw]
        return np.column_stack(cols)

    def to_csv(self, uncorrected=False):
        """CSV text; ``nan`` entries become empty fields."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = list(REPORT_COLUMNS)
        if uncorrected:
            header += ["lower_uncorrected", "upper_uncorrected"]
        w.writerow(header)
        for row in self.rows(uncorrected):
            w.writerow(["" if not np.isfinite(v) else repr(float(v)) for v in row])
        return buf.getvalue()


def confidence_band(grid, eta_hat, b_a_hat, b_lambda_hat, phi_hat, alpha_level=0.05):
    """Assemble corrected and uncorrected pointwise normal bands.

    Both bands have half-width ``band_multiplier(alpha) sqrt(phi_hat)``; the corrected
    one is centred at ``eta_hat - b_a_hat - b_lambda_hat``. Non-finite inputs
    propagate as ``nan``.
    """
    z = band_multiplier(alpha_level)
    grid, eta_hat, b_a_hat, b_lambda_hat, phi_hat = (
        np.asarray(v, dtype=float) for v in (grid, eta_hat, b_a_hat, b_lambda_hat, phi_hat))
    with np.errstate(invalid="ignore"):
        half = z * np.sqrt(np.where(phi_hat >= 0, phi_hat, np.nan))
    centre = eta_hat - b_a_hat - b_lambda_hat
    return InferenceReport(grid, eta_hat, b_a_hat, b_lambda_hat, phi_hat,
                           centre - half, centre + half, eta_hat - half, eta_hat + half,
                           float(alpha_level), z)


def band_for_fit(x, y, fit, grid, alpha_level=0.05, pilot_lambda=None, cfg=None, density=None):
    """Full plug-in pipeline for a fitted curve.

    Builds the conditional density from the fit's residuals, then the
    variance, both bias estimates and the band on ``grid``. A failing pilot
    fit leaves ``b_a_hat`` as ``nan`` rather than aborting.
    """
    _check_tau(fit.tau)
    x, y = _as_data(x, y)
    grid = _check_domain(np.atleast_1d(np.asarray(grid, dtype=float)))
    Z = DesignMatrix(fit.spec, x)
    r = density_at_fit(fit, x, y, density)
    lam = fit.lam
    eta = fit.predict(grid)
    phi = variance_estimate(fit, Z, fit.penalty_order, lam, r, grid)
    b_lam = shrinkage_bias_estimate(fit, Z, fit.penalty_order, lam, r, grid)
    pilot_lambda = lam if pilot_lambda is None else pilot_lambda
    try:
        b_a = approx_bias_estimate(x, y, fit.tau, fit.spec, grid, pilot_lambda,
                                   fit.penalty_order, cfg)
    except (SingularSystemError, ValueError):
        b_a = np.full(grid.shape, np.nan)
    return confidence_band(grid, eta, b_a, b_lam, phi, alpha_level)


__all__ = [
    "ConditionalDensity", "DENSITY_FLOOR", "InferenceReport", "REPORT_COLUMNS",
    "approx_bias_estimate", "approx_bias_from_derivative", "band_for_fit", "band_multiplier",
    "conditional_density", "confidence_band", "density_at_fit", "normal_quantile",
    "pilot_fit", "shrinkage_bias_estimate", "sj_bandwidth", "variance_estimate",
]
