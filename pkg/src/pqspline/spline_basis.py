"""Equidistant B-spline bases on [0, 1].

The basis of degree ``p`` with ``K`` interior intervals has ``K + p`` functions
built on the extended knot vector ``k / K`` for ``k = -p, ..., K + p``.
Degree-0 pieces are right-closed intervals ``(k_{j-1}, k_j]`` with the first
interval also closed on the left, so every point of ``[0, 1]`` is covered.
"""

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np

MAX_DEGREE = 10


@dataclass(frozen=True)
class BasisSpec:
    """Degree and interior interval count of an equidistant B-spline space."""

    degree: int
    interior_count: int

    @property
    def dim(self):
        return self.interior_count + self.degree

    @property
    def knots(self):
        """Extended knot vector, ``K + 2p + 1`` points with spacing ``1/K``."""
        return _knots(self.degree, self.interior_count)

    def interval_index(self, x):
        """Index ``j`` (0-based over ``[0, 1]``) of the interval containing each ``x``.

        Interval ``j`` is ``(j/K, (j+1)/K]``; ``x = 0`` maps to interval 0.
        """
        x = np.asarray(x, dtype=float)
        inner = self.knots[self.degree:self.degree + self.interior_count + 1]
        j = np.searchsorted(inner, x, side="left") - 1
        return np.clip(j, 0, self.interior_count - 1)


@lru_cache(maxsize=256)
def _knots(p, K):
    k = np.arange(-p, K + p + 1)
    knots = k / K
    knots.setflags(write=False)
    return knots


def build_basis(p, K):
    """Return the :class:`BasisSpec` for degree ``p`` and ``K`` interior intervals."""
    if int(p) != p or int(K) != K:
        raise ValueError("degree and interior count must be integers")
    p, K = int(p), int(K)
    if p < 0:
        raise ValueError(f"degree must be >= 0, got {p}")
    if p > MAX_DEGREE:
        raise ValueError(f"degree must be <= {MAX_DEGREE}, got {p}")
    if K < 1:
        raise ValueError(f"interior count must be >= 1, got {K}")
    return BasisSpec(p, K)


def _check_domain(x):
    x = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(x)) or np.any(x < 0.0) or np.any(x > 1.0):
        raise ValueError("evaluation points must lie in [0, 1]")
    return x


def _local_basis(spec, x):
    """Nonzero basis values at each point.

    Returns ``(start, values)`` where ``values[i, s]`` is basis function
    ``start[i] + s`` evaluated at ``x[i]``; ``values`` has ``p + 1`` columns.
    """
    p = spec.degree
    t = spec.knots
    j = spec.interval_index(x) + p  # position in the full knot vector
    n = x.shape[0]
    N = np.zeros((n, p + 1))
    N[:, 0] = 1.0
    left = np.empty((n, p + 1))
    right = np.empty((n, p + 1))
    for r in range(1, p + 1):
        left[:, r] = x - t[j + 1 - r]
        right[:, r] = t[j + r] - x
        saved = np.zeros(n)
        for s in range(r):
            temp = N[:, s] / (right[:, s + 1] + left[:, r - s])
            N[:, s] = saved + right[:, s + 1] * temp
            saved = left[:, r - s] * temp
        N[:, r] = saved
    return j - p, N


class DesignMatrix:
    """Sparse row representation of ``Z[i, j] = B_j(x_i)``.

    Each row stores its ``p + 1`` potentially nonzero entries, which keeps
    products and weighted Gram matrices at ``O(n p^2)``.
    """

    def __init__(self, spec, x):
        x = _check_domain(np.atleast_1d(x))
        self.spec = spec
        self.x = x
        self.start, self.values = _local_basis(spec, x)

    @property
    def shape(self):
        return (self.x.shape[0], self.spec.dim)

    def toarray(self):
        n, d = self.shape
        out = np.zeros((n, d))
        rows = np.arange(n)
        for s in range(self.spec.degree + 1):
            out[rows, self.start + s] += self.values[:, s]
        return out

    def dot(self, coef):
        coef = np.asarray(coef, dtype=float)
        if coef.shape[0] != self.spec.dim:
            raise ValueError(f"expected {self.spec.dim} coefficients, got {coef.shape[0]}")
        out = np.zeros(self.x.shape[0])
        for s in range(self.spec.degree + 1):
            out += self.values[:, s] * coef[self.start + s]
        return out

    def rdot(self, v):
        """``Z^T v``."""
        v = np.asarray(v, dtype=float)
        d = self.spec.dim
        out = np.zeros(d)
        for s in range(self.spec.degree + 1):
            out += np.bincount(self.start + s, weights=self.values[:, s] * v, minlength=d)
        return out

    def gram(self, weights=None):
        """Dense ``Z^T diag(weights) Z``."""
        d = self.spec.dim
        w = np.ones(self.x.shape[0]) if weights is None else np.asarray(weights, dtype=float)
        out = np.zeros(d * d)
        q = self.spec.degree + 1
        for a in range(q):
            wa = w * self.values[:, a]
            for b in range(q):
                idx = (self.start + a) * d + self.start + b
                out += np.bincount(idx, weights=wa * self.values[:, b], minlength=d * d)
        return out.reshape(d, d)


def design_matrix(spec, x):
    return DesignMatrix(spec, x)


def eval_basis(spec, x):
    """All ``K + p`` basis functions at ``x``.

    A scalar ``x`` gives a vector; an array gives a dense ``(len(x), K + p)``
    matrix.
    """
    scalar = np.ndim(x) == 0
    Z = DesignMatrix(spec, x).toarray()
    return Z[0] if scalar else Z


def spline_value(spec, coef, x, deriv_order=0):
    """Evaluate ``sum_k coef_k B_k(x)`` or its derivative of order ``deriv_order``.

    Derivatives use ``s^(m)(x) = K^m B^[p-m](x)^T D_m coef`` with the
    degree ``p - m`` basis on the same knots.
    """
    coef = np.asarray(coef, dtype=float)
    if coef.ndim != 1 or coef.shape[0] != spec.dim:
        raise ValueError(f"expected {spec.dim} coefficients, got shape {coef.shape}")
    m = int(deriv_order)
    if m < 0 or m > spec.degree:
        raise ValueError(f"derivative order must be in [0, {spec.degree}], got {deriv_order}")
    scalar = np.ndim(x) == 0
    if m == 0:
        out = DesignMatrix(spec, x).dot(coef)
    else:
        low = BasisSpec(spec.degree - m, spec.interior_count)
        diffs = np.diff(coef, n=m)
        out = spec.interior_count ** m * DesignMatrix(low, x).dot(diffs)
    return float(out[0]) if scalar else out


@lru_cache(maxsize=None)
def _bernoulli_coefficients(n):
    """Exact monomial coefficients (constant term first) of ``Br_n``."""
    coefs = [Fraction(1)]
    for k in range(1, n + 1):
        # Br_k' = k Br_{k-1}; constant fixed by a zero integral over [0, 1]
        integ = [Fraction(0)] + [k * c / (i + 1) for i, c in enumerate(coefs)]
        integ[0] = -sum(c / (i + 1) for i, c in enumerate(integ))
        coefs = integ
    return tuple(coefs)


def bernoulli_numbers(n):
    """``Br_k(0)`` for ``k = 0..n`` as exact fractions (``B_1 = -1/2`` convention)."""
    return [_bernoulli_coefficients(k)[0] for k in range(n + 1)]


def bernoulli_poly(degree, x):
    """Bernoulli polynomial ``Br_degree`` evaluated at ``x``."""
    if int(degree) != degree or degree < 0:
        raise ValueError(f"degree must be a nonnegative integer, got {degree}")
    coefs = [float(c) for c in _bernoulli_coefficients(int(degree))]
    return np.polynomial.polynomial.polyval(x, coefs)

