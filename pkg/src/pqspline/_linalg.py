"""Banded symmetric positive-definite solves."""

import numpy as np
from scipy.linalg import LinAlgError, cho_solve_banded, cholesky_banded

# squared-pivot to diagonal ratio below which a factorization is treated as singular
_PIVOT_RTOL = 1e-13


class SingularSystemError(LinAlgError):
    """A penalized normal matrix is numerically rank deficient."""


def to_upper_banded(A, u):
    """Pack the upper ``u`` bands of symmetric ``A`` in LAPACK order."""
    d = A.shape[0]
    ab = np.zeros((u + 1, d))
    for k in range(u + 1):
        ab[u - k, k:] = np.diagonal(A, offset=k)
    return ab


def solve_spd(A, rhs, bandwidth=None):
    """Solve ``A x = rhs`` for symmetric positive-definite ``A``.

    Uses a banded Cholesky factorization with ``bandwidth`` superdiagonals
    (dense when omitted). Raises :class:`SingularSystemError` when ``A`` is
    not numerically positive definite.
    """
    d = A.shape[0]
    u = d - 1 if bandwidth is None else min(int(bandwidth), d - 1)
    diag = np.diagonal(A)
    scale = np.max(np.abs(diag)) if d else 0.0
    if not np.isfinite(scale) or scale <= 0.0:
        raise SingularSystemError("normal matrix has no positive diagonal")
    try:
        cb = cholesky_banded(to_upper_banded(A, u), check_finite=False)
    except LinAlgError as err:
        raise SingularSystemError(str(err)) from None
    if np.min(cb[u] ** 2) < _PIVOT_RTOL * scale:
        raise SingularSystemError("normal matrix is numerically rank deficient")
    return cho_solve_banded((cb, False), rhs, check_finite=False)


def stacked_hat_trace(top, bottom=None):
    """``trace(T (T^T T + S^T S)^-1 T^T)`` for ``T = top`` and ``S = bottom``.

    Computed as the squared Frobenius norm of the ``top`` rows of ``Q`` in a
    QR factorization of ``[T; S]``; no normal matrix is formed, so the value
    stays accurate when ``S`` dominates.
    """
    A = top if bottom is None else np.vstack([top, bottom])
    Q, R = np.linalg.qr(A)
    diag = np.abs(np.diagonal(R))
    if diag.size < A.shape[1] or np.min(diag) <= 1e-12 * max(np.max(diag), 1e-300):
        raise SingularSystemError("stacked system is rank deficient")
    Qt = Q[:top.shape[0]]
    return float(np.sum(Qt * Qt))
