"""Difference penalties on adjacent B-spline coefficients."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class PenaltyOperator:
    """The ``m``-th difference matrix ``D_m`` of shape ``(d - m, d)`` and ``D_m^T D_m``."""

    order: int
    dim: int
    matrix: np.ndarray
    gram: np.ndarray

    @property
    def bandwidth(self):
        """Number of nonzero superdiagonals of ``gram``."""
        return self.order


def difference_matrix(m, d):
    """Build ``D_m`` as the ``m``-fold composition of first differences.

    Rows carry the pattern ``(-1)^(m-j) C(m, j)``, e.g. ``(-1, 1)`` for
    ``m = 1`` and ``(1, -2, 1)`` for ``m = 2``.
    """
    if int(m) != m or int(d) != d:
        raise ValueError("order and dimension must be integers")
    m, d = int(m), int(d)
    if m < 1:
        raise ValueError(f"difference order must be >= 1, got {m}")
    if m >= d:
        raise ValueError(f"difference order {m} must be smaller than dimension {d}")
    D = np.diff(np.eye(d, dtype=np.int64), n=m, axis=0)
    gram = (D.T @ D).astype(float)
    D.setflags(write=False)
    gram.setflags(write=False)
    return PenaltyOperator(m, d, D, gram)


def penalty_value(op, coef, lam):
    """``(lam / 2) * coef^T D_m^T D_m coef``."""
    coef = np.asarray(coef, dtype=float)
    if coef.shape != (op.dim,):
        raise ValueError(f"expected {op.dim} coefficients, got shape {coef.shape}")
    if lam < 0:
        raise ValueError(f"smoothing parameter must be >= 0, got {lam}")
    diffs = op.matrix @ coef
    return 0.5 * lam * float(diffs @ diffs)
