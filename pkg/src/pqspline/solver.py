"""Penalized check-loss fitting by iteratively reweighted least squares.

The quantile fit minimizes

    sum_i rho_tau(y_i - B(x_i)^T b) + (lam / 2) b^T D_m^T D_m b

by repeated weighted ridge solves. With the weights ``psi(r) / (2 r)`` used
here, a fixed point of ``(Z^T W Z + c D^T D) b = Z^T W y`` satisfies
``sum psi(r_i) z_i = 2 c D^T D b``, so the ridge term carries ``lam / 2`` to
target the objective above. An active-set step then snaps the near-zero
residuals to exact interpolation, recovering the nonsmooth minimizer.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import linprog

from ._linalg import SingularSystemError, solve_spd
from .penalty import PenaltyOperator, difference_matrix, penalty_value
from .spline_basis import BasisSpec, DesignMatrix

WEIGHT_MODES = ("capped", "paper_verbatim")
INIT_MODES = ("penalized_least_squares", "given")
_POLISH_EVERY = 10
_LOCAL_WARMUP = 15


class ConvergenceWarning(UserWarning):
    pass


def check_loss(u, tau):
    """``rho_tau(u) = u (tau - I(u < 0))``."""
    _check_tau(tau)
    u = np.asarray(u, dtype=float)
    out = u * (tau - (u < 0))
    return float(out) if out.ndim == 0 else out


def psi(u, tau):
    """Subgradient selection ``tau - I(u < 0)`` of the check loss."""
    _check_tau(tau)
    u = np.asarray(u, dtype=float)
    out = tau - (u < 0).astype(float)
    return float(out) if out.ndim == 0 else out


def _check_tau(tau):
    if not np.all((np.asarray(tau) > 0.0) & (np.asarray(tau) < 1.0)):
        raise ValueError(f"tau must lie in (0, 1), got {tau}")


@dataclass(frozen=True)
class IRLSConfig:
    """Settings for the reweighted least squares iteration.

    ``alpha`` is the residual radius inside which weights are capped; ``None``
    means ``1e-4`` times the interquartile range of the response.
    """

    alpha: float | None = None
    tol: float = 1e-8
    max_iter: int = 200
    weight_mode: str = "capped"
    init: str = "penalized_least_squares"
    polish: bool = True

    def __post_init__(self):
        if self.alpha is not None and not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not self.tol > 0:
            raise ValueError(f"tol must be > 0, got {self.tol}")
        if int(self.max_iter) != self.max_iter or self.max_iter < 1:
            raise ValueError(f"max_iter must be a positive integer, got {self.max_iter}")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"weight_mode must be one of {WEIGHT_MODES}")
        if self.init not in INIT_MODES:
            raise ValueError(f"init must be one of {INIT_MODES}")

    def resolve_alpha(self, y):
        if self.alpha is not None:
            return float(self.alpha)
        q75, q25 = np.percentile(y, [75, 25])
        spread = q75 - q25
        if not spread > 0:
            spread = np.std(y)
        if not spread > 0:
            spread = max(np.max(np.abs(y)), 1.0)
        return 1e-4 * float(spread)


@dataclass(frozen=True, eq=False)
class QuantileFit:
    """A fitted penalized spline quantile curve."""

    spec: BasisSpec
    coef: np.ndarray
    tau: float
    lam: float
    penalty_order: int
    iterations: int
    converged: bool
    final_weights: np.ndarray
    objective: float
    alpha: float
    polished: bool = False
    diagnostics: dict = field(default_factory=dict)

    def predict(self, x):
        return DesignMatrix(self.spec, x).dot(self.coef)

    def __call__(self, x):
        scalar = np.ndim(x) == 0
        out = self.predict(x)
        return float(out[0]) if scalar else out


def irls_weights(residuals, tau, cfg=None, alpha=None):
    """IRLS weights for the given residuals.

    ``capped`` (default): ``psi(r) / (2 r)`` for ``|r| > alpha`` and the
    continuous caps ``tau / (2 alpha)`` (``r >= 0``) or ``(1 - tau) / (2 alpha)``
    (``r < 0``) inside. ``paper_verbatim``: the literal three-branch rule with
    ``tau r / alpha`` and ``(1 - tau) r / alpha`` inside the radius; these can
    vanish or turn negative.
    """
    _check_tau(tau)
    cfg = IRLSConfig() if cfg is None else cfg
    r = np.asarray(residuals, dtype=float)
    if alpha is None:
        alpha = cfg.alpha
    if alpha is None or not alpha > 0:
        raise ValueError("a positive alpha is required")
    outer = np.abs(r) > alpha
    safe = np.where(outer, r, 1.0)
    w_outer = (tau - (r < 0)) / (2.0 * safe)
    if cfg.weight_mode == "capped":
        inner = np.where(r >= 0, tau, 1.0 - tau) / (2.0 * alpha)
    else:
        inner = np.where(r >= 0, tau * r, (1.0 - tau) * r) / alpha
    return np.where(outer, w_outer, inner)


def _as_data(x, y):
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise ValueError("x and y must have the same length")
    if x.size == 0:
        raise ValueError("empty data")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("data must be finite")
    return x, y


def _penalty_for(spec, penalty):
    if isinstance(penalty, PenaltyOperator):
        op = penalty
    elif int(penalty) >= spec.dim >= 1 and int(penalty) <= spec.degree + 1:
        # no m-th differences exist in so small a space: the penalty is void
        d = spec.dim
        op = PenaltyOperator(int(penalty), d, np.zeros((0, d), dtype=np.int64), np.zeros((d, d)))
    else:
        op = difference_matrix(int(penalty), spec.dim)
    if op.dim != spec.dim:
        raise ValueError(f"penalty dimension {op.dim} does not match basis dimension {spec.dim}")
    if op.order > spec.degree + 1:
        raise ValueError(f"penalty order {op.order} exceeds degree + 1 = {spec.degree + 1}")
    return op


def penalized_objective(Z, y, coef, tau, op, lam):
    """``sum rho_tau(y - Z coef) + (lam / 2) coef^T D^T D coef``."""
    r = y - Z.dot(coef)
    return float(np.sum(check_loss(r, tau))) + penalty_value(op, coef, lam)


def _ridge_solve(Z, weights, y, op, ridge, bandwidth):
    A = Z.gram(weights)
    if ridge > 0:
        A = A + ridge * op.gram
    return solve_spd(A, Z.rdot(weights * y), bandwidth)


def fit_penalized_quantile(x, y, tau, spec, penalty=2, lam=0.0, cfg=None, init_coef=None,
                           design=None):
    """Penalized B-spline estimate of the conditional ``tau``-quantile.

    Parameters
    ----------
    x, y : array-like
        Data with ``x`` in ``[0, 1]``.
    tau : float
        Quantile level in ``(0, 1)``.
    spec : BasisSpec
    penalty : PenaltyOperator or int
        Difference operator, or its order ``m`` (requires ``m <= p + 1``).
    lam : float
        Smoothing parameter ``>= 0``.
    cfg : IRLSConfig, optional
    init_coef : array-like, optional
        Starting coefficients, used when ``cfg.init == "given"`` or as a warm
        start whenever supplied.
    design : DesignMatrix, optional
        Precomputed design matrix for ``x``.

    Returns
    -------
    QuantileFit

    Raises
    ------
    SingularSystemError
        When a weighted normal matrix is rank deficient (typically ``lam = 0``
        with empty knot intervals).
    """
    _check_tau(tau)
    cfg = IRLSConfig() if cfg is None else cfg
    x, y = _as_data(x, y)
    if not lam >= 0:
        raise ValueError(f"smoothing parameter must be >= 0, got {lam}")
    op = _penalty_for(spec, penalty)
    Z = DesignMatrix(spec, x) if design is None else design
    alpha = cfg.resolve_alpha(y)
    ridge = 0.5 * lam
    band = max(spec.degree, op.order)

    if init_coef is not None:
        b = np.array(init_coef, dtype=float)
        if b.shape != (spec.dim,):
            raise ValueError(f"init_coef must have length {spec.dim}")
    elif cfg.init == "given":
        raise ValueError("init='given' requires init_coef")
    else:
        b = _ridge_solve(Z, np.ones_like(y), y, op, lam, band)

    obj = penalized_objective(Z, y, b, tau, op, lam)
    best_b, best_obj = b, obj
    use_polish = cfg.polish and cfg.weight_mode == "capped"
    converged = polished = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        w = irls_weights(y - Z.dot(b), tau, cfg, alpha)
        b_new = _ridge_solve(Z, w, y, op, ridge, band)
        change = np.max(np.abs(b_new - b))
        b = b_new
        obj = penalized_objective(Z, y, b, tau, op, lam)
        # keep the better of consecutive iterates
        if obj <= best_obj:
            best_b, best_obj = b, obj
        stalled = change < cfg.tol
        if use_polish and (stalled or it % _POLISH_EVERY == 0 or it == cfg.max_iter):
            cand = _active_set_polish(Z.toarray(), y, best_b, tau, lam * op.gram, alpha)
            if cand is not None:
                cand_obj = penalized_objective(Z, y, cand, tau, op, lam)
                if cand_obj <= best_obj + 1e-12 * max(1.0, abs(best_obj)):
                    best_b, best_obj, polished = cand, cand_obj, True
                    converged = True
                    break
        if stalled:
            converged = True
            break

    if not converged:
        warnings.warn(f"IRLS did not converge in {cfg.max_iter} iterations", ConvergenceWarning,
                      stacklevel=2)
    final_w = irls_weights(y - Z.dot(best_b), tau, cfg, alpha)
    return QuantileFit(
        spec=spec, coef=best_b, tau=float(tau), lam=float(lam), penalty_order=op.order,
        iterations=it, converged=converged, final_weights=final_w, objective=best_obj,
        alpha=alpha, polished=polished,
    )


def _shared_null_space(P, ZE, rtol=1e-10):
    """Orthonormal basis of ``null(P)`` intersected with ``null(ZE)``."""
    A = np.vstack([P / max(np.max(np.abs(P), initial=0.0), 1.0), ZE])
    _, sv, Vt = np.linalg.svd(A, full_matrices=True)
    rank = int(np.sum(sv > rtol * sv[0])) if sv.size and sv[0] > 0 else 0
    return Vt[rank:].T


def _descent_direction(ZE, grad, tau, scale):
    """Steepest box-constrained descent direction at a kink, or ``None``.

    Minimizes the directional derivative ``grad^T s + sum_E rho_tau(-z_i^T s)``
    over ``|s|_inf <= 1`` as a linear program. A value that is not clearly
    negative certifies that the current point is optimal.
    """
    k, d = ZE.shape
    c = np.concatenate([grad, np.full(k, tau), np.full(k, 1.0 - tau)])
    A = np.hstack([ZE, np.eye(k), -np.eye(k)])
    bounds = [(-1.0, 1.0)] * d + [(0.0, None)] * (2 * k)
    res = linprog(c, A_eq=A, b_eq=np.zeros(k), bounds=bounds, method="highs")
    size = np.sum(np.abs(grad)) + np.sum(np.abs(ZE)) + 1.0
    if res.status != 0 or res.fun >= -1e-11 * size * scale:
        return None
    return res.x[:d]


def _line_search(Zd, r, b, s, in_e, sign, tau, P):
    """Exact minimizer of the objective along ``b + t s``, ``t >= 0``.

    The objective is convex and piecewise quadratic in ``t``; its slope
    jumps up by ``|z_i^T s|`` where residual ``i`` crosses zero. Returns the
    new point and a mask of the residual it stopped on, or ``None`` when the
    ray is unbounded.
    """
    dz = Zd @ s
    # right-hand slope at t = 0; rows in E leave on the side -dz points to
    neg = np.where(in_e, dz > 0, sign < 0)
    slope = float(s @ (P @ b)) - float(np.sum((tau - neg) * dz))
    curv = float(s @ (P @ s))
    with np.errstate(divide="ignore", invalid="ignore"):
        tb = np.where(~in_e & (dz != 0), r / dz, -1.0)
    order = np.flatnonzero(tb > 0)
    order = order[np.argsort(tb[order], kind="stable")]
    hit = np.zeros(r.shape, dtype=bool)
    t_prev = 0.0
    for i in order:
        end = slope + curv * (tb[i] - t_prev)
        if curv > 0 and end >= 0:
            return b + (t_prev - slope / curv) * s, hit
        slope = end + abs(dz[i])
        t_prev = tb[i]
        if slope >= 0:
            hit[i] = True
            return b + t_prev * s, hit
    if curv > 0:
        return b + (t_prev - slope / curv) * s, hit
    return None


def _active_set_polish(Zd, y, b, tau, P, alpha, max_rounds=None):
    """Exact minimizer reached from the IRLS iterate ``b``, or ``None``.

    Observations in the active set ``E`` (residual near zero) are forced to
    interpolate while the rest contribute fixed subgradients. Each round
    solves

        Z_E b = y_E,   lam D^T D b - Z_E^T v = sum_{i not in E} psi_i z_i

    The step toward that solution is cut at the first residual outside ``E``
    that changes sign, which then joins ``E``. When the system is singular
    the objective is linear along the shared null space of the penalty and
    ``Z_E``, and the step follows that descent direction instead. Once the
    full step is taken,
    multipliers inside ``[tau - 1, tau]`` certify optimality; otherwise a
    small linear program either certifies it anyway (tied rows make the
    multipliers non-unique) or yields a descent direction, followed by an
    exact line search that releases the rows leaving ``E``.

    ``Zd`` is a dense design, ``P`` the penalty Hessian ``lam D^T D`` and
    ``alpha`` the radius (scalar or per observation) seeding ``E``.
    """
    d = Zd.shape[1]
    b = np.array(b, dtype=float)
    r = y - Zd @ b
    absr = np.abs(r)
    scale = max(np.max(np.abs(y)), 1.0)
    eps = 1e-9
    in_e = absr <= 2.0 * alpha
    sign = np.where(r < 0, -1.0, 1.0)
    max_rounds = 20 * d + 50 if max_rounds is None else max_rounds
    for _ in range(max_rounds):
        idx = np.flatnonzero(in_e)
        out = ~in_e
        g = Zd[out].T @ (tau - (sign[out] < 0))
        k = idx.size
        M = np.zeros((d + k, d + k))
        M[:k, :d] = Zd[idx]
        M[k:, :d] = P
        M[k:, d:] = -Zd[idx].T
        rhs = np.concatenate([r[idx], g - P @ b])
        sol, *_ = np.linalg.lstsq(M, rhs, rcond=None)
        # consistency relative to the system's size; P can be huge
        size = np.max(np.abs(M)) * np.max(np.abs(sol), initial=0.0) + np.max(np.abs(rhs), initial=0.0)
        bounded = np.max(np.abs(M @ sol - rhs), initial=0.0) <= 1e-9 * max(size, scale)
        tied = np.abs(r) <= 1e-12 * scale
        if not bounded and np.any(in_e & ~tied):
            # seeded rows that cannot all be interpolated: keep only exact ties
            in_e &= tied
            continue
        if not bounded:
            # the face is unbounded along directions the penalty and the
            # interpolated rows both ignore; the objective is linear there, so
            # move downhill until the first residual reaches zero
            U = _shared_null_space(P, Zd[idx])
            step = U @ (U.T @ g)
            dz = Zd @ step
            with np.errstate(divide="ignore", invalid="ignore"):
                t = np.where(out & (dz * sign > 0), r / dz, np.inf)
            j = int(np.argmin(t))
            if np.isfinite(t[j]) and g @ step > 1e-12 * (np.sum(np.abs(g)) + 1.0) * np.abs(step).max():
                b = b + max(t[j], 0.0) * step
                r = y - Zd @ b
                r[j] = 0.0
                in_e |= np.abs(r) <= 1e-12 * scale
                continue
        if bounded:
            step = sol[:d]
            v = sol[d:]
            dz = Zd @ step
            # ratio test: first out-of-set residual driven through zero
            with np.errstate(divide="ignore", invalid="ignore"):
                t = np.where(out & (dz * sign > 0), r / dz, np.inf)
            j = int(np.argmin(t))
            if t[j] < 1.0:
                b = b + max(t[j], 0.0) * step
                r = y - Zd @ b
                r[j] = 0.0
                # tied observations reach zero together
                in_e |= np.abs(r) <= 1e-12 * scale
                continue
            b = b + step
            r = y - Zd @ b
            viol = np.maximum(v - tau, tau - 1 - v)
            if not k or viol.max() <= eps:
                return b
        # singular face, or multipliers outside [tau - 1, tau] (not unique when
        # rows are tied): certify optimality exactly or descend along the
        # steepest direction over the unit box
        grad = P @ b - Zd[out].T @ (tau - (sign[out] < 0))
        s = _descent_direction(Zd[idx], grad, tau, scale)
        if s is None:
            return b
        moved = _line_search(Zd, r, b, s, in_e, sign, tau, P)
        if moved is None:
            return None
        b, hit = moved
        r = y - Zd @ b
        in_e = (in_e & (np.abs(Zd @ s) <= 1e-12 * scale)) | hit
        r[in_e] = np.where(np.abs(r[in_e]) <= 1e-9 * scale, 0.0, r[in_e])
        in_e |= np.abs(r) <= 1e-12 * scale
        sign = np.where(in_e, sign, np.where(r < 0, -1.0, 1.0))
    return None


def fit_penalized_mean(x, y, spec, penalty=2, mu=0.0, design=None):
    """Coefficients of ``argmin ||y - Z b||^2 + mu b^T D^T D b``.

    Solved as the stacked least-squares problem ``[Z; sqrt(mu) D] b ~ [y; 0]``
    by QR, which stays accurate for very large ``mu``.
    """
    x, y = _as_data(x, y)
    if not mu >= 0:
        raise ValueError(f"smoothing parameter must be >= 0, got {mu}")
    op = _penalty_for(spec, penalty)
    Z = DesignMatrix(spec, x) if design is None else design
    A = Z.toarray()
    rhs = y
    if mu > 0:
        A = np.vstack([A, np.sqrt(mu) * op.matrix])
        rhs = np.concatenate([y, np.zeros(op.matrix.shape[0])])
    Q, R = np.linalg.qr(A)
    diag = np.abs(np.diagonal(R))
    if diag.size < spec.dim or np.min(diag) <= 1e-10 * max(np.max(diag), 1e-300):
        raise SingularSystemError("penalized mean system is rank deficient")
    return solve_triangular(R, Q.T @ rhs)


def gaussian_kernel(u):
    return np.exp(-0.5 * u * u) / np.sqrt(2.0 * np.pi)


def _local_linear_irls(x, y, tau, x0, h, cfg, alpha):
    """Vectorized local linear check-loss fits at every ``x0``.

    Returns intercepts, slopes, the final combined weights and an
    iteration count.
    """
    U = x[None, :] - x0[:, None]
    kern = gaussian_kernel(U / h)
    mass = kern.sum(axis=1)
    eff = (kern > 1e-300).sum(axis=1)
    if np.any(mass <= 0) or np.any(eff < 2):
        raise ValueError("empty effective neighbourhood for local fit")

    def wls(v, u):
        s0 = v.sum(1)
        s1 = (v * u).sum(1)
        s2 = (v * u * u).sum(1)
        t0 = (v * y).sum(1)
        t1 = (v * u * y).sum(1)
        det = s0 * s2 - s1 * s1
        tiny = det <= 1e-14 * np.maximum(s0 * s2, 1e-300)
        det = np.where(tiny, 1.0, det)
        a = np.where(tiny, t0 / s0, (s2 * t0 - s1 * t1) / det)
        slope = np.where(tiny, 0.0, (s0 * t1 - s1 * t0) / det)
        return a, slope

    a, slope = wls(kern, U)
    active = np.arange(x0.shape[0])
    it = 0
    for it in range(1, cfg.max_iter + 1):
        # only rows that have not converged are refitted
        u = U[active]
        R = y[None, :] - a[active, None] - slope[active, None] * u
        a_new, s_new = wls(kern[active] * irls_weights(R, tau, cfg, alpha), u)
        change = np.maximum(np.abs(a_new - a[active]), np.abs(s_new - slope[active]))
        a[active] = a_new
        slope[active] = s_new
        active = active[change >= cfg.tol]
        if active.size == 0:
            break
        if cfg.polish and cfg.weight_mode == "capped" and it % _LOCAL_WARMUP == 0:
            active = _polish_local_rows(x, y, tau, x0, kern, a, slope, active, alpha)
            if active.size == 0:
                break
    R = y[None, :] - a[:, None] - slope[:, None] * U
    return a, slope, kern * irls_weights(R, tau, cfg, alpha), it


def _polish_local_rows(x, y, tau, x0, kern, a, slope, rows, alpha):
    """Exact local fits for ``rows``; returns the rows left unresolved.

    With kernel weights ``k_i > 0`` the local objective equals the unweighted
    check loss of the scaled data ``(k_i, k_i u_i) -> k_i y_i``, so the
    active-set step applies with no penalty. Points with relative kernel
    weight below ``1e-8`` are left out; they would otherwise pass as ties.
    """
    left = []
    P = np.zeros((2, 2))
    for i in rows:
        k = kern[i]
        keep = k > 1e-8 * k.max()
        kk = k[keep]
        u = x[keep] - x0[i]
        Zd = np.column_stack([kk, kk * u])
        yy = kk * y[keep]
        start = np.array([a[i], slope[i]])
        cand = _active_set_polish(Zd, yy, start, tau, P, alpha * kk)
        if cand is None:
            left.append(i)
            continue
        old = np.sum(check_loss(yy - Zd @ start, tau))
        new = np.sum(check_loss(yy - Zd @ cand, tau))
        if new <= old + 1e-12 * max(1.0, abs(old)):
            a[i], slope[i] = cand
        else:
            left.append(i)
    return np.asarray(left, dtype=int)


def fit_local_linear_quantile(x, y, tau, x0, h, cfg=None):
    """Local linear quantile estimate with a Gaussian kernel of bandwidth ``h``.

    Minimizes ``sum_i K((x_i - x0) / h) rho_tau(y_i - a - b (x_i - x0))`` and
    returns ``a``. ``x0`` may be a scalar or an array of evaluation points.
    """
    _check_tau(tau)
    if not h > 0:
        raise ValueError(f"bandwidth must be > 0, got {h}")
    cfg = IRLSConfig() if cfg is None else cfg
    x, y = _as_data(x, y)
    scalar = np.ndim(x0) == 0
    pts = np.atleast_1d(np.asarray(x0, dtype=float))
    a, _, _, _ = _local_linear_irls(x, y, tau, pts, h, cfg, cfg.resolve_alpha(y))
    return float(a[0]) if scalar else a


def fit_linear_quantile(x, y, tau, cfg=None):
    """Global linear check-loss fit; returns ``(intercept, slope)``.

    Uses the same weighting scheme as the local fit with a flat kernel.
    """
    _check_tau(tau)
    cfg = IRLSConfig() if cfg is None else cfg
    x, y = _as_data(x, y)
    X = np.column_stack([np.ones_like(x), x])
    alpha = cfg.resolve_alpha(y)
    beta = np.linalg.lstsq(X, y, rcond=None)[0]
    for _ in range(cfg.max_iter):
        w = irls_weights(y - X @ beta, tau, cfg, alpha)
        beta_new = np.linalg.solve(X.T @ (w[:, None] * X), X.T @ (w * y))
        change = np.max(np.abs(beta_new - beta))
        beta = beta_new
        if change < cfg.tol:
            break
    return float(beta[0]), float(beta[1])


__all__ = [
    "ConvergenceWarning", "IRLSConfig", "QuantileFit", "SingularSystemError", "check_loss",
    "fit_linear_quantile", "fit_local_linear_quantile", "fit_penalized_mean",
    "fit_penalized_quantile", "gaussian_kernel", "irls_weights", "penalized_objective", "psi",
]
