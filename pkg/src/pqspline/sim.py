"""Monte Carlo harness: simulated data, MISE tables and the normality study.

Every repetition draws from its own Philox stream seeded by
``SeedSequence([master_seed, rep])``, so any single repetition can be
replayed without running the ones before it.
"""

import csv
import io
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from ._bandwidth import sj_bandwidth
from ._linalg import SingularSystemError
from .inference import density_at_fit, variance_estimate
from .selection import InvalidConfiguration, select_bandwidth, select_model
from .solver import ConvergenceWarning, _check_tau, fit_local_linear_quantile
from .spline_basis import DesignMatrix

LAWS = ("normal", "exponential", "cauchy")
ESTIMATORS = ("P-cubic", "R-linear", "L-linear")
EVAL_GRID = np.arange(1, 101) / 100.0
R_LINEAR_K = (2, 3, 4, 5, 6, 8, 10, 12, 15, 20, 25, 30)

_FIT_ERRORS = (InvalidConfiguration, SingularSystemError, ValueError, np.linalg.LinAlgError)


def sine_signal(x):
    return np.sin(2.0 * np.pi * x)


@dataclass(frozen=True)
class SimModel:
    """``y = signal(x) + noise_scale * eps`` with ``x ~ U[0, 1]``.

    Error laws: ``normal`` has sd 0.1, ``exponential`` has mean 2 and
    ``cauchy`` has location 0 and scale 0.01. ``noise_scale = 0`` gives
    noiseless data.
    """

    law: str = "normal"
    n: int = 100
    seed: int = 0
    signal: object = sine_signal
    noise_scale: float = 1.0

    def __post_init__(self):
        if self.law not in LAWS:
            raise ValueError(f"unknown error law {self.law!r}; expected one of {LAWS}")
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"n must be a positive integer, got {self.n}")


def error_quantile(law, tau):
    """Inverse CDF of the error law at ``tau``."""
    _check_tau(tau)
    if law == "normal":
        return 0.1 * float(stats.norm.ppf(tau))
    if law == "exponential":
        return -2.0 * float(np.log1p(-tau))
    if law == "cauchy":
        return 0.01 * float(np.tan(np.pi * (tau - 0.5)))
    raise ValueError(f"unknown error law {law!r}")


def true_quantile(model, tau, x):
    """Conditional ``tau``-quantile of ``y`` given ``x``."""
    return model.signal(np.asarray(x, dtype=float)) + model.noise_scale * error_quantile(model.law, tau)


def rep_generator(seed, rep):
    """Counter-based generator for repetition ``rep`` of master ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(rep)])))


def _draw_errors(rng, law, n):
    if law == "normal":
        return 0.1 * rng.standard_normal(n)
    if law == "exponential":
        return rng.exponential(2.0, n)
    return 0.01 * rng.standard_cauchy(n)


def generate_dataset(model, rep=0):
    """Draw ``(x, y)`` for repetition ``rep``; deterministic in ``(seed, rep)``."""
    rng = rep_generator(model.seed, rep)
    x = rng.random(model.n)
    eps = _draw_errors(rng, model.law, model.n)
    return x, model.signal(x) + model.noise_scale * eps


def fit_p_cubic(x, y, tau, cfg=None):
    """GACV-tuned cubic spline with second-order difference penalty."""
    return select_model(x, y, tau, degree=3, penalty_order=2, cfg=cfg).best_fit


def fit_r_linear(x, y, tau, cfg=None):
    """Unpenalized linear regression spline with GACV-chosen knot count."""
    n = np.asarray(x).shape[0]
    ks = tuple(k for k in R_LINEAR_K if k * k <= n) or R_LINEAR_K[:1]
    return select_model(x, y, tau, K_values=ks, lambda_values=(0.0,), degree=1,
                        penalty_order=2, cfg=cfg).best_fit


def _curve(name, x, y, tau, grid, cfg):
    if name == "P-cubic":
        return fit_p_cubic(x, y, tau, cfg).predict(grid)
    if name == "R-linear":
        return fit_r_linear(x, y, tau, cfg).predict(grid)
    if name == "L-linear":
        h, _ = select_bandwidth(x, y, tau, cfg=cfg)
        return fit_local_linear_quantile(x, y, tau, grid, h, cfg)
    raise ValueError(f"unknown estimator {name!r}; expected one of {ESTIMATORS}")


@dataclass(eq=False)
class MiseReport:
    """Pointwise MSE on ``grid`` and its mean (the MISE) per estimator and ``tau``.

    ``mse[(name, tau)]`` averages over the repetitions that succeeded;
    ``failures[(name, tau)]`` counts the excluded ones.
    """

    model: SimModel
    taus: tuple
    estimators: tuple
    reps: int
    grid: np.ndarray
    mse: dict
    failures: dict
    errors: dict = field(default_factory=dict)

    @property
    def mise(self):
        return {key: float(np.mean(v)) for key, v in self.mse.items()}

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["estimator", "tau", "n", "law", "reps", "failures", "mise"])
        mise = self.mise
        for name in self.estimators:
            for tau in self.taus:
                w.writerow([name, repr(tau), self.model.n, self.model.law, self.reps,
                            self.failures[name, tau], repr(mise[name, tau])])
        return buf.getvalue()

    def manifest(self):
        return {
            "kind": "mise",
            "law": self.model.law,
            "n": self.model.n,
            "master_seed": self.model.seed,
            "reps": self.reps,
            "rep_seeds": [[self.model.seed, r] for r in range(self.reps)],
            "taus": list(self.taus),
            "estimators": list(self.estimators),
            "grid": "j/100, j=1..100",
            "failures": {f"{k[0]}@{k[1]}": v for k, v in self.failures.items()},
            "mise": {f"{k[0]}@{k[1]}": v for k, v in self.mise.items()},
        }


def run_mise_study(model, taus=(0.5,), reps=100, estimators=("P-cubic",), cfg=None, grid=EVAL_GRID):
    """Monte Carlo MISE of each estimator at each ``tau``.

    Repetition ``r`` uses the dataset of :func:`generate_dataset` with that
    index, so estimators and quantile levels see identical samples.
    """
    if int(reps) != reps or reps < 1:
        raise ValueError(f"reps must be a positive integer, got {reps}")
    taus = tuple(float(t) for t in taus)
    for t in taus:
        _check_tau(t)
    for name in estimators:
        if name not in ESTIMATORS:
            raise ValueError(f"unknown estimator {name!r}; expected one of {ESTIMATORS}")
    grid = np.asarray(grid, dtype=float)
    sums = {(e, t): np.zeros(grid.shape) for e in estimators for t in taus}
    ok = {key: 0 for key in sums}
    errors = {key: [] for key in sums}
    truth = {t: true_quantile(model, t, grid) for t in taus}
    for r in range(reps):
        x, y = generate_dataset(model, r)
        for t in taus:
            for e in estimators:
                try:
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore", ConvergenceWarning)
                        est = _curve(e, x, y, t, grid, cfg)
                except _FIT_ERRORS as err:
                    errors[e, t].append((r, f"{type(err).__name__}: {err}"))
                    continue
                sums[e, t] += (est - truth[t]) ** 2
                ok[e, t] += 1
    mse = {key: (sums[key] / ok[key] if ok[key] else np.full(grid.shape, np.nan)) for key in sums}
    failures = {key: reps - ok[key] for key in sums}
    return MiseReport(model, taus, tuple(estimators), int(reps), grid, mse, failures, errors)


@dataclass(eq=False)
class NormalityReport:
    """Standardized errors ``U`` at one point and their distance to N(0, 1)."""

    tau: float
    x: float
    n: int
    u: np.ndarray
    density_grid: np.ndarray
    density: np.ndarray
    ks: float
    failures: int

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["u", "density", "normal_density"])
        ref = stats.norm.pdf(self.density_grid)
        for g, d, f in zip(self.density_grid, self.density, ref):
            w.writerow([repr(float(g)), repr(float(d)), repr(float(f))])
        return buf.getvalue()


def ks_to_normal(u):
    """Kolmogorov-Smirnov distance between the sample and N(0, 1)."""
    return float(stats.kstest(np.asarray(u, dtype=float), "norm").statistic)


def kernel_density(u, grid):
    """Gaussian kernel density of ``u`` on ``grid`` with a Sheather-Jones bandwidth."""
    u = np.asarray(u, dtype=float)
    h = sj_bandwidth(u)
    return stats.gaussian_kde(u, bw_method=h / np.std(u, ddof=1))(grid)


def standardized_error(x, y, tau, at, truth, cfg=None):
    """``(eta_hat(at) - truth) / sqrt(Phi_hat(at))`` for a GACV-tuned cubic fit."""
    fit = fit_p_cubic(x, y, tau, cfg)
    Z = DesignMatrix(fit.spec, x)
    r = density_at_fit(fit, x, y)
    phi = variance_estimate(fit, Z, fit.penalty_order, fit.lam, r, at)
    if not phi > 0:
        raise ValueError("non-positive variance estimate")
    return (fit(at) - truth) / np.sqrt(phi)


def normality_study(law="normal", tau=0.5, n_values=(100, 1000), reps=100, seed=0, x=0.5,
                    cfg=None, density_grid=np.linspace(-4, 4, 161)):
    """Distribution of the standardized error at ``x`` for each sample size.

    Returns a dict ``n -> NormalityReport``. Sample size ``n_values[i]`` uses
    master seed ``seed + i`` so the sizes draw independent data.
    """
    _check_tau(tau)
    if int(reps) != reps or reps < 2:
        raise ValueError(f"reps must be an integer >= 2, got {reps}")
    out = {}
    for i, n in enumerate(n_values):
        model = SimModel(law, int(n), seed + i)
        truth = float(true_quantile(model, tau, x))
        u, failed = [], 0
        for r in range(reps):
            xs, ys = generate_dataset(model, r)
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", ConvergenceWarning)
                    u.append(standardized_error(xs, ys, tau, x, truth, cfg))
            except _FIT_ERRORS:
                failed += 1
        u = np.asarray(u)
        dens = kernel_density(u, density_grid) if u.shape[0] >= 10 else np.full(density_grid.shape, np.nan)
        ks = ks_to_normal(u) if u.shape[0] else float("nan")
        out[int(n)] = NormalityReport(float(tau), float(x), int(n), u, density_grid, dens, ks, failed)
    return out


__all__ = [
    "ESTIMATORS", "EVAL_GRID", "LAWS", "MiseReport", "NormalityReport", "SimModel",
    "error_quantile", "fit_p_cubic", "fit_r_linear", "generate_dataset", "kernel_density",
    "ks_to_normal", "normality_study", "rep_generator", "run_mise_study", "sine_signal",
    "standardized_error", "true_quantile",
]
