"""Command line entry point: ``pqspline {fit,band,select,simulate}``.

Exit status is 0 on success, 2 for usage or data errors and 3 for numerical
failures. Outputs are written through a temporary file and renamed into
place, so a failed run never leaves a half-written or clobbered file.
"""

import argparse
import hashlib
import json
import os
import sys
import tempfile
import warnings

import numpy as np

from . import __version__
from ._linalg import SingularSystemError
from .inference import band_for_fit
from .selection import DEFAULT_LAMBDA_VALUES, InvalidConfiguration, select_model
from .sim import ESTIMATORS, EVAL_GRID, LAWS, SimModel, normality_study, run_mise_study
from .solver import ConvergenceWarning, IRLSConfig, fit_penalized_quantile
from .spline_basis import MAX_DEGREE, build_basis

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
GRID_POINTS = 101


class UsageError(Exception):
    """Bad arguments or unreadable input; maps to exit status 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------- input

def read_xy(path):
    """Read a two-column ``x,y`` CSV with an optional header row.

    The first line is treated as a header when it does not parse as numbers.
    Errors carry the 1-based line number.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as err:
        raise UsageError(f"{path}: {err.strerror}") from err
    xs, ys = [], []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2:
            raise UsageError(f"{path}:{lineno}: expected 2 comma-separated fields, got {len(parts)}")
        try:
            x, y = float(parts[0]), float(parts[1])
        except ValueError:
            if not xs and lineno == _first_content_line(lines):
                continue
            raise UsageError(f"{path}:{lineno}: non-numeric field in {line.strip()!r}") from None
        if not (np.isfinite(x) and np.isfinite(y)):
            raise UsageError(f"{path}:{lineno}: non-finite value")
        xs.append(x)
        ys.append(y)
    if not xs:
        raise UsageError(f"{path}: no data rows")
    return np.array(xs), np.array(ys)


def _first_content_line(lines):
    for i, line in enumerate(lines, 1):
        if line.strip():
            return i
    return 0


def prepare_x(x, rescale):
    """Validate ``x`` in ``[0, 1]`` or min-max rescale it; returns ``(x, (lo, hi))``."""
    if rescale:
        lo, hi = float(x.min()), float(x.max())
        if not hi > lo:
            raise UsageError("cannot rescale: all x values are equal")
        return np.clip((x - lo) / (hi - lo), 0.0, 1.0), (lo, hi)
    if x.min() < 0.0 or x.max() > 1.0:
        raise UsageError("x values outside [0, 1]; pass --rescale to map them")
    return x, (0.0, 1.0)


def parse_taus(text):
    try:
        taus = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"bad --tau list {text!r}") from None
    if not taus or any(not 0.0 < t < 1.0 for t in taus):
        raise UsageError("every tau must lie in (0, 1)")
    return taus


def parse_lambda(text):
    if text == "gacv":
        return None
    try:
        lam = float(text)
    except ValueError:
        raise UsageError(f"--lambda must be a number or 'gacv', got {text!r}") from None
    if not lam >= 0:
        raise UsageError("--lambda must be >= 0")
    return lam


def parse_ints(text, name):
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"bad {name} list {text!r}") from None
    if not vals:
        raise UsageError(f"empty {name} list")
    return vals


# ---------------------------------------------------------------- output

def atomic_write(path, text):
    """Write ``text`` to ``path`` via a temporary file in the same directory."""
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def commit_outputs(outputs):
    """Write every ``(path, text)`` only after all texts are ready."""
    for path, text in outputs:
        atomic_write(path, text)


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "" if not np.isfinite(v) else repr(float(v))


def table_csv(header, columns):
    lines = [",".join(header)]
    for row in zip(*columns):
        lines.append(",".join(_fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def manifest_path(out):
    return out + ".manifest.json"


def manifest_text(payload):
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def svg_lines(x, series, title=""):
    """Minimal line chart of ``series`` (``{label: y}``) against ``x``."""
    width, height, pad = 640, 400, 40
    ys = np.concatenate([np.asarray(v, float) for v in series.values()])
    ys = ys[np.isfinite(ys)]
    lo, hi = (float(ys.min()), float(ys.max())) if ys.size else (0.0, 1.0)
    if hi <= lo:
        hi = lo + 1.0
    xlo, xhi = float(np.min(x)), float(np.max(x))
    if xhi <= xlo:
        xhi = xlo + 1.0

    def px(v):
        return pad + (v - xlo) / (xhi - xlo) * (width - 2 * pad)

    def py(v):
        return height - pad - (v - lo) / (hi - lo) * (height - 2 * pad)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{pad}" y="20" font-size="14">{title}</text>']
    for k, (label, y) in enumerate(series.items()):
        segs, cur = [], []
        for a, b in zip(x, np.asarray(y, float)):
            if np.isfinite(b):
                cur.append(f"{px(a):.2f},{py(b):.2f}")
            elif cur:
                segs.append(cur)
                cur = []
        if cur:
            segs.append(cur)
        color = colors[k % len(colors)]
        for seg in segs:
            out.append(f'<polyline fill="none" stroke="{color}" points="{" ".join(seg)}"/>')
        out.append(f'<text x="{width - pad - 150}" y="{pad + 16 * k}" font-size="12" '
                   f'fill="{color}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------- commands

def _config(args):
    return IRLSConfig(tol=args.tol, max_iter=args.max_iter)


def _check_model_args(args):
    if not 0 <= args.degree <= MAX_DEGREE:
        raise UsageError(f"--degree must be in [0, {MAX_DEGREE}]")
    if not 1 <= args.penalty_order <= args.degree + 1:
        raise UsageError("--penalty-order must be in [1, degree + 1]")
    if args.knots is not None and args.knots < 1:
        raise UsageError("--knots must be >= 1")


def _fit_one(x, y, tau, args, cfg):
    """Fit at one ``tau``; returns ``(fit, info)``."""
    lam = parse_lambda(args.lam)
    if lam is None:
        ks = None if args.knots is None else (args.knots,)
        grid = select_model(x, y, tau, K_values=ks, lambda_values=DEFAULT_LAMBDA_VALUES,
                            degree=args.degree, penalty_order=args.penalty_order, cfg=cfg)
        fit = grid.best_fit
        selected = "gacv"
    else:
        spec = build_basis(args.degree, args.knots if args.knots is not None else 10)
        fit = fit_penalized_quantile(x, y, tau, spec, args.penalty_order, lam, cfg)
        selected = "fixed"
    info = {"tau": tau, "K": fit.spec.interior_count, "lambda": fit.lam, "selection": selected,
            "iterations": fit.iterations, "converged": bool(fit.converged),
            "objective": fit.objective}
    return fit, info


def _grid_x(grid, bounds):
    lo, hi = bounds
    return lo + grid * (hi - lo)


def _base_manifest(args, bounds, n):
    with open(args.input, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    return {"command": args.command, "input": os.path.abspath(args.input), "input_sha256": digest,
            "n": n, "degree": args.degree, "penalty_order": args.penalty_order, "knots": args.knots,
            "lambda": args.lam, "tol": args.tol, "max_iter": args.max_iter,
            "rescale": bool(args.rescale), "x_range": list(bounds), "version": __version__}


def cmd_fit(args):
    _check_model_args(args)
    taus = parse_taus(args.tau)
    parse_lambda(args.lam)
    x, y = read_xy(args.input)
    x, bounds = prepare_x(x, args.rescale)
    cfg = _config(args)
    grid = np.linspace(0.0, 1.0, GRID_POINTS)
    cols, header, fits = [_grid_x(grid, bounds)], ["x"], []
    for tau in taus:
        fit, info = _fit_one(x, y, tau, args, cfg)
        cols.append(fit.predict(grid))
        header.append(f"eta_{tau:g}")
        fits.append(info)
    outputs = [(args.output, table_csv(header, cols))]
    man = _base_manifest(args, bounds, x.shape[0])
    man.update({"taus": taus, "fits": fits, "grid_points": GRID_POINTS, "output": args.output})
    outputs.append((manifest_path(args.output), manifest_text(man)))
    if args.svg:
        outputs.append((args.svg, svg_lines(cols[0], dict(zip(header[1:], cols[1:])), "quantile fits")))
    commit_outputs(outputs)
    return EXIT_OK


def cmd_band(args):
    _check_model_args(args)
    if not 0.0 < args.alpha < 1.0:
        raise UsageError("--alpha must lie in (0, 1)")
    taus = parse_taus(args.tau)
    if len(taus) != 1:
        raise UsageError("band takes a single --tau")
    parse_lambda(args.lam)
    x, y = read_xy(args.input)
    x, bounds = prepare_x(x, args.rescale)
    cfg = _config(args)
    fit, info = _fit_one(x, y, taus[0], args, cfg)
    grid = np.linspace(0.0, 1.0, GRID_POINTS)
    rep = band_for_fit(x, y, fit, grid, args.alpha, cfg=cfg)
    header = ["x", "eta_hat", "b_a_hat", "b_lambda_hat", "phi_hat", "lower", "upper",
              "lower_uncorrected", "upper_uncorrected"]
    cols = [_grid_x(grid, bounds), rep.eta_hat, rep.b_a_hat, rep.b_lambda_hat, rep.phi_hat,
            rep.lower, rep.upper, rep.lower_raw, rep.upper_raw]
    outputs = [(args.output, table_csv(header, cols))]
    man = _base_manifest(args, bounds, x.shape[0])
    man.update({"taus": taus, "alpha": args.alpha, "multiplier": rep.multiplier, "fits": [info],
                "gaps": int(np.sum(~np.isfinite(rep.lower))), "output": args.output})
    outputs.append((manifest_path(args.output), manifest_text(man)))
    if args.svg:
        series = {"eta_hat": rep.eta_hat, "lower": rep.lower, "upper": rep.upper,
                  "lower (uncorrected)": rep.lower_raw, "upper (uncorrected)": rep.upper_raw}
        outputs.append((args.svg, svg_lines(cols[0], series, f"band, alpha={args.alpha:g}")))
    commit_outputs(outputs)
    return EXIT_OK


def cmd_select(args):
    _check_model_args(args)
    taus = parse_taus(args.tau)
    ks = parse_ints(args.k_values, "--k-values") if args.k_values else None
    x, y = read_xy(args.input)
    x, bounds = prepare_x(x, args.rescale)
    cfg = _config(args)
    rows_K, rows_lam, rows_tau, rows_score, rows_df = [], [], [], [], []
    best = []
    for tau in taus:
        g = select_model(x, y, tau, K_values=ks, degree=args.degree,
                         penalty_order=args.penalty_order, cfg=cfg)
        for i, K in enumerate(g.K_values):
            for j, lam in enumerate(g.lambda_values):
                rows_tau.append(tau)
                rows_K.append(K)
                rows_lam.append(lam)
                rows_score.append(g.scores[i, j])
                rows_df.append(g.df[i, j])
        best.append({"tau": tau, "K": g.best[0], "lambda": g.best[1], "excluded": len(g.failures)})
    text = table_csv(["tau", "K", "lambda", "gacv", "df"],
                     [rows_tau, rows_K, rows_lam, rows_score, rows_df])
    man = _base_manifest(args, bounds, x.shape[0])
    man.update({"taus": taus, "best": best, "output": args.output})
    commit_outputs([(args.output, text), (manifest_path(args.output), manifest_text(man))])
    return EXIT_OK


def cmd_simulate(args):
    if args.law not in LAWS:
        raise UsageError(f"unknown --law {args.law!r}; expected one of {LAWS}")
    if args.reps < 1:
        raise UsageError("--reps must be >= 1")
    if args.n < 10:
        raise UsageError("--n must be >= 10")
    taus = parse_taus(args.tau)
    estimators = [e.strip() for e in args.estimators.split(",") if e.strip()]
    bad = [e for e in estimators if e not in ESTIMATORS]
    if bad or not estimators:
        raise UsageError(f"unknown estimator(s) {bad}; expected a subset of {ESTIMATORS}")
    model = SimModel(args.law, args.n, args.seed)
    cfg = _config(args)
    report = run_mise_study(model, taus, args.reps, estimators, cfg)
    outputs = [(args.output, report.to_csv())]
    man = report.manifest()
    man.update({"command": "simulate", "tol": args.tol, "max_iter": args.max_iter,
                "output": args.output, "version": __version__})
    if args.normality:
        n_values = parse_ints(args.normality_n, "--normality-n")
        man["normality"] = {}
        for tau in taus:
            studies = normality_study(args.law, tau, n_values, max(args.reps, 2), args.seed, 0.5, cfg)
            for n, st in studies.items():
                path = f"{args.output}.u_tau{tau:g}_n{n}.csv"
                outputs.append((path, st.to_csv()))
                man["normality"][f"{tau:g}@{n}"] = {"ks": st.ks, "failures": st.failures,
                                                    "file": path}
    if args.svg:
        series = {f"{e}@{t:g}": report.mse[e, t] for e in estimators for t in taus}
        outputs.append((args.svg, svg_lines(report.grid, series, "pointwise MSE")))
    outputs.append((manifest_path(args.output), manifest_text(man)))
    commit_outputs(outputs)
    return EXIT_OK


def _add_common(p, inference=False):
    p.add_argument("input", help="CSV file with columns x,y")
    p.add_argument("output", help="output CSV path")
    p.add_argument("--tau", default="0.5", help="quantile level(s), comma separated")
    p.add_argument("--degree", type=int, default=3)
    p.add_argument("--penalty-order", type=int, default=2)
    p.add_argument("--knots", type=int, default=None,
                   help="interior interval count K (default: GACV grid, or 10 with fixed lambda)")
    p.add_argument("--lambda", dest="lam", default="gacv",
                   help="smoothing parameter, or 'gacv' to select (K, lambda)")
    p.add_argument("--rescale", action="store_true", help="min-max map x onto [0, 1]")
    p.add_argument("--svg", default=None, help="also write a line chart to this path")
    if inference:
        p.add_argument("--alpha", type=float, default=0.05, help="band level, 1 - coverage")


def build_parser():
    parser = _Parser(prog="pqspline", description="Penalized spline quantile regression.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--tol", type=float, default=1e-8, help="IRLS coefficient tolerance")
    parser.add_argument("--max-iter", type=int, default=200, help="IRLS iteration cap")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="fit quantile curves on a 101-point grid")
    _add_common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("band", help="pointwise confidence band with bias correction")
    _add_common(p, inference=True)
    p.set_defaults(func=cmd_band)

    p = sub.add_parser("select", help="GACV score table over (K, lambda)")
    _add_common(p)
    p.add_argument("--k-values", default=None, help="comma separated K grid")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("simulate", help="Monte Carlo MISE study")
    p.add_argument("output", help="MISE table CSV path")
    p.add_argument("--law", default="normal")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--tau", default="0.5")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--estimators", default="P-cubic", help=f"subset of {','.join(ESTIMATORS)}")
    p.add_argument("--normality", action="store_true", help="also run the standardized-error study")
    p.add_argument("--normality-n", default="100,1000")
    p.add_argument("--svg", default=None)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.tol > 0 or args.max_iter < 1:
            raise UsageError("--tol must be > 0 and --max-iter >= 1")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            return args.func(args)
    except UsageError as err:
        print(f"pqspline: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (SingularSystemError, InvalidConfiguration, np.linalg.LinAlgError, FloatingPointError) as err:
        print(f"pqspline: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as err:
        print(f"pqspline: error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
