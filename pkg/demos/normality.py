"""Standardized error at x = 0.5 drifting toward N(0, 1) as n grows.

Run with ``python3 demos/normality.py``. For each sample size the script
fits many datasets, standardizes the error of the bias-corrected fit by its
plug-in standard deviation, and reports the Kolmogorov distance to the
standard normal together with a coarse text histogram.
"""

import numpy as np

from pqspline import normality_study

out = normality_study("normal", 0.5, n_values=(100, 1000), reps=60, seed=5)

for n, rep in out.items():
    print(f"n = {n}: KS distance {rep.ks:.3f}, mean {np.mean(rep.u):+.2f}, "
          f"sd {np.std(rep.u):.2f}, failures {rep.failures}")
    counts, edges = np.histogram(rep.u, bins=np.arange(-3, 3.5, 0.5))
    for c, lo in zip(counts, edges):
        print(f"  {lo:+.1f} {'#' * int(c)}")
    print()
