"""
===============================
Two solutions, one discrepancy
===============================

With the factor variance fixed at 1, a loading vector and its negation
imply the same covariance matrix. The ML discrepancy therefore has two
equally good minima, and the starting values decide which one the
optimizer reports.
"""

# %%
# A three-indicator population
# ----------------------------
#
# Every loading is 0.7 and the residual variances are 0.51, so each
# indicator has unit variance and every covariance is 0.49.

import numpy as np

from cfasign.datagen import generate_continuous, sample_covariance
from cfasign.estimate_ml import FitOptions, MlObjective, UniformLoading, fit_ml, population_layout
from cfasign.model import IdentificationStrategy, implied_covariance, one_factor_spec

spec = one_factor_spec(3)
layout, theta = population_layout(spec, [0.7, 0.7, 0.7])
print(implied_covariance(layout, theta))

# %%
# Flip every loading: nothing changes
# -----------------------------------

flipped = theta.copy()
flipped[layout.positions("loading")] *= -1
print("identical:", np.array_equal(implied_covariance(layout, theta), implied_covariance(layout, flipped)))

# %%
# Scan the discrepancy along one loading
# --------------------------------------
#
# Hold the other two loadings at their fitted values (with matching sign)
# and move the first one. The curve is symmetric around zero.

data = generate_continuous(layout, theta, 200, seed=1)
S = sample_covariance(data)
fixvar = IdentificationStrategy.fixed_variance()
fit = fit_ml(spec, fixvar, S, data.n, FitOptions(UniformLoading(1.0)))
obj = MlObjective(fit.layout, S)

grid = np.linspace(-1.2, 1.2, 13)
for v in grid:
    t = fit.theta.copy()
    k = fit.layout.index[("loading", ("F", "x1"))]
    others = [fit.layout.index[("loading", ("F", x))] for x in ("x2", "x3")]
    t[k] = v
    t[others] = np.sign(v or 1.0) * np.abs(fit.theta[others])
    print(f"lambda1 = {v:+.1f}   F = {obj(t):.4f}")

# %%
# Starting values pick the side
# -----------------------------

for start in (1.0, -1.0, 0.5):
    fit = fit_ml(spec, fixvar, S, data.n, FitOptions(UniformLoading(start)))
    print(f"start {start:+.1f}: loadings {np.round(fit.loading_vector(), 3)}  F = {fit.discrepancy:.6f}")
