"""
Maximum-likelihood fitting of a factor model to a sample covariance matrix.

The discrepancy is ``log|Sigma| - log|S| + tr(S Sigma^-1) - p``, minimized
over the free covariance-structure parameters by :func:`~cfasign.optimize.minimize_box`
with an analytic gradient. Intercepts are not part of the discrepancy;
they are reported as the sample means when these are supplied.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .exceptions import DataError, EstimationError, ModelError, NotPositiveDefiniteError
from .model import (
    IdentificationStrategy,
    ModelSpec,
    ParameterLayout,
    build_parameter_layout,
    implied_covariance,
)
from .optimize import minimize_box

__all__ = [
    "EngineDefault",
    "UniformLoading",
    "PerLoading",
    "FitOptions",
    "FitResult",
    "ml_discrepancy",
    "numerical_gradient",
    "default_start_values",
    "MlObjective",
    "fit_ml",
    "population_layout",
    "run_optimizer",
]

#: start value for free loadings under the engine-default policy
ENGINE_DEFAULT_LOADING = 0.5
#: minimum distance a start is moved inside a bound it violates or touches
START_MARGIN = 0.1


@dataclass(frozen=True)
class EngineDefault:
    """
    Engine starting values.

    Loadings 0.5 on factors with a fixed variance; on a factor scaled by an
    anchor loading ``a``, loading ``j`` starts at ``S[a, j] / S[a, a]``.
    Residual variances start at half the observed variances, factor
    variances at 1.
    """


@dataclass(frozen=True)
class UniformLoading:
    value: float


@dataclass(frozen=True)
class PerLoading:
    values: Mapping[tuple, float]

    @classmethod
    def matching_signs(cls, spec: ModelSpec, truth: Mapping[tuple, float], magnitude: float = 1.0) -> "PerLoading":
        """Starts of ``+magnitude`` / ``-magnitude`` following the sign of each true loading."""
        return cls({key: math.copysign(magnitude, truth[key]) for key in spec.loadings if key in truth})


@dataclass(frozen=True)
class FitOptions:
    start_policy: object = field(default_factory=EngineDefault)
    max_iterations: int = 1000
    gradient_tolerance: float = 1e-6
    step_tolerance: float = 1e-10

    def __post_init__(self):
        if not (self.gradient_tolerance > 0 and self.step_tolerance > 0):
            raise ValueError("tolerances must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


@dataclass(frozen=True)
class FitResult:
    """
    Outcome of a single fit.

    ``estimates`` maps ``(role, address)`` to the resolved value of every
    layout entry, fixed ones included. ``zero_loadings`` lists free
    loadings estimated at exactly 0; sign counting treats them as positive.
    """

    layout: ParameterLayout
    theta: np.ndarray
    estimates: dict
    discrepancy: float
    start_discrepancy: float
    converged: bool
    iterations: int
    gradient_inf_norm: float
    active_bounds: list
    zero_loadings: list
    message: str
    method: str = "ml"

    @property
    def loadings(self) -> dict:
        return {e.address: self.estimates[("loading", e.address)] for e in self.layout.loading_entries}

    def loading_vector(self, factor: Optional[str] = None) -> np.ndarray:
        """Loadings of one factor (default: the first) in indicator order."""
        factor = factor or self.layout.factors[0]
        return np.array([v for (f, _), v in self.loadings.items() if f == factor])

    def free_loading_mask(self, factor: Optional[str] = None) -> np.ndarray:
        factor = factor or self.layout.factors[0]
        return np.array([e.free for e in self.layout.loading_entries if e.address[0] == factor])

    @property
    def residual_variances(self) -> np.ndarray:
        return np.array([self.estimates[("residual_variance", (x,))] for x in self.layout.indicators])

    def factor_variance(self, factor: Optional[str] = None) -> float:
        factor = factor or self.layout.factors[0]
        return self.estimates[("factor_variance", (factor,))]


# -- discrepancy ---------------------------------------------------------------

def _chol(m, what):
    try:
        return cho_factor(m, lower=True, check_finite=True)
    except (LinAlgError, ValueError):
        raise NotPositiveDefiniteError(f"{what} is not positive definite") from None


def _logdet(c) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(c[0]))))


def ml_discrepancy(S, sigma) -> float:
    """
    ``log|Sigma| - log|S| + tr(S Sigma^-1) - p``.

    Raises
    ------
    DataError
        ``S`` is not positive definite or shapes differ.
    NotPositiveDefiniteError
        ``sigma`` is singular or indefinite.
    """
    S = np.asarray(S, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if S.shape != sigma.shape or S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise DataError(f"shape mismatch: S {S.shape}, Sigma {sigma.shape}")
    try:
        cs = _chol(S, "sample covariance")
    except NotPositiveDefiniteError as exc:
        raise DataError(str(exc)) from None
    cz = _chol(sigma, "implied covariance")
    return _logdet(cz) - _logdet(cs) + float(np.trace(cho_solve(cz, S))) - S.shape[0]


def numerical_gradient(f, theta, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient ``(f(t + h e_i) - f(t - h e_i)) / 2h``."""
    if not h > 0:
        raise ValueError("step h must be positive")
    theta = np.asarray(theta, dtype=float)
    g = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        fp, fm = f(theta + e), f(theta - e)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EstimationError(f"non-finite function value at coordinate {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return g


class MlObjective:
    """ML discrepancy and its analytic gradient over a layout's free vector."""

    def __init__(self, layout: ParameterLayout, S):
        self.layout = layout
        self.S = np.asarray(S, dtype=float)
        p = len(layout.indicators)
        if self.S.shape != (p, p):
            raise DataError(f"S has shape {self.S.shape}, model has {p} indicators")
        try:
            self._logdet_s = _logdet(_chol(self.S, "sample covariance"))
        except NotPositiveDefiniteError as exc:
            raise DataError(str(exc)) from None
        self._diag = np.arange(p)
        self._eye = np.eye(p)

    def _sigma(self, theta):
        lam, phi, psi = self.layout.matrices(theta)
        sigma = lam @ phi @ lam.T
        sigma = 0.5 * (sigma + sigma.T)
        sigma[self._diag, self._diag] += psi
        return lam, phi, sigma

    def _inverse(self, sigma):
        # (log|Sigma|, Sigma^-1), or None when Sigma is not positive definite
        try:
            L = np.linalg.cholesky(sigma)
        except np.linalg.LinAlgError:
            return None
        d = np.diag(L)
        if not np.all(d > 0):
            return None
        Linv = np.linalg.solve(L, self._eye)
        return 2.0 * float(np.sum(np.log(d))), Linv.T @ Linv

    def __call__(self, theta) -> float:
        _, _, sigma = self._sigma(theta)
        inv = self._inverse(sigma)
        if inv is None:
            return math.inf
        logdet, sinv = inv
        return logdet - self._logdet_s + float(np.sum(self.S * sinv)) - self.S.shape[0]

    def gradient(self, theta) -> np.ndarray:
        lam, phi, sigma = self._sigma(theta)
        inv = self._inverse(sigma)
        if inv is None:
            raise NotPositiveDefiniteError("implied covariance is not positive definite")
        sinv = inv[1]
        G = sinv - sinv @ self.S @ sinv
        G = 0.5 * (G + G.T)
        return self.layout.chain_rule(2.0 * G @ lam @ phi, lam.T @ G @ lam, G[self._diag, self._diag])


# -- starts & fitting ------------------------------------------------------------

def _interior(start: float, lo: float, hi: float) -> float:
    if lo < start < hi:
        return start
    if math.isfinite(lo) and math.isfinite(hi):
        return 0.5 * (lo + hi)
    if start >= hi:
        return hi - max(start - hi, START_MARGIN)
    return lo + max(lo - start, START_MARGIN)


def default_start_values(layout: ParameterLayout, policy, S=None) -> np.ndarray:
    """
    Start vector over the layout's free entries.

    Free loadings follow ``policy`` unless the model gave an explicit start;
    under :class:`EngineDefault`, loadings on an anchored factor start at
    the anchor's regression ``S[a, j] / S[a, a]`` when ``S`` is given.
    Residual variances start at half the observed variance (0.5 without
    ``S``), factor variances at 1, covariances and intercepts at 0. Starts
    on or outside a bound are moved inside it (reflected across a single
    finite bound, midpoint of a finite interval).
    """
    if policy is None:
        policy = EngineDefault()
    if S is not None:
        S = np.asarray(S, dtype=float)
    diag = None if S is None else np.diag(S)
    xi = {x: i for i, x in enumerate(layout.indicators)}
    out = []
    for e in layout.free_entries:
        if e.role == "loading":
            if e.user_start:
                v = e.start
            elif isinstance(policy, UniformLoading):
                v = policy.value
            elif isinstance(policy, PerLoading):
                if e.address not in policy.values:
                    raise ModelError(f"per-loading start policy does not cover {'.'.join(e.address)}")
                v = policy.values[e.address]
            elif S is not None and e.address[0] in layout.anchors:
                a = xi[layout.anchors[e.address[0]]]
                v = S[a, xi[e.address[1]]] / S[a, a]
            else:
                v = ENGINE_DEFAULT_LOADING
        elif e.role == "residual_variance":
            v = 0.5 if diag is None else 0.5 * diag[xi[e.address[0]]]
        elif e.role == "factor_variance":
            v = 1.0
        else:
            v = 0.0
        out.append(_interior(float(v), e.lower, e.upper))
    return np.array(out, dtype=float)


def run_optimizer(layout: ParameterLayout, objective, gradient, x0, options: FitOptions,
                  optimize_roles, fixed_theta=None, method="ml") -> FitResult:
    """
    Minimize over the free entries whose role is in ``optimize_roles``.

    The remaining free entries keep their value from ``fixed_theta``
    (default ``x0``). Shared by the ML and DWLS fits.
    """
    x0 = np.asarray(x0, dtype=float)
    theta = (x0 if fixed_theta is None else np.asarray(fixed_theta, dtype=float)).copy()
    idx = np.array([k for k, e in enumerate(layout.free_entries) if e.role in optimize_roles], dtype=int)

    def expand(z):
        t = theta.copy()
        t[idx] = z
        return t

    f = lambda z: objective(expand(z))
    g = lambda z: gradient(expand(z))[idx]
    z0 = x0[idx]
    if not np.isfinite(f(z0)):
        raise EstimationError("implied covariance is not positive definite at the start values")
    res = minimize_box(f, g, z0, layout.lower[idx], layout.upper[idx],
                       max_iter=options.max_iterations, gtol=options.gradient_tolerance,
                       xtol=options.step_tolerance)
    theta_hat = expand(res.x)
    labels = [layout.free_entries[k].label for k in idx[res.active]]
    estimates = layout.values(theta_hat)
    zeros = [e.label for e in layout.loading_entries if e.free and estimates[("loading", e.address)] == 0.0]
    return FitResult(
        layout=layout, theta=theta_hat, estimates=estimates, discrepancy=float(res.fun),
        start_discrepancy=float(res.start_fun), converged=res.converged, iterations=res.iterations,
        gradient_inf_norm=res.gradient_inf_norm, active_bounds=labels, zero_loadings=zeros,
        message=res.message, method=method,
    )


COVARIANCE_ROLES = ("loading", "factor_variance", "factor_covariance", "residual_variance")


def fit_ml(spec: ModelSpec, strategy: IdentificationStrategy, S, n: int, options: Optional[FitOptions] = None,
           means=None) -> FitResult:
    """
    Fit ``spec`` to the sample covariance ``S`` by maximum likelihood.

    Returns a local minimizer reached from the start policy in
    ``options``; which of two mirror-image solutions is found depends on
    those starts, the identification strategy and any loading bounds.
    ``n`` is the sample size (checked, not used by the point estimates).
    """
    options = options or FitOptions()
    if n < 2:
        raise DataError("sample size must be at least 2")
    layout = build_parameter_layout(spec, strategy, options.start_policy)
    obj = MlObjective(layout, S)
    x0 = default_start_values(layout, options.start_policy, obj.S)
    if means is not None:
        means = np.asarray(means, dtype=float)
        for k, e in enumerate(layout.free_entries):
            if e.role == "intercept":
                x0[k] = means[layout.indicators.index(e.address[0])]
    return run_optimizer(layout, obj, obj.gradient, x0, options, COVARIANCE_ROLES)


def population_layout(spec: ModelSpec, loadings, residual_variances=None):
    """
    Layout and parameter vector of a single-factor population model.

    The factor variance is 1, residual variances default to
    ``1 - lambda**2`` (unit indicator variances) and intercepts are 0.
    """
    if len(spec.factors) != 1:
        raise ModelError("population_layout handles single-factor models")
    layout = build_parameter_layout(spec, IdentificationStrategy.fixed_variance(), UniformLoading(0.0))
    loadings = np.asarray(loadings, dtype=float)
    if residual_variances is None:
        residual_variances = 1.0 - loadings ** 2
    residual_variances = np.asarray(residual_variances, dtype=float)
    theta = np.zeros(layout.n_free)
    for k, e in enumerate(layout.free_entries):
        if e.role == "loading":
            theta[k] = loadings[layout.indicators.index(e.address[1])]
        elif e.role == "residual_variance":
            theta[k] = residual_variances[layout.indicators.index(e.address[0])]
    implied_covariance(layout, theta)
    return layout, theta
