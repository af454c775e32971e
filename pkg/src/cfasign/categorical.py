"""
Two-step ordinal pipeline: thresholds, polychoric correlations, DWLS fit.

Thresholds come from the marginal proportions; each polychoric correlation
maximizes the bivariate-normal contingency likelihood with those
thresholds held fixed. The factor model is then fitted to the polychoric
matrix by (diagonally) weighted least squares on the latent-response
scale, where every latent response has unit variance.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.optimize import minimize_scalar
from scipy.special import ndtr, ndtri

from .datagen import Dataset, ThresholdSet
from .estimate_ml import FitOptions, FitResult, default_start_values, run_optimizer
from .exceptions import DataError, ModelError
from .model import IdentificationStrategy, ModelSpec, build_parameter_layout

__all__ = [
    "PolychoricSummary",
    "estimate_thresholds",
    "bivariate_normal_cdf",
    "estimate_polychoric",
    "polychoric_matrix",
    "wls_discrepancy",
    "fit_dwls",
    "write_polychoric_csv",
]

RHO_LIMIT = 1.0 - 1e-6
RHO_XTOL = 1e-8

# 20-point Gauss-Legendre rule mapped to [0, 2]
_GL_T, _GL_W = leggauss(20)
_GL_X = 1.0 + _GL_T
_TWO_PI = 2.0 * math.pi


def estimate_thresholds(column, categories: int) -> np.ndarray:
    """``v_c = Phi^-1(P(code < c))`` for ``c = 1..C-1``."""
    if categories < 2:
        raise DataError("need at least 2 categories")
    col = np.asarray(column)
    if col.size == 0:
        raise DataError("empty column")
    if col.min() < 0 or col.max() > categories - 1:
        raise DataError(f"codes outside 0..{categories - 1}")
    counts = np.bincount(col.astype(np.int64), minlength=categories)
    if np.any(counts == 0):
        empty = np.flatnonzero(counts == 0).tolist()
        raise DataError(f"degenerate category: no observations in {empty}")
    below = np.cumsum(counts)[:-1]
    above = col.size - below
    # use the smaller tail so that reversing the codes negates thresholds exactly
    return np.where(below <= above, ndtri(below / col.size), -ndtri(above / col.size))


def _bvn_upper(h, k, r: float) -> np.ndarray:
    """``P(X > h, Y > k)`` for finite ``h, k`` (Drezner-Wesolowsky/Genz)."""
    h, k = np.broadcast_arrays(np.asarray(h, dtype=float), np.asarray(k, dtype=float))
    hk = h * k
    if abs(r) < 0.925:
        hs = 0.5 * (h * h + k * k)
        asr = 0.5 * math.asin(r)
        sn = np.sin(asr * _GL_X)
        terms = np.exp((sn * hk[..., None] - hs[..., None]) / (1.0 - sn * sn))
        out = (terms @ _GL_W) * asr / _TWO_PI + ndtr(-h) * ndtr(-k)
        return np.clip(out, 0.0, 1.0)

    if r < 0:
        k = -k
        hk = -hk
    as_ = (1.0 - r) * (1.0 + r)
    a = math.sqrt(as_)
    bs = (h - k) ** 2
    c = (4.0 - hk) / 8.0
    d = (12.0 - hk) / 16.0
    asr = -0.5 * (bs / as_ + hk)
    with np.errstate(over="ignore", under="ignore"):
        bvn = np.where(asr > -100.0,
                       a * np.exp(asr) * (1.0 - c * (bs - as_) * (1.0 - d * bs / 5.0) / 3.0
                                          + c * d * as_ * as_ / 5.0),
                       0.0)
        b = np.sqrt(bs)
        sp = math.sqrt(_TWO_PI) * ndtr(-b / a)
        bvn = bvn - np.where(hk > -100.0,
                             np.exp(-0.5 * hk) * sp * b * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0),
                             0.0)
        a2 = 0.5 * a
        xs = (a2 * _GL_X) ** 2
        asr_q = -0.5 * (bs[..., None] / xs + hk[..., None])
        spq = 1.0 + c[..., None] * xs * (1.0 + d[..., None] * xs)
        rs = np.sqrt(1.0 - xs)
        ep = np.exp(-0.5 * hk[..., None] * xs / (1.0 + rs) ** 2) / rs
        q = np.where(asr_q > -100.0, np.exp(asr_q) * (spq - ep), 0.0)
        bvn = (a2 * (q @ _GL_W) - bvn) / _TWO_PI
    if r > 0:
        bvn = bvn + ndtr(-np.maximum(h, k))
    else:
        lower_tail = np.where(h < 0, ndtr(k) - ndtr(h), ndtr(-h) - ndtr(-k))
        bvn = np.where(h >= k, -bvn, lower_tail - bvn)
    return np.clip(bvn, 0.0, 1.0)


def bivariate_normal_cdf(a, b, rho: float):
    """
    ``P(Z1 <= a, Z2 <= b)`` for a standard bivariate normal with correlation ``rho``.

    Evaluated by 20-point Gauss-Legendre quadrature of the Drezner-Wesolowsky
    single-integral form (Genz's variant for ``|rho| >= 0.925``); absolute
    error is well below 1e-7. ``a`` and ``b`` broadcast and may be infinite.
    """
    if not abs(rho) < 1.0:
        raise ValueError(f"|rho| must be < 1, got {rho}")
    a_arr, b_arr = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    out = np.empty(a_arr.shape)
    fin = np.isfinite(a_arr) & np.isfinite(b_arr)
    if np.any(fin):
        out[fin] = _bvn_upper(-a_arr[fin], -b_arr[fin], rho)
    inf = ~fin
    if np.any(inf):
        ai, bi = a_arr[inf], b_arr[inf]
        out[inf] = np.where((ai == -np.inf) | (bi == -np.inf), 0.0, np.minimum(ndtr(ai), ndtr(bi)))
    return out if out.ndim else float(out)


def _contingency(x, y, cx: int, cy: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    if x.shape != y.shape:
        raise DataError("columns have different lengths")
    return np.bincount(x * cy + y, minlength=cx * cy).reshape(cx, cy).astype(float)


def _cell_probabilities(tx: np.ndarray, ty: np.ndarray, rho: float) -> np.ndarray:
    # cumulative grid over extended thresholds (-inf, v_1, ..., v_{C-1}, inf)
    F = np.zeros((tx.size + 2, ty.size + 2))
    F[1:-1, 1:-1] = bivariate_normal_cdf(tx[:, None], ty[None, :], rho)
    F[-1, 1:-1] = ndtr(ty)
    F[1:-1, -1] = ndtr(tx)
    F[-1, -1] = 1.0
    return F[1:, 1:] - F[:-1, 1:] - F[1:, :-1] + F[:-1, :-1]


@dataclass(frozen=True)
class PolychoricEstimate:
    rho: float
    boundary: bool
    loglik: float


def _fit_rho(table: np.ndarray, tx: np.ndarray, ty: np.ndarray) -> PolychoricEstimate:
    if np.count_nonzero(table.sum(axis=1)) < 2 or np.count_nonzero(table.sum(axis=0)) < 2:
        raise DataError("degenerate contingency table (all mass in one row or column)")
    # canonical orientation: swapping the columns or reversing both codings
    # describes the same likelihood and must give a bit-identical estimate
    variants = [(tx, ty, table), (ty, tx, table.T)]
    variants += [(-a[::-1], -b[::-1], t[::-1, ::-1]) for a, b, t in variants]
    variants = [(a + 0.0, b + 0.0, np.ascontiguousarray(t)) for a, b, t in variants]
    tx, ty, table = min(variants, key=lambda v: (v[0].size, tuple(v[0]), tuple(v[1]), v[2].tobytes()))

    mask = table > 0

    def negloglik(rho):
        p = _cell_probabilities(tx, ty, rho)
        return -float(np.sum(table[mask] * np.log(np.maximum(p[mask], 1e-300))))

    res = minimize_scalar(negloglik, bounds=(-RHO_LIMIT, RHO_LIMIT), method="bounded",
                          options={"xatol": RHO_XTOL})
    rho = float(res.x)
    boundary = abs(rho) >= RHO_LIMIT - 10 * RHO_XTOL
    if boundary:
        rho = math.copysign(RHO_LIMIT, rho)
    return PolychoricEstimate(rho, boundary, -negloglik(rho))


def estimate_polychoric(col_i, col_j, thr_i, thr_j, with_flag: bool = False):
    """
    Two-step polychoric correlation of two ordinal columns.

    Returns ``rho`` (or ``(rho, at_boundary)`` with ``with_flag=True``).
    Estimates are confined to ``|rho| <= 1 - 1e-6``; hitting that limit
    sets the boundary flag.
    """
    tx = np.asarray(thr_i, dtype=float)
    ty = np.asarray(thr_j, dtype=float)
    table = _contingency(col_i, col_j, tx.size + 1, ty.size + 1)
    est = _fit_rho(table, tx, ty)
    return (est.rho, est.boundary) if with_flag else est.rho


@dataclass(frozen=True)
class PolychoricSummary:
    """Thresholds, polychoric matrix and weights over the upper-triangle correlations."""

    thresholds: ThresholdSet
    correlation: np.ndarray
    weight_diag: np.ndarray
    boundary_pairs: tuple = field(default=())

    def __post_init__(self):
        r = np.asarray(self.correlation)
        p = r.shape[0]
        if r.shape != (p, p) or not np.array_equal(r, r.T) or not np.all(np.diag(r) == 1.0):
            raise DataError("correlation matrix must be symmetric with unit diagonal")
        off = r[np.triu_indices(p, 1)]
        if np.any(np.abs(off) >= 1.0):
            raise DataError("correlations must lie strictly inside (-1, 1)")
        w = np.asarray(self.weight_diag, dtype=float)
        if w.shape != off.shape or np.any(w <= 0):
            raise DataError("weight_diag needs one positive weight per correlation")

    @property
    def variables(self) -> tuple:
        return self.thresholds.variables

    @property
    def correlation_vector(self) -> np.ndarray:
        p = self.correlation.shape[0]
        return self.correlation[np.triu_indices(p, 1)]

    def with_weights(self, weight_diag) -> "PolychoricSummary":
        return PolychoricSummary(self.thresholds, self.correlation, np.asarray(weight_diag, dtype=float),
                                 self.boundary_pairs)


def polychoric_matrix(data: Dataset) -> PolychoricSummary:
    """Thresholds and pairwise polychoric correlations with unit weights."""
    if not data.is_ordinal:
        raise DataError("polychoric correlations need ordinal data")
    thresholds = []
    for j, name in enumerate(data.variables):
        try:
            thresholds.append(estimate_thresholds(data.values[:, j], data.categories[j]))
        except DataError as exc:
            raise DataError(f"variable {j} ({name}): {exc}") from None
    p = data.p
    R = np.eye(p)
    boundary = []
    for i in range(p):
        for j in range(i + 1, p):
            table = _contingency(data.values[:, i], data.values[:, j],
                                 data.categories[i], data.categories[j])
            try:
                est = _fit_rho(table, thresholds[i], thresholds[j])
            except DataError as exc:
                raise DataError(f"pair ({i}, {j}): {exc}") from None
            R[i, j] = R[j, i] = est.rho
            if est.boundary:
                boundary.append((i, j))
    tset = ThresholdSet(tuple(data.variables), tuple(tuple(map(float, t)) for t in thresholds))
    return PolychoricSummary(tset, R, np.ones(p * (p - 1) // 2), tuple(boundary))


def wls_discrepancy(s, sigma, w_diag) -> float:
    """``sum_k (s_k - sigma_k)**2 / w_k``."""
    s = np.asarray(s, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    w = np.asarray(w_diag, dtype=float)
    if not (s.shape == sigma.shape == w.shape):
        raise DataError(f"length mismatch: {s.shape}, {sigma.shape}, {w.shape}")
    if np.any(w <= 0):
        raise DataError("weights must be positive")
    r = s - sigma
    return float(np.sum(r * r / w))


class DwlsObjective:
    def __init__(self, layout, summary: PolychoricSummary):
        self.layout = layout
        p = len(layout.indicators)
        self.iu = np.triu_indices(p, 1)
        self.s = summary.correlation_vector
        self.w = np.asarray(summary.weight_diag, dtype=float)

    def _resid(self, theta):
        lam, phi, _ = self.layout.matrices(theta)
        return lam, phi, self.s - (lam @ phi @ lam.T)[self.iu]

    def __call__(self, theta) -> float:
        _, _, r = self._resid(theta)
        return float(np.sum(r * r / self.w))

    def gradient(self, theta) -> np.ndarray:
        lam, phi, r = self._resid(theta)
        p = lam.shape[0]
        G = np.zeros((p, p))
        G[self.iu] = -r / self.w
        G = G + G.T
        return self.layout.chain_rule(2.0 * G @ lam @ phi, lam.T @ G @ lam, np.zeros(p))


def fit_dwls(spec: ModelSpec, summary: PolychoricSummary, options: Optional[FitOptions] = None,
             strategy: Optional[IdentificationStrategy] = None) -> FitResult:
    """
    Fit ``spec`` to a polychoric summary by diagonally weighted least squares.

    Only the off-diagonal correlations enter the discrepancy. Residual
    variances are not free: they are reported as ``1 - diag(Lambda Phi Lambda')``
    so that every latent response has unit variance.
    """
    options = options or FitOptions()
    strategy = strategy or IdentificationStrategy.fixed_variance()
    if not spec.all_ordinal:
        raise ModelError("DWLS fitting needs every indicator declared ordinal")
    if tuple(spec.indicator_names) != tuple(summary.variables):
        raise DataError("summary variables do not match the model indicators")
    for ind, thr in zip(spec.indicators, summary.thresholds.values):
        if len(thr) != ind.categories - 1:
            raise DataError(f"{ind.name}: {len(thr)} thresholds for {ind.categories} categories")
    layout = build_parameter_layout(spec, strategy, options.start_policy)
    obj = DwlsObjective(layout, summary)
    x0 = default_start_values(layout, options.start_policy, summary.correlation)
    fit = run_optimizer(layout, obj, obj.gradient, x0, options,
                        ("loading", "factor_variance", "factor_covariance"), method="dwls")

    lam, phi, _ = layout.matrices(fit.theta)
    unique = 1.0 - np.diag(lam @ phi @ lam.T)
    theta = fit.theta.copy()
    estimates = dict(fit.estimates)
    for i, x in enumerate(layout.indicators):
        key = ("residual_variance", (x,))
        estimates[key] = float(unique[i])
        if key in layout.index:
            theta[layout.index[key]] = unique[i]
    for k, e in enumerate(layout.free_entries):
        if e.role == "intercept":
            theta[k] = 0.0
            estimates[(e.role, e.address)] = 0.0
    return FitResult(
        layout=layout, theta=theta, estimates=estimates, discrepancy=fit.discrepancy,
        start_discrepancy=fit.start_discrepancy, converged=fit.converged, iterations=fit.iterations,
        gradient_inf_norm=fit.gradient_inf_norm, active_bounds=fit.active_bounds,
        zero_loadings=fit.zero_loadings, message=fit.message, method="dwls",
    )


def write_polychoric_csv(summary: PolychoricSummary, stream) -> None:
    """Threshold table, blank line, then the correlation matrix with a header row."""
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(["variable", "index", "threshold"])
    for name, thr in zip(summary.variables, summary.thresholds.values):
        for c, v in enumerate(thr, start=1):
            w.writerow([name, c, repr(float(v))])
    w.writerow([])
    w.writerow([""] + list(summary.variables))
    for name, row in zip(summary.variables, summary.correlation):
        w.writerow([name] + [repr(float(v)) for v in row])
