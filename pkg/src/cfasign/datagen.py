"""
Sampling from a population factor model and ordinal discretization.

Random numbers come from numpy's PCG64 bit generator seeded with a 64-bit
integer. Normal variates are produced by the inverse normal CDF applied to
PCG64 uniforms, so a (seed, n, p) triple gives the same draws on every
platform. Replicate ``r`` of a batch uses seed ``base_seed ^ r``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import ndtri

from .exceptions import DataError, NotPositiveDefiniteError
from .model import ParameterLayout, implied_covariance

__all__ = [
    "Dataset",
    "ThresholdSet",
    "cholesky_factor",
    "replicate_seed",
    "standard_normal",
    "generate_continuous",
    "discretize_to_ordinal",
    "sample_covariance",
    "read_csv",
    "write_csv",
]

SEED_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class Dataset:
    """
    Complete rectangular data.

    ``values`` is ``n x p`` float for continuous variables; ordinal columns
    hold integer codes ``0..C-1``. ``categories[j]`` is ``None`` for a
    continuous column.
    """

    values: np.ndarray
    variables: tuple
    categories: tuple

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2 or v.shape[1] != len(self.variables):
            raise DataError(f"values shape {v.shape} does not match {len(self.variables)} variables")
        if v.shape[0] < 1:
            raise DataError("dataset has no rows")
        if len(self.categories) != len(self.variables):
            raise DataError("categories must have one entry per variable")
        if np.issubdtype(v.dtype, np.floating) and np.isnan(v).any():
            raise DataError("dataset contains missing cells")
        for j, c in enumerate(self.categories):
            if c is not None:
                col = v[:, j]
                if np.any(col != np.round(col)) or col.min() < 0 or col.max() > c - 1:
                    raise DataError(f"ordinal codes of {self.variables[j]} outside 0..{c - 1}")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    @property
    def is_ordinal(self) -> bool:
        return all(c is not None for c in self.categories)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.variables.index(name)]

    def reversed_codes(self) -> "Dataset":
        """Ordinal dataset with every code ``x`` replaced by ``C - 1 - x``."""
        if not self.is_ordinal:
            raise DataError("code reversal needs ordinal data")
        c = np.array(self.categories)
        return Dataset(c - 1 - self.values, self.variables, self.categories)


@dataclass(frozen=True)
class ThresholdSet:
    """Finite thresholds ``v_1 < ... < v_{C-1}`` for each variable."""

    variables: tuple
    values: tuple

    def __post_init__(self):
        if len(self.variables) != len(self.values):
            raise DataError("one threshold vector per variable required")
        for name, thr in zip(self.variables, self.values):
            thr = np.asarray(thr, dtype=float)
            if thr.size < 1:
                raise DataError(f"{name}: need at least one threshold")
            if not np.all(np.isfinite(thr)):
                raise DataError(f"{name}: thresholds must be finite")
            if np.any(np.diff(thr) <= 0):
                raise DataError(f"{name}: thresholds not increasing")

    @classmethod
    def uniform(cls, variables: Sequence[str], thresholds: Sequence[float]) -> "ThresholdSet":
        return cls(tuple(variables), tuple(tuple(float(t) for t in thresholds) for _ in variables))

    def categories(self, name: str) -> int:
        return len(self.values[self.variables.index(name)]) + 1


def cholesky_factor(m) -> np.ndarray:
    """
    Lower-triangular ``L`` with ``L @ L.T == m``.

    Raises :class:`NotPositiveDefiniteError` naming the first leading
    minor that fails.
    """
    a = np.asarray(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DataError(f"expected a square matrix, got shape {a.shape}")
    if not np.allclose(a, a.T, rtol=0, atol=1e-12 * max(1.0, np.max(np.abs(a), initial=0.0))):
        raise DataError("matrix is not symmetric")
    p = a.shape[0]
    L = np.zeros_like(a)
    for j in range(p):
        d = a[j, j] - L[j, :j] @ L[j, :j]
        if not d > 0:
            raise NotPositiveDefiniteError(
                f"matrix is not positive definite (leading minor {j + 1} fails)", index=j)
        L[j, j] = math.sqrt(d)
        L[j + 1:, j] = (a[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return L


def replicate_seed(base_seed: int, replicate: int) -> int:
    return (int(base_seed) ^ int(replicate)) & SEED_MASK


def standard_normal(seed: int, shape) -> np.ndarray:
    """Standard normal draws via the inverse CDF of PCG64 uniforms."""
    rng = np.random.Generator(np.random.PCG64(int(seed) & SEED_MASK))
    u = rng.random(shape)
    # random() lies on a 2**-53 grid in [0, 1); shift to the cell midpoint to exclude 0
    return ndtri(u + 2.0 ** -54)


def generate_continuous(layout: ParameterLayout, theta, n: int, seed: int) -> Dataset:
    """Draw ``n`` rows from ``N(intercepts, Sigma(theta))``."""
    if n < 1:
        raise DataError("n must be at least 1")
    sigma = implied_covariance(layout, theta)
    L = cholesky_factor(sigma)
    values = layout.values(theta)
    mu = np.array([values[("intercept", (x,))] for x in layout.indicators])
    z = standard_normal(seed, (n, len(layout.indicators)))
    x = mu + z @ L.T
    return Dataset(x, tuple(layout.indicators), (None,) * len(layout.indicators))


def discretize_to_ordinal(data: Dataset, thresholds: ThresholdSet) -> Dataset:
    """Code ``c`` for ``v_c <= x* < v_{c+1}``."""
    if tuple(thresholds.variables) != tuple(data.variables):
        if len(thresholds.variables) != data.p:
            raise DataError(f"{len(thresholds.variables)} threshold vectors for {data.p} variables")
        raise DataError("threshold variables do not match dataset variables")
    if any(c is not None for c in data.categories):
        raise DataError("discretization needs continuous data")
    codes = np.empty(data.values.shape, dtype=np.int64)
    for j, thr in enumerate(thresholds.values):
        codes[:, j] = np.searchsorted(np.asarray(thr), data.values[:, j], side="right")
    cats = tuple(len(t) + 1 for t in thresholds.values)
    return Dataset(codes, data.variables, cats)


def discretize_checked(data: Dataset, thresholds: ThresholdSet, declared: Sequence[Optional[int]]) -> Dataset:
    """Like :func:`discretize_to_ordinal`, checking threshold counts against declared categories."""
    for name, thr, c in zip(thresholds.variables, thresholds.values, declared):
        if c is not None and len(thr) != c - 1:
            raise DataError(f"{name}: {len(thr)} thresholds for {c} categories")
    return discretize_to_ordinal(data, thresholds)


def sample_covariance(data: Dataset) -> np.ndarray:
    """Unbiased (``n - 1``) sample covariance matrix."""
    if data.n < 2:
        raise DataError("sample covariance needs at least 2 rows")
    x = np.asarray(data.values, dtype=float)
    xc = x - x.mean(axis=0)
    s = xc.T @ xc / (data.n - 1)
    return 0.5 * (s + s.T)


def write_csv(data: Dataset, stream) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(data.variables)
    if data.is_ordinal:
        for row in np.asarray(data.values, dtype=np.int64):
            w.writerow([int(v) for v in row])
    else:
        for row in data.values:
            w.writerow([repr(float(v)) for v in row])


def read_csv(source, categories=None) -> Dataset:
    """
    Read a dataset CSV (header of names, one row per observation).

    ``categories`` maps variable name to category count for ordinal
    columns; when omitted, all-integer files are read as continuous.
    """
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        with open(source, newline="", encoding="utf-8") as fh:
            return read_csv(fh, categories)
    reader = csv.reader(source)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError("empty CSV") from None
    rows = [r for r in reader if r and any(c.strip() for c in r)]
    try:
        values = np.array([[float(c) for c in r] for r in rows], dtype=float)
    except ValueError as exc:
        raise DataError(f"non-numeric or missing cell: {exc}") from None
    if values.ndim != 2 or values.shape[1] != len(header):
        raise DataError("ragged CSV rows")
    categories = categories or {}
    cats = tuple(categories.get(h) for h in header)
    if all(c is not None for c in cats):
        values = values.astype(np.int64)
    return Dataset(values, tuple(header), cats)


def dataset_to_text(data: Dataset) -> str:
    buf = io.StringIO()
    write_csv(data, buf)
    return buf.getvalue()
