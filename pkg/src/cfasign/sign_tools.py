"""Directional consistency of loading estimates and anchor selection."""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .exceptions import ModelError
from .model import IdentificationStrategy, ModelSpec

__all__ = ["DcrRecord", "FlipClass", "sign_of", "dcr", "classify_flip", "anchor_reorder", "solution1"]


class FlipClass(enum.Enum):
    MATCH = "match"
    GLOBAL_FLIP = "global_flip"
    MIXED = "mixed"


@dataclass(frozen=True)
class DcrRecord:
    """Sign agreement of one loading across replicates; ``dcr = 100 * M / N``."""

    index: int
    truth: float
    M: int
    N: int
    zero_ties: int = 0

    @property
    def dcr(self) -> float:
        return 100.0 * self.M / self.N if self.N else float("nan")


def sign_of(values) -> np.ndarray:
    """+1 / -1 signs; an estimate of exactly zero counts as positive."""
    return np.where(np.asarray(values, dtype=float) >= 0.0, 1, -1)


def _check_truth(truth):
    truth = np.asarray(truth, dtype=float)
    if np.any(truth == 0):
        raise ValueError("true loadings must be non-zero")
    return truth


def dcr(estimates: Sequence, truth, free_mask=None) -> list:
    """
    Per-loading directional consistency over a batch of estimates.

    Parameters
    ----------
    estimates : sequence of array_like
        One loading vector per replicate.
    truth : array_like
        True loadings (non-zero).
    free_mask : array_like of bool, optional
        Loadings to report; fixed loadings are left out.
    """
    truth = _check_truth(truth)
    est = np.asarray(estimates, dtype=float)
    if est.ndim == 1 and est.size == 0:
        est = est.reshape(0, truth.size)
    if est.ndim != 2 or est.shape[1] != truth.size:
        raise ValueError(f"estimates have shape {est.shape}, expected (n, {truth.size})")
    mask = np.ones(truth.size, bool) if free_mask is None else np.asarray(free_mask, bool)
    match = sign_of(est) == sign_of(truth)
    ties = est == 0.0
    return [
        DcrRecord(int(j), float(truth[j]), int(match[:, j].sum()), est.shape[0], int(ties[:, j].sum()))
        for j in range(truth.size) if mask[j]
    ]


def classify_flip(estimate, truth, free_mask=None) -> FlipClass:
    """Match, global flip, or mixed sign pattern over the free loadings."""
    truth = _check_truth(truth)
    estimate = np.asarray(estimate, dtype=float)
    if estimate.shape != truth.shape:
        raise ValueError(f"estimate length {estimate.size} != truth length {truth.size}")
    mask = np.ones(truth.size, bool) if free_mask is None else np.asarray(free_mask, bool)
    same = sign_of(estimate[mask]) == sign_of(truth[mask])
    if same.all():
        return FlipClass.MATCH
    if not same.any():
        return FlipClass.GLOBAL_FLIP
    return FlipClass.MIXED


def anchor_reorder(spec: ModelSpec, anchor) -> ModelSpec:
    """
    Make ``anchor`` the fixed-at-1 loading of its factor.

    All other directives are kept. Use with
    ``IdentificationStrategy.fixed_anchor(anchor)`` (see :func:`solution1`)
    so the factor variance is estimated.
    """
    f, x = anchor
    if (f, x) not in spec.loadings:
        raise ModelError(f"unknown anchor {f}.{x}")
    current = spec.loadings[(f, x)]
    if current is not None and current != 1.0:
        raise ModelError(f"anchor {f}.{x} is already fixed at {current}")
    if current == 1.0:
        return spec
    loadings = dict(spec.loadings)
    loadings[(f, x)] = 1.0
    starts = {k: v for k, v in spec.loading_starts.items() if k != (f, x)}
    return replace(spec, loadings=loadings, loading_starts=starts)


def solution1(spec: ModelSpec, anchor) -> tuple:
    """Spec and identification strategy with ``anchor`` fixed at 1 and the factor variance free."""
    return anchor_reorder(spec, anchor), IdentificationStrategy.fixed_anchor(tuple(anchor))


def known_positive(truth, names: Sequence[str], factor: str = "F") -> Optional[tuple]:
    """Last indicator with a positive true loading, or ``None``."""
    for name, v in zip(reversed(list(names)), reversed(list(truth))):
        if v > 0:
            return (factor, name)
    return None
