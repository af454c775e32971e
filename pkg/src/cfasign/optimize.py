"""
Projected BFGS for box-constrained minimization.

The objective may return ``inf`` (e.g. a non positive definite implied
covariance); the line search treats that as a failed trial and halves the
step. Coordinates sitting on a bound with the gradient pointing outward
are held fixed for the iteration; the inverse-Hessian approximation is
reset whenever that active set changes.
"""

from dataclasses import dataclass, field

import numpy as np

__all__ = ["BoxResult", "minimize_box", "projected_gradient"]

ARMIJO = 1e-4
MAX_HALVINGS = 30


@dataclass
class BoxResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    converged: bool
    iterations: int
    n_evals: int
    gradient_inf_norm: float
    active: np.ndarray
    message: str
    start_fun: float = field(default=np.nan)


def _active_set(x, g, lower, upper, eps=0.0):
    at_lo = (x <= lower + eps) & (g > 0)
    at_hi = (x >= upper - eps) & (g < 0)
    return at_lo | at_hi


def projected_gradient(x, g, lower, upper) -> np.ndarray:
    """Gradient with components blocked by an active bound set to zero."""
    pg = np.array(g, dtype=float)
    pg[_active_set(x, g, lower, upper)] = 0.0
    return pg


def minimize_box(fun, grad, x0, lower, upper, max_iter=500, gtol=1e-6, xtol=1e-10) -> BoxResult:
    """
    Minimize ``fun`` subject to ``lower <= x <= upper``.

    Parameters
    ----------
    fun : callable
        Objective; may return ``inf`` outside its domain.
    grad : callable
        Gradient of ``fun``; only called where ``fun`` is finite.
    x0 : array_like
        Start vector, projected into the box.
    gtol : float
        Convergence when the infinity norm of the projected gradient
        drops to ``gtol`` or below.
    xtol : float
        Convergence when an accepted step is smaller than
        ``xtol * (1 + |x|)`` in the infinity norm.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    x = np.clip(np.asarray(x0, dtype=float), lower, upper)
    n = x.size
    f = fun(x)
    n_evals = 1
    if not np.isfinite(f):
        return BoxResult(x, f, np.full(n, np.nan), False, 0, n_evals, np.inf,
                         np.zeros(n, bool), "objective undefined at start", f)
    f0 = f
    g = grad(x)
    H, fresh = np.eye(n), True
    active = _active_set(x, g, lower, upper)
    message = "iteration limit reached"
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        pg = projected_gradient(x, g, lower, upper)
        if np.max(np.abs(pg), initial=0.0) <= gtol:
            converged, message = True, "projected gradient below tolerance"
            it -= 1
            break
        new_active = _active_set(x, g, lower, upper)
        if np.any(new_active != active):
            H, fresh = np.eye(n), True
            active = new_active
        free = ~active

        if free.all():
            d = -(H @ g)
        else:
            d = np.zeros(n)
            d[free] = -H[np.ix_(free, free)] @ g[free]
        if g @ d >= 0:
            H, fresh = np.eye(n), True
            d = np.where(free, -g, 0.0)

        # unscaled steepest descent: cap the first trial at unit length
        step = min(1.0, 1.0 / np.linalg.norm(d)) if fresh else 1.0
        accepted = False
        for _ in range(MAX_HALVINGS):
            x_try = np.clip(x + step * d, lower, upper)
            f_try = fun(x_try)
            n_evals += 1
            if np.isfinite(f_try) and f_try <= f + ARMIJO * (g @ (x_try - x)):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            if not fresh:
                H, fresh = np.eye(n), True
                continue
            message = "line search failed"
            break

        s = x_try - x
        g_try = grad(x_try)
        y = g_try - g
        x, f, g = x_try, f_try, g_try
        if np.max(np.abs(s)) <= xtol * (1.0 + np.max(np.abs(x))):
            converged, message = True, "step below tolerance"
            break
        sy = s @ y
        if sy > 1e-12 * np.sqrt((s @ s) * (y @ y)):
            if fresh:
                H, fresh = np.eye(n) * (sy / (y @ y)), False
            rho = 1.0 / sy
            Hy = H @ y
            H = H + ((sy + y @ Hy) * rho * rho) * np.outer(s, s) - rho * (np.outer(Hy, s) + np.outer(s, Hy))

    pg = projected_gradient(x, g, lower, upper)
    return BoxResult(
        x=x, fun=float(f), grad=g, converged=converged, iterations=it, n_evals=n_evals,
        gradient_inf_norm=float(np.max(np.abs(pg), initial=0.0)),
        active=(x <= lower) | (x >= upper), message=message, start_fun=float(f0),
    )
