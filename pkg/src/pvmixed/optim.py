"""BFGS ascent with a backtracking line search.

Near the optimum the log-likelihood differences fall below its rounding
noise before the gradient reaches the requested tolerance, so a step whose
value change is within noise is also accepted when the directional
derivative has shrunk (approximate Wolfe condition, Hager & Zhang 2005).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import IllConditionedError, NonFiniteGradientError

logger = logging.getLogger(__name__)

ARMIJO = 1e-4
MAX_STEP = 3.0


@dataclass(frozen=True)
class OptimResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    iterations: int
    status: str
    converged: bool
    history: tuple
    f0: float


def bfgs_maximize(fg, x0, tol_f=1e-10, tol_grad=1e-5, max_iter=200) -> OptimResult:
    """Maximize ``f`` given ``fg(x) -> (f, grad)``.

    Converged when the relative change of ``f`` is below ``tol_f`` and the
    gradient infinity-norm is below ``tol_grad``.  Accepted iterates never
    decrease ``f`` by more than its rounding noise.
    """
    x = np.array(x0, dtype=float)
    f, g = fg(x)
    f0 = f
    history = [f]
    Hinv = None
    status = "max-iter"
    it = 0
    if np.max(np.abs(g)) < tol_grad:
        return OptimResult(x, f, g, 0, "converged", True, tuple(history), f0)
    for it in range(1, max_iter + 1):
        if Hinv is None:
            Hinv = np.eye(x.size) / max(1.0, np.max(np.abs(g)))
        d = Hinv @ g                       # ascent direction
        slope = float(g @ d)
        if slope <= 0:
            Hinv = np.eye(x.size) / max(1.0, np.max(np.abs(g)))
            d = Hinv @ g
            slope = float(g @ d)
        alpha = min(1.0, MAX_STEP / max(np.max(np.abs(d)), 1e-300))
        noise = 1e-13 * max(1.0, abs(f))
        accepted = False
        for _ in range(60):
            xn = x + alpha * d
            try:
                fn, gn = fg(xn)
            except (IllConditionedError, NonFiniteGradientError, np.linalg.LinAlgError):
                alpha *= 0.25
                continue
            if not np.isfinite(fn):
                alpha *= 0.25
                continue
            if fn >= f + ARMIJO * alpha * slope:
                accepted = True
            elif fn >= f - noise and abs(float(gn @ d)) <= 0.8 * slope:
                accepted = True
            if accepted:
                break
            alpha *= 0.5
        if not accepted:
            # no representable improvement left
            status = "converged" if np.max(np.abs(g)) < tol_grad else "line-search-stalled"
            break
        s = xn - x
        yv = g - gn                         # gradient of -f changes by -(gn - g)
        sy = float(s @ yv)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yv):
            if it == 1:
                Hinv = np.eye(x.size) * (sy / float(yv @ yv))
            rho = 1.0 / sy
            V = np.eye(x.size) - rho * np.outer(s, yv)
            Hinv = V @ Hinv @ V.T + rho * np.outer(s, s)
        df = abs(fn - f) / max(1.0, abs(fn))
        x, f, g = xn, fn, gn
        history.append(f)
        if df < tol_f and np.max(np.abs(g)) < tol_grad:
            status = "converged"
            break
        if np.max(np.abs(g)) < 1e-3 * tol_grad:
            status = "converged"
            break
    else:
        it = max_iter
    converged = status == "converged"
    if not converged:
        logger.warning("optimizer stopped: %s after %d iterations, |grad|=%.3g", status, it,
                       float(np.max(np.abs(g))))
    return OptimResult(x, f, g, it, status, converged, tuple(history), f0)
