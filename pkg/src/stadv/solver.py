"""Limited-memory BFGS with Armijo backtracking."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

__all__ = ["LbfgsConfig", "SolveTrace", "lbfgs_minimize", "NonFiniteObjective"]

log = logging.getLogger(__name__)

CURVATURE_EPS = 1e-10


class NonFiniteObjective(ValueError):
    """The objective returned NaN/Inf at the starting point."""


@dataclass(frozen=True)
class LbfgsConfig:
    history_size: int = 10
    max_iterations: int = 300
    grad_tol: float = 1e-6
    armijo_c: float = 1e-4
    backtrack_factor: float = 0.5
    max_line_search_steps: int = 20

    def __post_init__(self):
        if self.history_size < 0:
            raise ValueError("history_size must be >= 0")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if not 0 < self.armijo_c < 1:
            raise ValueError("armijo_c must lie in (0, 1)")
        if not 0 < self.backtrack_factor < 1:
            raise ValueError("backtrack_factor must lie in (0, 1)")
        if self.max_line_search_steps < 1:
            raise ValueError("max_line_search_steps must be >= 1")


@dataclass
class SolveTrace:
    iterations: int = 0
    objective: list = field(default_factory=list)
    grad_norm: float = float("nan")
    reason: str = ""
    evaluations: int = 0
    gradients: int = 0


def _materialise(g):
    if callable(g):
        g = g()
    return np.asarray(g, dtype=np.float64).reshape(-1)


def _two_loop(grad, history):
    """Apply the inverse-Hessian estimate built from ``history`` to ``grad``."""
    q = grad.copy()
    alphas = []
    for s, y, rho in reversed(history):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if history:
        s, y, _ = history[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(history, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def lbfgs_minimize(fun, x0, cfg=None):
    """Minimise ``fun`` starting from ``x0``.

    ``fun(x)`` returns ``(value, gradient)`` for a flat float vector ``x``.
    The gradient may be a zero-argument callable; it is then only invoked for
    accepted points, so rejected line-search trials cost one value only.
    Every line search starts at step 1.0 and halves (by ``backtrack_factor``)
    until the Armijo condition holds. Without curvature pairs the search
    direction is the negative gradient scaled to at most unit length.

    Returns ``(x_best, trace)``; accepted iterates never increase the objective.
    """
    cfg = cfg or LbfgsConfig()
    x = np.array(x0, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(x)):
        raise NonFiniteObjective("x0 contains non-finite entries")
    trace = SolveTrace()

    fx, g = fun(x)
    fx = float(fx)
    g = _materialise(g)
    trace.evaluations = 1
    trace.gradients = 1
    if not np.isfinite(fx) or not np.all(np.isfinite(g)):
        raise NonFiniteObjective(f"objective is not finite at x0 (value={fx})")
    trace.objective.append(fx)

    history = deque(maxlen=cfg.history_size) if cfg.history_size else deque(maxlen=1)
    use_history = cfg.history_size > 0
    trace.reason = "max_iters"

    for it in range(cfg.max_iterations):
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        if gnorm <= cfg.grad_tol:
            trace.reason = "converged"
            break

        if use_history and history:
            d = -_two_loop(g, history)
        else:
            d = -g / max(1.0, float(np.linalg.norm(g)))
        slope = float(g @ d)
        if slope >= 0:
            # stale curvature produced an ascent direction
            history.clear()
            d = -g / max(1.0, float(np.linalg.norm(g)))
            slope = float(g @ d)

        step, accepted = 1.0, None
        for _ in range(cfg.max_line_search_steps):
            x_new = x + step * d
            f_new, g_new = fun(x_new)
            trace.evaluations += 1
            f_new = float(f_new)
            if (
                np.isfinite(f_new)
                and f_new <= fx + cfg.armijo_c * step * slope
                and f_new <= fx
            ):
                g_new = _materialise(g_new)
                trace.gradients += 1
                if np.all(np.isfinite(g_new)):
                    accepted = (x_new, f_new, g_new)
                    break
            step *= cfg.backtrack_factor

        if accepted is None:
            if history:
                history.clear()
                continue
            trace.reason = "line_search_failure"
            break

        x_new, f_new, g_new = accepted
        s, y = x_new - x, g_new - g
        sy = float(s @ y)
        if use_history and sy > CURVATURE_EPS:
            history.append((s, y, 1.0 / sy))
        x, fx, g = x_new, f_new, g_new
        trace.iterations = it + 1
        trace.objective.append(fx)
    else:
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        if gnorm <= cfg.grad_tol:
            trace.reason = "converged"

    trace.grad_norm = float(np.max(np.abs(g))) if g.size else 0.0
    log.debug(
        "lbfgs: %s after %d iterations, f=%.6g, |g|=%.3g",
        trace.reason,
        trace.iterations,
        fx,
        trace.grad_norm,
    )
    return x, trace
