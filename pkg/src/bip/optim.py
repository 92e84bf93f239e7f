"""Adam and L-BFGS for a ``fun(x) -> (value, grad)`` objective."""

from __future__ import annotations

import logging
import math
from collections import deque

import numpy as np

log = logging.getLogger(__name__)


class NonFiniteObjective(FloatingPointError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


def _check(value, grad, trace):
    if not math.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NonFiniteObjective(f"objective became non-finite after {len(trace)} evaluations", trace)


def adam(fun, x0, steps: int, lr: float = 0.01, beta1: float = 0.9,
         beta2: float = 0.999, eps: float = 1e-8, trace=None):
    """Plain Adam with bias correction.  Returns ``(x, trace)``.

    ``trace`` holds the objective at every iterate, starting with x0.
    """
    x = np.array(x0, dtype=float)
    trace = [] if trace is None else trace
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    for t in range(1, steps + 1):
        f, g = fun(x)
        _check(f, g, trace)
        trace.append(f)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        x = x - lr * mhat / (np.sqrt(vhat) + eps)
    return x, trace


def lbfgs(fun, x0, steps: int, memory: int = 10, gtol: float = 1e-10,
          c1: float = 1e-4, max_backtracks: int = 40, trace=None):
    """L-BFGS: two-loop recursion, backtracking Armijo line search (halving).

    Stops early when the gradient norm drops below ``gtol`` or the line search
    cannot find a decrease.  Returns ``(x, trace)`` with one entry per accepted
    iterate (the starting point included).
    """
    x = np.array(x0, dtype=float)
    trace = [] if trace is None else trace
    f, g = fun(x)
    _check(f, g, trace)
    trace.append(f)
    pairs = deque(maxlen=memory)
    for _ in range(steps):
        if np.linalg.norm(g) < gtol:
            break
        d = -_two_loop(g, pairs)
        slope = float(g @ d)
        if slope >= 0:
            pairs.clear()
            d = -g
            slope = -float(g @ g)
        step = 1.0 if pairs else min(1.0, 1.0 / max(np.linalg.norm(g), 1e-300))
        for _ in range(max_backtracks):
            x_new = x + step * d
            f_new, g_new = fun(x_new)
            if math.isfinite(f_new) and f_new <= f + c1 * step * slope:
                break
            step *= 0.5
        else:
            log.debug("line search failed; stopping")
            break
        _check(f_new, g_new, trace)
        s, y = x_new - x, g_new - g
        if float(s @ y) > 1e-12 * float(y @ y):
            pairs.append((s, y, 1.0 / float(s @ y)))
        x, f, g = x_new, f_new, g_new
        trace.append(f)
    return x, trace


def _two_loop(g, pairs):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y, _ = pairs[-1]
        q *= float(s @ y) / float(y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return q
