"""Deterministic full-batch ascent used by every likelihood fit.

Objectives are callables ``fun(theta, order)`` returning ``f`` when
``order == 0``, ``(f, grad)`` when ``order == 1`` and ``(f, grad, hess)``
when ``order == 2``. Every accepted step satisfies an Armijo condition, so the
objective never decreases.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

ARMIJO = 1e-4


@dataclass
class AscentResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)


def _newton_direction(g: np.ndarray, H: np.ndarray) -> np.ndarray:
    try:
        d = linalg.solve(-H, g, assume_a="pos")
    except (linalg.LinAlgError, ValueError):
        d = np.linalg.lstsq(-H, g, rcond=None)[0]
    if not np.all(np.isfinite(d)) or g @ d <= 0:
        return g
    return d


def ascend(fun, x0, *, method: str = "newton", max_iter: int = 100, grad_tol: float = 1e-6,
           step_size: float = 1.0, scale: float = 1.0) -> AscentResult:
    """Maximize ``fun`` from ``x0``.

    ``grad_tol`` applies to the infinity norm of ``grad / scale``; callers pass
    the number of observations as ``scale`` so the tolerance does not depend
    on sample size. ``method`` is ``"newton"`` (damped Newton, gradient
    fallback when the Hessian is not negative definite), ``"gradient"``
    (steepest ascent) or ``"adam"`` (adaptive moments with a monotone guard).
    """
    if method not in ("newton", "gradient", "adam"):
        raise ValueError(f"unknown inner optimizer {method!r}")
    x = np.array(x0, dtype=float)
    order = 2 if method == "newton" else 1
    out = fun(x, order)
    f, g = out[0], out[1]
    H = out[2] if order == 2 else None
    trace = [f]
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g), initial=0.0) / scale < grad_tol:
            converged = True
            it -= 1
            break
        if method == "adam":
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mh = m / (1 - 0.9 ** it)
            vh = v / (1 - 0.999 ** it)
            d = mh / (np.sqrt(vh) + 1e-12)
            if g @ d <= 0:
                # stale momentum points downhill; restart it
                m[:] = 0.0
                d = g / (np.abs(g) + 1e-12)
        else:
            d = _newton_direction(g, H) if method == "newton" else g
        t = step_size
        slope = g @ d
        accepted = False
        while t > 1e-14:
            x_new = x + t * d
            f_new = fun(x_new, 0)
            if np.isfinite(f_new) and f_new >= f + ARMIJO * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            # no ascent possible at working precision
            converged = np.max(np.abs(g), initial=0.0) / scale < np.sqrt(grad_tol)
            break
        x = x_new
        out = fun(x, order)
        f, g = out[0], out[1]
        H = out[2] if order == 2 else None
        trace.append(f)
    else:
        converged = np.max(np.abs(g), initial=0.0) / scale < grad_tol
    return AscentResult(x=x, f=float(f), grad=g, iterations=it, converged=bool(converged), trace=trace)
