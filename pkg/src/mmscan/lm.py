"""Levenberg-Marquardt for small dense nonlinear least-squares problems.

Parameters may live on a manifold: the Jacobian is taken with respect to a
local increment and ``retract(x, dx)`` maps the increment back onto the
parameter vector (rotation vectors get composed instead of added).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NonConvergence


@dataclass
class LMResult:
    x: np.ndarray
    cost: float                      # 0.5 * sum(r**2)
    iterations: int
    converged: bool
    reason: str
    cost_history: list[float] = field(default_factory=list)
    n_residuals: int = 0

    @property
    def rms(self) -> float:
        """Root of the mean squared residual component."""
        return float(np.sqrt(2.0 * self.cost / max(self.n_residuals, 1)))


def numeric_jacobian(fun: Callable, x, retract: Callable | None = None,
                     n_params: int | None = None, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian with respect to a local increment."""
    x = np.asarray(x, dtype=float)
    n = len(x) if n_params is None else n_params
    retract = retract or (lambda x, dx: x + dx)
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = step
        cols.append((fun(retract(x, e)) - fun(retract(x, -e))) / (2 * step))
    return np.column_stack(cols)


def levenberg_marquardt(residual: Callable[[np.ndarray], np.ndarray],
                        jacobian: Callable[[np.ndarray], np.ndarray],
                        x0,
                        retract: Callable | None = None,
                        max_iter: int = 200,
                        ftol: float = 1e-12,
                        xtol: float = 1e-10,
                        lam0: float = 1e-3,
                        lam_max: float = 1e16,
                        raise_on_failure: bool = False) -> LMResult:
    """Minimize ``0.5 * ||residual(x)||^2``.

    Only steps that lower the cost are accepted, so the recorded cost history
    is non-increasing. Damping uses Marquardt's diagonal scaling.
    """
    retract = retract or (lambda x, dx: x + dx)
    x = np.array(x0, dtype=float)
    r = residual(x)
    cost = 0.5 * float(r @ r)
    history = [cost]
    lam = lam0
    reason = "max_iter"
    converged = False
    it = 0
    tiny = np.finfo(float).tiny
    while it < max_iter:
        it += 1
        if cost <= 1e-30:
            reason, converged = "zero_cost", True
            break
        J = jacobian(x)
        g = J.T @ r
        A = J.T @ J
        diag = np.maximum(np.diag(A), 1e-12 * max(np.max(np.diag(A)), tiny))
        accepted = False
        while lam <= lam_max:
            try:
                dx = np.linalg.solve(A + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            x_new = retract(x, dx)
            r_new = residual(x_new)
            cost_new = 0.5 * float(r_new @ r_new)
            if np.isfinite(cost_new) and cost_new < cost:
                accepted = True
                break
            if np.linalg.norm(dx) <= xtol * (np.linalg.norm(x) + xtol):
                break
            lam *= 10.0
        if not accepted:
            if lam <= lam_max:
                # step shrank below xtol without lowering the cost
                reason, converged = "xtol", True
                break
            # damping overflow is benign only when the gradient has vanished
            gscale = np.sqrt(np.max(diag)) * max(np.sqrt(2.0 * cost), 1e-300)
            if np.linalg.norm(g, np.inf) <= 1e-6 * gscale:
                reason, converged = "no_descent", True
            else:
                reason = "damping_overflow"
            break
        rel = (cost - cost_new) / max(cost, tiny)
        x, r, cost = x_new, r_new, cost_new
        history.append(cost)
        lam = max(lam / 10.0, 1e-15)
        if rel < ftol:
            reason, converged = "ftol", True
            break
        if np.linalg.norm(dx) < xtol * (np.linalg.norm(x) + xtol):
            reason, converged = "xtol", True
            break
    if raise_on_failure and not converged:
        raise NonConvergence(f"Levenberg-Marquardt stopped without converging ({reason}, {it} iterations)")
    return LMResult(x, cost, it, converged, reason, history, len(r))
