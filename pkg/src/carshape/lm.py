"""Small dense Levenberg-Marquardt solver with a monotone cost history."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class LMResult:
    x: np.ndarray
    cost: float
    iterations: int
    converged: bool
    diverged: bool = False
    history: list = field(default_factory=list)


def levenberg_marquardt(fun, x0, max_iters: int = 100, tol: float = 1e-10,
                        damping: float = 1e-3) -> LMResult:
    """Minimize ``|r(x)|^2`` where ``fun(x)`` returns ``(r, J)``.

    Steps are accepted only when the cost drops, so ``history`` (the cost
    after every accepted step, starting with the initial cost) never
    increases.  ``diverged`` is set when the residuals turn non-finite or
    the damping saturates while the gradient is still large.
    """
    x = np.array(x0, dtype=float)
    r, J = fun(x)
    if r.size == 0:
        return LMResult(x, 0.0, 0, True, False, [0.0])
    if not np.all(np.isfinite(r)):
        return LMResult(x, float("inf"), 0, False, True, [float("inf")])
    cost = float(r @ r)
    history = [cost]
    lam = damping
    converged = diverged = False
    it = 0
    JtJ, g = J.T @ J, J.T @ r
    while it < max_iters:
        it += 1
        diag = np.diag(JtJ).copy()
        scale = max(diag.max(initial=0.0), 1e-300)
        A = JtJ + lam * np.diag(np.maximum(diag, 1e-9 * scale))
        try:
            step = -np.linalg.solve(A, g)
        except np.linalg.LinAlgError:
            lam *= 10.0
            continue
        xn = x + step
        rn, Jn = fun(xn)
        cn = float(rn @ rn) if np.all(np.isfinite(rn)) else np.inf
        if cn < cost:
            rel = (cost - cn) / max(cost, 1e-300)
            x, r, J, cost = xn, rn, Jn, cn
            JtJ, g = J.T @ J, J.T @ r
            history.append(cost)
            lam = max(lam / 5.0, 1e-12)
            if rel <= tol or cost <= 1e-30:
                converged = True
                break
        else:
            lam *= 8.0
            if lam > 1e14:
                # No descent even with a tiny step: a stationary point unless
                # the gradient is still large.
                gnorm = np.linalg.norm(2.0 * g)
                converged = gnorm <= 1e-6 * max(1.0, cost)
                diverged = not converged
                break
        if np.linalg.norm(step) <= 1e-14 * (1.0 + np.linalg.norm(x)):
            converged = True
            break
    return LMResult(x, cost, it, converged, diverged, history)
