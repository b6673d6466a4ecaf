"""Generic fixed-point solvers on flat vectors: Anderson mixing and Broyden."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = ["FixedPointResult", "anderson_solve", "broyden_solve"]


@dataclass
class FixedPointResult:
    z: np.ndarray
    residual: float
    iters: int
    converged: bool


def anderson_solve(
    g: Callable[[np.ndarray], np.ndarray],
    z0: np.ndarray,
    iters: int = 75,
    memory: int = 5,
    damping: float = 1.0,
    tol: float = 1e-10,
) -> FixedPointResult:
    """Anderson acceleration of ``z <- g(z)``.

    ``memory`` counts the iterates in the mixing window, so ``memory=1`` is
    the plain damped iteration ``z <- z + damping * (g(z) - z)``.  When the
    least-squares problem is numerically singular the step falls back to
    that plain iteration and the history is cleared.
    """
    if memory < 1:
        raise ValueError("memory must be >= 1")
    z = np.array(z0, dtype=float).ravel()
    shape = np.shape(z0)
    gz = np.asarray(g(z.reshape(shape)), dtype=float).ravel()
    f = gz - z
    F_hist, G_hist = [f], [gz]
    res = float(np.linalg.norm(f))
    k = 0
    for k in range(1, iters + 1):
        if res <= tol:
            return FixedPointResult(z.reshape(shape), res, k - 1, True)
        if len(F_hist) > 1:
            dF = np.stack([b - a for a, b in zip(F_hist[:-1], F_hist[1:])], axis=1)
            dG = np.stack([b - a for a, b in zip(G_hist[:-1], G_hist[1:])], axis=1)
            coef, _, rank, sv = np.linalg.lstsq(dF, f, rcond=None)
            if rank < dF.shape[1] or sv[-1] <= 1e-12 * sv[0]:
                z = z + damping * f
                F_hist, G_hist = [], []
            else:
                z = (gz - dG @ coef) - (1.0 - damping) * (f - dF @ coef)
        else:
            z = z + damping * f
        gz = np.asarray(g(z.reshape(shape)), dtype=float).ravel()
        f = gz - z
        res = float(np.linalg.norm(f))
        F_hist.append(f)
        G_hist.append(gz)
        if len(F_hist) > memory:
            F_hist.pop(0)
            G_hist.pop(0)
    return FixedPointResult(z.reshape(shape), res, k, res <= tol)


def broyden_solve(
    g: Callable[[np.ndarray], np.ndarray],
    z0: np.ndarray,
    iters: int = 50,
    tol: float = 1e-10,
    memory: int | None = None,
) -> FixedPointResult:
    """Root of ``g(z) - z`` by good Broyden with a limited-memory inverse Jacobian.

    The inverse Jacobian estimate is ``-I + U V^T``, starting from ``-I`` so
    that the first step is a plain fixed-point step.  At most ``memory``
    rank-one corrections are kept (oldest dropped first).
    """
    memory = iters if memory is None else memory
    shape = np.shape(z0)
    z = np.array(z0, dtype=float).ravel()
    F = np.asarray(g(z.reshape(shape)), dtype=float).ravel() - z
    U: list[np.ndarray] = []
    V: list[np.ndarray] = []

    def apply_B(v):
        out = -v
        for u_i, v_i in zip(U, V):
            out = out + u_i * (v_i @ v)
        return out

    def apply_BT(v):
        out = -v
        for u_i, v_i in zip(U, V):
            out = out + v_i * (u_i @ v)
        return out

    res = float(np.linalg.norm(F))
    k = 0
    for k in range(1, iters + 1):
        if res <= tol:
            return FixedPointResult(z.reshape(shape), res, k - 1, True)
        s = -apply_B(F)
        z = z + s
        F_new = np.asarray(g(z.reshape(shape)), dtype=float).ravel() - z
        yv = F_new - F
        By = apply_B(yv)
        denom = float(s @ By)
        if abs(denom) > 1e-30 * max(1.0, float(np.linalg.norm(s) * np.linalg.norm(By))):
            U.append((s - By) / denom)
            V.append(apply_BT(s))
            if len(U) > memory:
                U.pop(0)
                V.pop(0)
        F = F_new
        res = float(np.linalg.norm(F))
    return FixedPointResult(z.reshape(shape), res, k, res <= tol)
