"""Parameterisation of the feasible dictionary pair.

A pair ``(D, Q)`` is feasible when ``Q`` is orthonormal and contains a
constant atom, ``D`` is orthogonal to ``Q``, the atoms of ``D`` all have the
same norm and ``||D||_2 = 1``.  Feasible pairs are produced from two
unconstrained matrices by :func:`parameterize_dictionaries`, which is smooth in
its inputs and comes with a hand-written vector-Jacobian product so that it can
sit inside the training graph.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import side_from_dim

__all__ = [
    "BJORCK_ITERS",
    "DEGENERATE_ATOM_TOL",
    "RawDictionaries",
    "DictionaryPair",
    "FeasibilityReport",
    "OrthonormalizationError",
    "DegenerateAtomError",
    "bjorck_orthonormalize",
    "parameterize_dictionaries",
    "parameterize_with_vjp",
    "validate_feasible_set",
]

BJORCK_ITERS = 15
DEGENERATE_ATOM_TOL = 1e-10


class OrthonormalizationError(ArithmeticError):
    """Björck iteration failed to converge (typically a rank-deficient input)."""


class DegenerateAtomError(ArithmeticError):
    """An atom of ``D`` vanished after projecting out the span of ``Q``."""


@dataclass(frozen=True, eq=False)
class RawDictionaries:
    """Unconstrained training variables: ``D_raw`` (d, p1) and ``Q_raw`` (d, p2 - 1)."""

    D_raw: np.ndarray
    Q_raw: np.ndarray

    def __post_init__(self):
        D = np.asarray(self.D_raw, dtype=float)
        Q = np.asarray(self.Q_raw, dtype=float)
        if Q.ndim == 1 and Q.size == 0:
            Q = Q.reshape(D.shape[0], 0)
        if D.ndim != 2 or Q.ndim != 2 or D.shape[0] != Q.shape[0]:
            raise ValueError(f"incompatible raw shapes {D.shape} and {Q.shape}")
        if not (np.all(np.isfinite(D)) and np.all(np.isfinite(Q))):
            raise ValueError("raw dictionaries contain non-finite entries")
        object.__setattr__(self, "D_raw", D)
        object.__setattr__(self, "Q_raw", Q)

    @property
    def d(self) -> int:
        return self.D_raw.shape[0]

    @property
    def p1(self) -> int:
        return self.D_raw.shape[1]

    @property
    def p2(self) -> int:
        return self.Q_raw.shape[1] + 1


@dataclass(frozen=True, eq=False)
class DictionaryPair:
    """Constrained synthesis dictionary ``D`` and free subspace basis ``Q``."""

    D: np.ndarray
    Q: np.ndarray

    @property
    def d(self) -> int:
        return self.D.shape[0]

    @property
    def side(self) -> int:
        return side_from_dim(self.D.shape[0])

    @property
    def p1(self) -> int:
        return self.D.shape[1]

    @property
    def p2(self) -> int:
        return self.Q.shape[1]


@dataclass(frozen=True, eq=False)
class FeasibilityReport:
    orthonormality: float  # ||Q^T Q - I||_F
    orthogonality: float  # ||Q^T D||_F
    spectral_norm_error: float  # | ||D||_2 - 1 |
    column_norm_spread: float  # max - min atom norm of D
    constant_atom: bool
    tol: float

    @property
    def passed(self) -> bool:
        return self.constant_atom and max(
            self.orthonormality,
            self.orthogonality,
            self.spectral_norm_error,
            self.column_norm_spread,
        ) <= self.tol

    def __bool__(self) -> bool:
        return self.passed


def _orth_defect(Q: np.ndarray) -> float:
    return float(np.linalg.norm(Q.T @ Q - np.eye(Q.shape[1])))


def _bjorck_trace(Q0: np.ndarray, iters: int) -> list[np.ndarray]:
    trace = [Q0]
    Q = Q0
    eye = np.eye(Q0.shape[1])
    for _ in range(iters):
        Q = 0.5 * Q @ (3.0 * eye - Q.T @ Q)
        trace.append(Q)
    return trace


def _check_bjorck(trace: list[np.ndarray]) -> None:
    first, last = _orth_defect(trace[0]), _orth_defect(trace[-1])
    if not np.isfinite(last) or last > max(first, 1e-12) or last > 0.5:
        raise OrthonormalizationError(
            f"Björck iteration did not converge: ||Q^TQ - I||_F went from "
            f"{first:.3e} to {last:.3e} (rank-deficient or badly scaled input?)"
        )


def bjorck_orthonormalize(Q0: np.ndarray, iters: int = BJORCK_ITERS) -> np.ndarray:
    """Run ``iters`` first-order Björck steps ``Q <- Q (3I - Q^T Q) / 2``.

    The input is used as given; convergence needs ``||Q0||_2 < sqrt(3)`` and
    full column rank.  The limit is the orthonormal polar factor of ``Q0``,
    so the column space is preserved.
    """
    Q0 = np.asarray(Q0, dtype=float)
    if Q0.shape[1] == 0:
        return Q0.copy()
    trace = _bjorck_trace(Q0, iters)
    _check_bjorck(trace)
    return trace[-1]


def _top_singular(A: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    return float(s[0]), U[:, 0], Vt[0]


def parameterize_with_vjp(
    raw: RawDictionaries, bjorck_iters: int = BJORCK_ITERS
) -> tuple[DictionaryPair, Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]]:
    """Map raw matrices to a feasible pair and return its pullback.

    The returned function takes cotangents ``(gD, gQ)`` of the outputs and
    returns cotangents ``(gD_raw, gQ_raw)``.  The gradient of the appended
    constant atom is discarded since that atom is not trainable.
    """
    d, p1 = raw.D_raw.shape
    m = raw.Q_raw.shape[1]
    if d < m + 1:
        raise ValueError(f"p2 = {m + 1} atoms do not fit in dimension d = {d}")

    # 1. zero-mean columns
    Qc = raw.Q_raw - raw.Q_raw.mean(axis=0, keepdims=True)
    # 2. Björck after scaling by the spectral norm
    if m > 0:
        sq, uq, vq = _top_singular(Qc)
        if sq == 0.0:
            raise OrthonormalizationError("raw Q is identically constant per column")
        trace = _bjorck_trace(Qc / sq, bjorck_iters)
        _check_bjorck(trace)
        Qb = trace[-1]
    else:
        Qb = Qc
    # 3. constant atom of unit norm
    Q = np.hstack([Qb, np.full((d, 1), 1.0 / np.sqrt(d))])
    # 4. remove the free subspace from D
    D1 = raw.D_raw - Q @ (Q.T @ raw.D_raw)
    # 5. equal-norm atoms
    norms = np.linalg.norm(D1, axis=0)
    if np.any(norms < DEGENERATE_ATOM_TOL):
        bad = np.flatnonzero(norms < DEGENERATE_ATOM_TOL).tolist()
        raise DegenerateAtomError(
            f"atoms {bad} of D lie in span(Q) (norm < {DEGENERATE_ATOM_TOL:g})"
        )
    D2 = D1 / norms
    # 6. unit spectral norm
    sd, ud, vd = _top_singular(D2)
    D = D2 / sd

    def vjp(gD: np.ndarray, gQ: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        gD = np.asarray(gD, dtype=float)
        gQ = np.array(gQ, dtype=float)
        g2 = gD / sd - (np.sum(gD * D2) / sd**2) * np.outer(ud, vd)
        g1 = (g2 - D2 * np.sum(D2 * g2, axis=0)) / norms
        gD_raw = g1 - Q @ (Q.T @ g1)
        gQ -= g1 @ (raw.D_raw.T @ Q) + raw.D_raw @ (g1.T @ Q)
        g = gQ[:, :m]
        if m == 0:
            return gD_raw, np.zeros((d, 0))
        for Qk in reversed(trace[:-1]):
            G = Qk.T @ Qk
            g = 1.5 * g - 0.5 * (g @ G + Qk @ (g.T @ Qk) + Qk @ (Qk.T @ g))
        gQc = g / sq - (np.sum(g * Qc) / sq**2) * np.outer(uq, vq)
        return gD_raw, gQc - gQc.mean(axis=0, keepdims=True)

    return DictionaryPair(D=D, Q=Q), vjp


def parameterize_dictionaries(
    raw: RawDictionaries, bjorck_iters: int = BJORCK_ITERS
) -> DictionaryPair:
    """Feasible ``(D, Q)`` from unconstrained ``(D_raw, Q_raw)``.

    Steps: centre the columns of ``Q_raw``, orthonormalise them with Björck,
    append the constant atom ``1/sqrt(d)``, project ``D_raw`` onto the
    orthogonal complement of ``span(Q)``, normalise atoms, then divide by the
    spectral norm.
    """
    return parameterize_with_vjp(raw, bjorck_iters)[0]


def validate_feasible_set(pair: DictionaryPair, tol: float = 1e-6) -> FeasibilityReport:
    D, Q = pair.D, pair.Q
    col = np.linalg.norm(D, axis=0)
    const = False
    for q in Q.T:
        if q[0] > 0 and np.ptp(q) <= tol:
            const = True
            break
    return FeasibilityReport(
        orthonormality=_orth_defect(Q),
        orthogonality=float(np.linalg.norm(Q.T @ D)),
        spectral_norm_error=abs(float(np.linalg.norm(D, 2)) - 1.0),
        column_norm_spread=float(col.max() - col.min()) if col.size else 0.0,
        constant_atom=const,
        tol=tol,
    )
