"""Inner reconstruction problem and its iPALM solver.

For an image ``x`` and a code field ``alpha`` the objective is

    J(x, alpha) = 1/2 ||H x - y||^2
                  + beta/2 sum_k ||(I - QQ^T) P_k x - D alpha_k||^2
                  + lam R(alpha)

and iPALM alternates an inertial prox-gradient step on ``alpha`` with an
inertial gradient step on ``x``.  Every patch sum is evaluated with circular
convolutions (:class:`~smoothsparse.tensor.PatchConv`).

Step sizes: ``gamma1 = 0.99 / ||D^T D||`` for the codes and
``gamma2 = 0.99 / (||H||^2 + beta ||sum_k Phat_k^T Phat_k||)`` for the image.
The code prox uses threshold ``gamma1 * lam * tau / beta`` so that fixed
points are exactly the stationary points of ``J``.  The NCPR shrinkage is
applied as given; its implied potential carries weight ``beta / gamma1``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .operators import ForwardOperator
from .regularizers import (
    CPR,
    NCPR,
    SampledPotential,
    _group_shrink,
    cpr_value,
    ncpr_potential_numeric,
    ncpr_prox,
    ncpr_value,
    RegularizerParams,
)
from .tensor import PatchConv, patch_gram_apply, patch_gram_symbol

__all__ = [
    "SolverConfig",
    "SolverState",
    "SolverDivergenceError",
    "Workspace",
    "compute_step_sizes",
    "ipalm_step",
    "fixed_point_map",
    "solve_inner",
    "objective_value",
    "initial_state",
]

log = logging.getLogger(__name__)

STEP_SAFETY = 0.99


class SolverDivergenceError(ArithmeticError):
    pass


@dataclass
class SolverConfig:
    tol: float = 1e-4
    max_iters: int = 2000
    record_objective: bool = False
    paper_literal_step: bool = False


@dataclass
class SolverState:
    x: np.ndarray
    x_prev: np.ndarray
    alpha: np.ndarray
    alpha_prev: np.ndarray
    iter: int = 1
    residual: float = np.inf
    converged: bool = False


def compute_step_sizes(params, H: ForwardOperator, shape, paper_literal: bool = False):
    """Return ``(gamma1, gamma2)`` for the model ``params`` on images of ``shape``.

    With ``paper_literal`` the ``||H||^2`` term is left out of the image step,
    which is only safe when the data term is dominated by the patch term.
    """
    D, Q = params.D, params.Q
    side = int(round(np.sqrt(D.shape[0])))
    gamma1 = STEP_SAFETY / np.linalg.norm(D.T @ D, 2)
    sym = patch_gram_symbol(Q, side, *shape).max()
    lip = params.beta * sym
    if not paper_literal:
        lip += H.norm(tuple(shape)) ** 2
    gamma2 = STEP_SAFETY / lip
    return float(gamma1), float(gamma2)


class Workspace:
    """Operators of one model on one image size, shared across iterations."""

    def __init__(self, params, H: ForwardOperator, y: np.ndarray, shape,
                 paper_literal_step: bool = False, gammas=None):
        self.shape = tuple(shape)
        self.H = H
        self.y = y
        self.D = np.asarray(params.D, dtype=float)
        self.Q = np.asarray(params.Q, dtype=float)
        self.d = self.D.shape[0]
        self.beta = float(params.beta)
        self.reg: RegularizerParams = params.reg
        self.DtD = self.D.T @ self.D
        self.G = self.Q.T @ self.Q
        # Dhat = (I - QQ^T) D: the dictionary as seen by projected patches
        self.Dhat = self.D - self.Q @ (self.Q.T @ self.D)
        self.Dconv = PatchConv(self.Dhat, self.shape)
        self.Qconv = PatchConv(self.Q, self.shape) if self.Q.shape[1] else None
        if gammas is None:
            gammas = compute_step_sizes(params, H, self.shape, paper_literal_step)
        self.gamma1, self.gamma2 = gammas
        self.Hty = H.adjoint(y)
        self._potential: SampledPotential | None = None

    @property
    def threshold(self) -> np.ndarray:
        """Per-channel CPR prox threshold."""
        return self.gamma1 * self.reg.lam * self.reg.tau / self.beta

    def gram(self, x):
        return patch_gram_apply(x, self.Qconv, self.G, self.d)

    def prox(self, u):
        if self.reg.kind == CPR:
            return _group_shrink(u, self.threshold)
        return ncpr_prox(u, self.reg)

    def code_step(self, x, a):
        """Prox-gradient update of the codes at image ``x`` from codes ``a``."""
        u = a - self.gamma1 * (
            np.einsum("pq,qhw->phw", self.DtD, a) - self.Dconv.forward(x)
        )
        return self.prox(u), u

    def image_grad(self, x, alpha):
        return self.H.normal(x) - self.Hty + self.beta * (
            self.gram(x) - self.Dconv.adjoint(alpha)
        )

    def potential(self) -> SampledPotential:
        if self._potential is None:
            self._potential = ncpr_potential_numeric(
                RegularizerParams(NCPR, 1.0, gamma=self.reg.gamma),
                np.linspace(0.0, 50.0, 100001),
            )
        return self._potential


def initial_state(H: ForwardOperator, y, p1: int, x0=None) -> SolverState:
    x = H.adjoint(y) if x0 is None else np.array(x0, dtype=float)
    alpha = np.zeros((p1, *x.shape))
    return SolverState(x=x, x_prev=x.copy(), alpha=alpha, alpha_prev=alpha.copy())


def _rel(new, old):
    return float(np.linalg.norm(new - old) / (np.linalg.norm(old) + 1e-12))


def ipalm_step(state: SolverState, ws: Workspace) -> SolverState:
    """One inertial PALM iteration (codes first, then the image)."""
    m = state.iter
    w = (m - 1.0) / (m + 2.0)
    a_in = state.alpha + w * (state.alpha - state.alpha_prev)
    alpha, _ = ws.code_step(state.x, a_in)
    z = state.x + w * (state.x - state.x_prev)
    x = z - ws.gamma2 * ws.image_grad(z, alpha)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(alpha))):
        raise SolverDivergenceError(f"non-finite iterate at iteration {m}")
    res = max(_rel(x, state.x), _rel(alpha, state.alpha))
    return SolverState(x=x, x_prev=state.x, alpha=alpha, alpha_prev=state.alpha,
                       iter=m + 1, residual=res)


def fixed_point_map(x: np.ndarray, alpha: np.ndarray, ws: Workspace):
    """Non-inertial sweep ``T(x, alpha)``; its fixed points are stationary points of ``J``."""
    alpha_new, _ = ws.code_step(x, alpha)
    x_new = x - ws.gamma2 * ws.image_grad(x, alpha_new)
    if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(alpha_new))):
        raise SolverDivergenceError("non-finite output of the fixed-point map")
    return x_new, alpha_new


def objective_value(x, alpha, params, H: ForwardOperator, y, ws: Workspace | None = None) -> float:
    """Value of ``J``.  For NCPR the potential is numeric, hence approximate."""
    if ws is None:
        ws = Workspace(params, H, y, np.shape(x))
    r = H.apply(x) - y
    data = 0.5 * float(np.vdot(r, r).real)
    patch = 0.5 * ws.beta * (
        float(np.vdot(x, ws.gram(x)))
        - 2.0 * float(np.vdot(ws.Dconv.forward(x), alpha))
        + float(np.vdot(alpha, np.einsum("pq,qhw->phw", ws.DtD, alpha)))
    )
    return data + max(patch, 0.0) + regularizer_value(alpha, ws)


def regularizer_value(alpha, ws: Workspace) -> float:
    if ws.reg.kind == CPR:
        return cpr_value(alpha, ws.reg)
    return ws.beta / ws.gamma1 * ncpr_value(alpha, ws.reg, ws.potential())


@dataclass
class SolveTrace:
    objective: list = field(default_factory=list)
    residual: list = field(default_factory=list)


def solve_inner(
    params,
    H: ForwardOperator,
    y: np.ndarray,
    cfg: SolverConfig | None = None,
    x0: np.ndarray | None = None,
    alpha0: np.ndarray | None = None,
    ws: Workspace | None = None,
):
    """Run iPALM from ``x0`` (default ``H^T y``) until the relative change of
    both iterates drops below ``cfg.tol``.

    Returns ``(state, trace)``; hitting ``max_iters`` is reported through
    ``state.converged`` rather than raised.
    """
    cfg = cfg or SolverConfig()
    if x0 is None:
        x0 = H.adjoint(y)
    x0 = np.array(x0, dtype=float)
    if ws is None:
        ws = Workspace(params, H, y, x0.shape, cfg.paper_literal_step)
    state = initial_state(H, y, ws.D.shape[1], x0)
    if alpha0 is not None:
        state.alpha = np.array(alpha0, dtype=float)
        state.alpha_prev = state.alpha.copy()
    trace = SolveTrace()
    if cfg.record_objective:
        trace.objective.append(objective_value(state.x, state.alpha, params, H, y, ws))
    for _ in range(cfg.max_iters):
        state = ipalm_step(state, ws)
        trace.residual.append(state.residual)
        if cfg.record_objective:
            trace.objective.append(objective_value(state.x, state.alpha, params, H, y, ws))
        if state.residual < cfg.tol:
            state.converged = True
            break
    if not state.converged:
        log.debug("iPALM stopped at max_iters=%d, residual %.3e", cfg.max_iters, state.residual)
    return state, trace
