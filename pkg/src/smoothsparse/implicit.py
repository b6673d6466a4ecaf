"""Implicit differentiation of the inner fixed point.

At a fixed point ``z* = T(z*; theta)`` of the non-inertial sweep, the gradient
of a loss ``L(x*)`` is ``(dT/dtheta)^T v`` where ``v`` solves the adjoint
equation ``v = (dT/dz)^T v + dL/dz``.  The adjoint equation is solved with
Anderson or Broyden using vector-Jacobian products of one sweep, and the
result is pulled back through the dictionary parameterisation and the
softplus maps to the raw trainable arrays.

The step sizes ``gamma1`` and ``gamma2`` are held constant: the fixed point
does not depend on ``gamma2`` and ``gamma1 = 0.99`` on the feasible set.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .dictionaries import parameterize_with_vjp
from .fixedpoint import anderson_solve, broyden_solve
from .operators import ForwardOperator
from .regularizers import CPR, cpr_prox_vjp, ncpr_prox_vjp
from .solver import Workspace
from .tensor import patch_outer

__all__ = ["BackwardConfig", "Gradients", "SweepVJP", "backward_implicit", "loss_l1", "loss_l1_grad"]

log = logging.getLogger(__name__)


def loss_l1(x_star: np.ndarray, x_true: np.ndarray) -> float:
    """Mean over the batch of per-image l1 errors.

    A 2-D input is a batch of one; a 3-D input is ``(M, h, w)``.
    """
    diff = np.asarray(x_star, dtype=float) - np.asarray(x_true, dtype=float)
    if diff.ndim == 2:
        diff = diff[None]
    return float(np.abs(diff).sum() / diff.shape[0])


def loss_l1_grad(x_star: np.ndarray, x_true: np.ndarray, batch: int = 1) -> np.ndarray:
    return np.sign(np.asarray(x_star) - np.asarray(x_true)) / batch


@dataclass
class BackwardConfig:
    solver: str = "anderson"
    iters: int = 75
    memory: int = 5
    damping: float = 1.0
    tol: float = 1e-8  # relative to ||dL/dx||


@dataclass
class Gradients:
    D_raw: np.ndarray
    Q_raw: np.ndarray
    tau_raw: np.ndarray
    beta_raw: float
    # gradients with respect to the derived quantities, before the pullback
    D: np.ndarray
    Q: np.ndarray
    tau: np.ndarray
    beta: float
    adjoint_residual: float = 0.0
    converged: bool = True

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "D_raw": self.D_raw,
            "Q_raw": self.Q_raw,
            "tau_raw": self.tau_raw,
            "beta_raw": np.array(self.beta_raw),
        }


def _gram_q_grad(ws: Workspace, x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Gradient in ``Q`` of ``<g, gram(x)>`` with ``gram = sum_k P_k^T (I-QQ^T)^2 P_k``."""
    side = ws.Dconv.side
    if ws.Qconv is None:
        return np.zeros_like(ws.Q)
    Cx = ws.Qconv.forward(x)
    Cg = ws.Qconv.forward(g)
    G = ws.G
    # <g, Qconv.adjoint(Cx)> = sum_k g_k^T Q Q^T x_k
    lin = patch_outer(x, Cg, side) + patch_outer(g, Cx, side)
    # <g, Qconv.adjoint(G Cx)> = sum_k (Q^T g_k)^T G (Q^T x_k)
    M = np.einsum("phw,qhw->pq", Cx, Cg)
    quad = (
        patch_outer(g, np.einsum("pq,qhw->phw", G, Cx), side)
        + patch_outer(x, np.einsum("pq,qhw->phw", G, Cg), side)
        + ws.Q @ (M + M.T)
    )
    return quad - 2.0 * lin


class SweepVJP:
    """Linearisation of the sweep ``T`` at a point ``(x, alpha)``."""

    def __init__(self, ws: Workspace, x: np.ndarray, alpha: np.ndarray):
        self.ws = ws
        self.x = x
        self.alpha = alpha
        self.alpha_new, self.u = ws.code_step(x, alpha)

    def __call__(self, vx: np.ndarray, va: np.ndarray, params_grad: bool = False):
        ws = self.ws
        gr = -ws.gamma2 * vx
        gx = vx + ws.H.normal(gr) + ws.beta * ws.gram(gr)
        ga_new = va - ws.beta * ws.Dconv.forward(gr)
        if ws.reg.kind == CPR:
            thr = ws.threshold
            gu, gthr = cpr_prox_vjp(self.u, thr, ga_new)
        else:
            gu, gtau = ncpr_prox_vjp(self.u, ws.reg.tau, ws.reg.gamma, ga_new)
        ga = gu - ws.gamma1 * np.einsum("pq,qhw->phw", ws.DtD, gu)
        gx = gx + ws.gamma1 * ws.Dconv.adjoint(gu)
        if not params_grad:
            return gx, ga

        side = ws.Dconv.side
        gbeta = float(np.vdot(gr, ws.gram(self.x) - ws.Dconv.adjoint(self.alpha_new)))
        gDhat = -ws.beta * patch_outer(gr, self.alpha_new, side)
        gDhat += ws.gamma1 * patch_outer(self.x, gu, side)
        gQ = ws.beta * _gram_q_grad(ws, self.x, gr)
        if ws.reg.kind == CPR:
            gtau = gthr * ws.gamma1 * ws.reg.lam / ws.beta
            gbeta -= float(np.sum(gthr * thr)) / ws.beta
        gE = -ws.gamma1 * np.einsum("phw,qhw->pq", gu, self.alpha)
        D, Q = ws.D, ws.Q
        gD = D @ (gE + gE.T)
        gD += gDhat - Q @ (Q.T @ gDhat)
        gQ -= gDhat @ (D.T @ Q) + D @ (gDhat.T @ Q)
        return gx, ga, {"D": gD, "Q": gQ, "tau": np.asarray(gtau, dtype=float), "beta": gbeta}


def backward_implicit(
    x_star: np.ndarray,
    alpha_star: np.ndarray,
    params,
    H: ForwardOperator,
    y: np.ndarray,
    dL_dx: np.ndarray,
    cfg: BackwardConfig | None = None,
    ws: Workspace | None = None,
) -> Gradients:
    """Gradients of a loss of the fixed point with respect to the raw parameters."""
    cfg = cfg or BackwardConfig()
    if ws is None:
        ws = Workspace(params, H, y, np.shape(x_star))
    lin = SweepVJP(ws, x_star, alpha_star)
    nx = x_star.size
    a_shape = alpha_star.shape

    def split(v):
        return v[:nx].reshape(x_star.shape), v[nx:].reshape(a_shape)

    g0 = np.concatenate([np.asarray(dL_dx, dtype=float).ravel(), np.zeros(alpha_star.size)])

    def adjoint_map(v):
        gx, ga = lin(*split(v))
        return np.concatenate([gx.ravel(), ga.ravel()]) + g0

    tol = cfg.tol * max(float(np.linalg.norm(g0)), 1e-300)
    if cfg.solver == "anderson":
        res = anderson_solve(adjoint_map, g0, cfg.iters, cfg.memory, cfg.damping, tol)
    elif cfg.solver == "broyden":
        res = broyden_solve(adjoint_map, g0, cfg.iters, tol)
    else:
        raise ValueError(f"unknown backward solver {cfg.solver!r}")
    if not res.converged:
        log.info("adjoint solve not converged: residual %.3e > %.3e", res.residual, tol)

    _, _, g = lin(*split(res.z), params_grad=True)
    _, pullback = parameterize_with_vjp(params.raw)
    gD_raw, gQ_raw = pullback(g["D"], g["Q"])
    return Gradients(
        D_raw=gD_raw,
        Q_raw=gQ_raw,
        tau_raw=g["tau"] * expit(params.tau_raw),
        beta_raw=g["beta"] * float(expit(params.beta_raw)),
        D=g["D"],
        Q=g["Q"],
        tau=g["tau"],
        beta=g["beta"],
        adjoint_residual=res.residual / max(float(np.linalg.norm(g0)), 1e-300),
        converged=res.converged,
    )
