"""Post-hoc analysis of reconstructions.

* :func:`decompose` splits a reconstruction into a smooth part driven by the
  data and a sparse part synthesised from the codes, by solving the normal
  equation ``A x = H^T y + beta sum_k P_k^T Dhat alpha_k`` with
  ``A = H^T H + beta sum_k P_k^T (I - QQ^T)^2 P_k``.  These are the exact
  operators of the solver, so the two parts add up to the fixed point; on
  the feasible set ``(I - QQ^T)^2 = I - QQ^T`` and ``Dhat = D``.
* :func:`patch_cost_map` attributes the non-data part of the objective to
  pixels.
* :func:`psnr` and :func:`ssim` are the usual image metrics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.sparse.linalg import LinearOperator, cg

from .operators import ForwardOperator, Identity
from .regularizers import CPR, cpr_group_norms
from .solver import Workspace
from .tensor import PatchConv, extract_patches

__all__ = [
    "Decomposition",
    "decompose",
    "normal_equation_residual",
    "recover_free_coefficients",
    "patch_cost_map",
    "psnr",
    "psnr_for_table",
    "ssim",
    "atom_sheet",
    "sort_free_atoms_by_variance",
    "PSNR_CAP",
]

PSNR_CAP = 99.0
SINGULAR_DAMPING = 1e-8


@dataclass
class Decomposition:
    x_star: np.ndarray
    x_smooth: np.ndarray
    x_sparse: np.ndarray
    cost_map: np.ndarray
    cg_residual: float
    damped: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def split_error(self) -> float:
        s = self.x_smooth + self.x_sparse - self.x_star
        return float(np.linalg.norm(s) / max(np.linalg.norm(self.x_star), 1e-300))


def _normal_operator(ws: Workspace, damping: float):
    shape = ws.shape
    n = int(np.prod(shape))

    def mv(v):
        x = np.asarray(v, dtype=float).reshape(shape)
        out = ws.H.normal(x) + ws.beta * ws.gram(x)
        if damping:
            out = out + damping * x
        return out.ravel()

    return LinearOperator((n, n), matvec=mv, rmatvec=mv, dtype=float)


def _solve_cg(A: LinearOperator, b: np.ndarray, tol: float, maxiter: int):
    nb = float(np.linalg.norm(b))
    if nb == 0.0:
        return np.zeros_like(b), 0.0
    x, _ = cg(A, b, rtol=tol, atol=0.0, maxiter=maxiter)
    return x, float(np.linalg.norm(A.matvec(x) - b) / nb)


def _kills_constant(ws: Workspace) -> bool:
    one = np.ones(ws.shape)
    a1 = ws.H.normal(one) + ws.beta * ws.gram(one)
    scale = ws.H.norm(ws.shape) ** 2 + ws.beta * ws.d
    return float(np.linalg.norm(a1)) <= 1e-10 * scale * float(np.linalg.norm(one))


def normal_equation_residual(x_star, alpha_star, ws: Workspace) -> float:
    """``||A x* - H^T y - beta sum_k P_k^T Dhat alpha_k||`` (first-order optimality)."""
    r = ws.H.normal(x_star) + ws.beta * ws.gram(x_star) - ws.Hty \
        - ws.beta * ws.Dconv.adjoint(alpha_star)
    return float(np.linalg.norm(r))


def decompose(
    state,
    params,
    H: ForwardOperator,
    y: np.ndarray,
    cg_tol: float = 1e-8,
    maxiter: int | None = None,
    ws: Workspace | None = None,
) -> Decomposition:
    """Smooth/sparse split of the converged state ``state`` (needs ``.x``, ``.alpha``)."""
    x_star = np.asarray(state.x, dtype=float)
    alpha = np.asarray(state.alpha, dtype=float)
    if ws is None:
        ws = Workspace(params, H, y, x_star.shape)
    damped = _kills_constant(ws)
    A = _normal_operator(ws, SINGULAR_DAMPING if damped else 0.0)
    maxiter = maxiter or 10 * x_star.size
    b_smooth = ws.Hty.ravel()
    b_sparse = (ws.beta * ws.Dconv.adjoint(alpha)).ravel()
    xs, r1 = _solve_cg(A, b_smooth, cg_tol, maxiter)
    xp, r2 = _solve_cg(A, b_sparse, cg_tol, maxiter)
    cost = patch_cost_map(x_star, alpha, params, ws=ws)
    meta = {
        "normal_equation_residual": normal_equation_residual(x_star, alpha, ws),
        "x_star_norm": float(np.linalg.norm(x_star)),
        "cg_tol": cg_tol,
        "damping": SINGULAR_DAMPING if damped else 0.0,
        "cost_attribution": "cpr group cost split equally over its 4 pixels"
        if ws.reg.kind == CPR else "ncpr numeric potential per entry",
    }
    return Decomposition(
        x_star=x_star,
        x_smooth=xs.reshape(x_star.shape),
        x_sparse=xp.reshape(x_star.shape),
        cost_map=cost,
        cg_residual=max(r1, r2),
        damped=damped,
        meta=meta,
    )


def recover_free_coefficients(x: np.ndarray, params) -> np.ndarray:
    """``c_k = Q^T P_k x`` for every pixel, shape ``(p2, h, w)``."""
    x = np.asarray(x, dtype=float)
    return PatchConv(np.asarray(params.Q, dtype=float), x.shape).forward(x)


def patch_cost_map(x: np.ndarray, alpha: np.ndarray, params, ws: Workspace | None = None) -> np.ndarray:
    """Per-pixel patch cost ``beta/2 ||Phat_k x - D alpha_k||^2`` plus the regulariser.

    For CPR each 2x2 group cost is split equally over its four pixels, for
    NCPR the numeric potential of every code entry is added at its pixel.
    The map sums to the non-data part of the objective.
    """
    x = np.asarray(x, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if ws is None:
        ws = Workspace(params, Identity(), x, x.shape)
    ones = PatchConv(np.ones((ws.d, 1)), x.shape)
    sq = ones.forward(x * x)[0]  # ||P_k x||^2
    if ws.Qconv is not None:
        c = ws.Qconv.forward(x)
        proj = sq - 2.0 * (c * c).sum(0) + np.einsum("phw,pq,qhw->hw", c, ws.G, c)
    else:
        proj = sq
    cross = (ws.Dconv.forward(x) * alpha).sum(0)
    quad = np.einsum("phw,pq,qhw->hw", alpha, ws.DtD, alpha)
    data = 0.5 * ws.beta * np.maximum(proj - 2.0 * cross + quad, 0.0)
    if ws.reg.kind == CPR:
        tau = np.asarray(ws.reg.tau, dtype=float).reshape(-1, 1, 1)
        g = (ws.reg.lam * tau * cpr_group_norms(alpha)).sum(0) / 4.0
        reg = np.repeat(np.repeat(g, 2, axis=0), 2, axis=1)
    else:
        tau = np.asarray(ws.reg.tau, dtype=float).reshape(-1, 1, 1)
        safe = np.where(tau > 0, tau, 1.0)
        vals = np.where(tau > 0, safe**2 * ws.potential()(alpha / safe), 0.0)
        reg = ws.beta / ws.gamma1 * vals.sum(0)
    return data + reg


def psnr(x: np.ndarray, ref: np.ndarray, peak: float = 1.0, crop: int | tuple | None = None) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images.

    ``crop`` selects a centred region (an int for a square, or ``(h, w)``).
    """
    x = np.asarray(x, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {ref.shape}")
    if crop is not None:
        ch, cw = (crop, crop) if np.isscalar(crop) else crop
        h, w = x.shape[-2:]
        if ch > h or cw > w:
            raise ValueError(f"crop {ch}x{cw} larger than image {h}x{w}")
        r0, c0 = (h - ch) // 2, (w - cw) // 2
        x = x[..., r0 : r0 + ch, c0 : c0 + cw]
        ref = ref[..., r0 : r0 + ch, c0 : c0 + cw]
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


def psnr_for_table(value: float) -> float:
    return min(value, PSNR_CAP)


def ssim(x: np.ndarray, ref: np.ndarray, peak: float = 1.0) -> float:
    """Mean structural similarity, 11x11 Gaussian window with sigma 1.5.

    Follows the reference implementation: ``K1 = 0.01``, ``K2 = 0.03``,
    population covariances, reflective borders, and the mean taken away from
    a 5-pixel border.
    """
    x = np.asarray(x, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {ref.shape}")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2

    def blur(v):
        return gaussian_filter(v, sigma=1.5, truncate=3.5, mode="reflect")

    mx, my = blur(x), blur(ref)
    vx = blur(x * x) - mx * mx
    vy = blur(ref * ref) - my * my
    cxy = blur(x * ref) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    pad = 5
    if min(s.shape) > 2 * pad:
        s = s[pad:-pad, pad:-pad]
    return float(s.mean())


def atom_sheet(K: np.ndarray, order=None, pad: int = 1, cols: int | None = None) -> np.ndarray:
    """Tile the atoms of ``K`` (d, p) into one image, each rescaled to ``[0, 1]``.

    ``order`` gives the tile order; pass ``np.argsort(tau)`` to put the least
    penalised atoms top-left.
    """
    K = np.asarray(K, dtype=float)
    d, p = K.shape
    side = int(round(np.sqrt(d)))
    order = np.arange(p) if order is None else np.asarray(order)
    cols = cols or int(np.ceil(np.sqrt(p)))
    rows = int(np.ceil(p / cols))
    step = side + pad
    sheet = np.ones((rows * step + pad, cols * step + pad))
    for t, j in enumerate(order):
        atom = K[:, j].reshape(side, side)
        lo, hi = atom.min(), atom.max()
        atom = (atom - lo) / (hi - lo) if hi > lo else np.full_like(atom, 0.5)
        r, c = divmod(t, cols)
        sheet[pad + r * step : pad + r * step + side, pad + c * step : pad + c * step + side] = atom
    return sheet


def sort_free_atoms_by_variance(Q: np.ndarray, images) -> tuple[np.ndarray, np.ndarray]:
    """Rotate the non-constant free atoms so coefficient variance is decreasing.

    Interpretation used here: PCA of the coefficients ``Q^T P_k x`` over all
    patches of ``images``.  The last (constant) atom is kept as is.  Returns
    the rotated dictionary and the per-atom variances.
    """
    Q = np.asarray(Q, dtype=float)
    side = int(round(np.sqrt(Q.shape[0])))
    free = Q[:, :-1]
    if free.shape[1] == 0:
        return Q.copy(), np.zeros(0)
    coeffs = np.concatenate(
        [free.T @ extract_patches(np.asarray(im, dtype=float), side) for im in images], axis=1
    )
    cov = np.cov(coeffs)
    cov = np.atleast_2d(cov)
    w, V = np.linalg.eigh(cov)
    idx = np.argsort(w)[::-1]
    R = V[:, idx]
    return np.concatenate([free @ R, Q[:, -1:]], axis=1), w[idx]
