"""Sparsity priors on code fields.

CPR
    Weighted group l1-l2 norm.  Groups are the non-overlapping 2x2 spatial
    blocks of each code channel, channel ``p`` weighted by ``tau[p]``.
NCPR
    Non-convex prior defined through its proximal map, applied elementwise:
    ``phi(x) = x |x|^g / (tau^g + |x|^g)``.  The potential itself has no
    closed form and is recovered numerically by
    :func:`ncpr_potential_numeric`.

Each prox comes with a ``*_vjp`` companion used by implicit differentiation.
At the kinks of the CPR prox (blocks shrunk exactly to zero) the derivative is
taken to be zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

__all__ = [
    "CPR",
    "NCPR",
    "RegularizerParams",
    "SampledPotential",
    "cpr_value",
    "cpr_group_norms",
    "cpr_prox",
    "cpr_prox_vjp",
    "ncpr_prox",
    "ncpr_prox_vjp",
    "ncpr_potential_numeric",
    "potential_from_prox_samples",
    "ncpr_value",
]

CPR = "cpr"
NCPR = "ncpr"


@dataclass(frozen=True, eq=False)
class RegularizerParams:
    kind: str
    tau: np.ndarray
    gamma: float = 2.0
    lam: float = 1.0

    def __post_init__(self):
        kind = str(self.kind).lower()
        if kind not in (CPR, NCPR):
            raise ValueError(f"unknown regularizer kind {self.kind!r}")
        tau = np.atleast_1d(np.asarray(self.tau, dtype=float))
        if np.any(tau < 0) or not np.all(np.isfinite(tau)):
            raise ValueError("tau must be finite and non-negative")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "tau", tau)

    def scaled(self, factor: float) -> "RegularizerParams":
        """Copy with every ``tau`` multiplied by ``factor``."""
        return replace(self, tau=self.tau * factor)


def _blocks(a: np.ndarray) -> np.ndarray:
    p, h, w = a.shape[-3:]
    if h % 2 or w % 2:
        raise ValueError(f"CPR needs even spatial dimensions, got {h}x{w}")
    return a.reshape(*a.shape[:-2], h // 2, 2, w // 2, 2)


def cpr_group_norms(a: np.ndarray) -> np.ndarray:
    """Euclidean norm of every 2x2 block, shape ``(..., p, h/2, w/2)``."""
    return np.sqrt((_blocks(np.asarray(a, dtype=float)) ** 2).sum(axis=(-3, -1)))


def _channel(v: np.ndarray, ndim: int) -> np.ndarray:
    return np.asarray(v, dtype=float).reshape(-1, *([1] * ndim))


def cpr_value(a: np.ndarray, p: RegularizerParams) -> float:
    """``lam * sum_blocks sum_channels tau_p * ||block||_2``."""
    norms = cpr_group_norms(a)
    return float(p.lam * np.sum(_channel(p.tau, 2) * norms))


def cpr_prox(a: np.ndarray, step: float, p: RegularizerParams) -> np.ndarray:
    """Block soft-thresholding with threshold ``step * lam * tau_p``."""
    if step <= 0:
        raise ValueError("step must be positive")
    return _group_shrink(a, step * p.lam * np.asarray(p.tau, dtype=float))


def _group_shrink(a: np.ndarray, thresh: np.ndarray) -> np.ndarray:
    b = _blocks(np.asarray(a, dtype=float))
    nrm = np.sqrt((b**2).sum(axis=(-3, -1), keepdims=True))
    t = _channel(thresh, 4)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(nrm > t, 1.0 - t / nrm, 0.0)
    return (b * scale).reshape(a.shape)


def cpr_prox_vjp(a: np.ndarray, thresh: np.ndarray, g: np.ndarray):
    """Pull back ``g`` through ``u -> group_shrink(u, thresh)`` at ``a``.

    Returns the cotangent for ``a`` and for the per-channel threshold.
    """
    b = _blocks(np.asarray(a, dtype=float))
    gb = _blocks(np.asarray(g, dtype=float))
    nrm = np.sqrt((b**2).sum(axis=(-3, -1), keepdims=True))
    t = _channel(thresh, 4)
    active = nrm > t
    safe = np.where(active, nrm, 1.0)
    scale = np.where(active, 1.0 - t / safe, 0.0)
    bg = (b * gb).sum(axis=(-3, -1), keepdims=True)
    ga = scale * gb + np.where(active, t * bg / safe**3, 0.0) * b
    gt = np.where(active, -bg / safe, 0.0)
    gt = gt.reshape(-1, gt.shape[-5], *gt.shape[-4:]).sum(axis=(0, 2, 3, 4, 5))
    return ga.reshape(a.shape), gt


def _tau_like(tau: np.ndarray, x: np.ndarray) -> np.ndarray:
    tau = np.asarray(tau, dtype=float)
    if x.ndim >= 3 and tau.size > 1:
        return tau.reshape(-1, 1, 1)
    return tau.reshape(()) if tau.size == 1 else tau


def ncpr_prox(a: np.ndarray, p: RegularizerParams) -> np.ndarray:
    """Elementwise ``x |x|^g / (tau_p^g + |x|^g)`` with ``phi(0) = 0``.

    Code fields ``(..., p, h, w)`` use one ``tau`` per channel; a scalar
    ``tau`` broadcasts over any array.
    """
    a = np.asarray(a, dtype=float)
    tau = _tau_like(p.tau, a)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = p.gamma * (np.log(np.abs(a)) - np.log(tau))
    w = expit(np.nan_to_num(z, nan=-np.inf))
    return a * w


def ncpr_prox_vjp(a: np.ndarray, tau: np.ndarray, gamma: float, g: np.ndarray):
    """Cotangents of ``a`` and of per-channel ``tau`` for :func:`ncpr_prox`."""
    a = np.asarray(a, dtype=float)
    t = _tau_like(tau, a)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = gamma * (np.log(np.abs(a)) - np.log(t))
    w = expit(np.nan_to_num(z, nan=-np.inf))
    wv = w * (1.0 - w)
    ga = g * (w + gamma * wv)
    t_safe = np.where(t > 0, t, 1.0)
    dtau = np.where((a != 0) & (t > 0), -g * a * gamma * wv / t_safe, 0.0)
    gt = dtau.reshape(-1, *dtau.shape[-3:]).sum(axis=(0, 2, 3))
    return ga, gt


@dataclass(frozen=True, eq=False)
class SampledPotential:
    """Potential ``R`` sampled at ``u >= 0``; symmetric, linearly extrapolated."""

    u: np.ndarray
    values: np.ndarray
    slope_tail: float = field(default=0.0)

    def __call__(self, v: np.ndarray) -> np.ndarray:
        v = np.abs(np.asarray(v, dtype=float))
        out = np.interp(v, self.u, self.values)
        far = v > self.u[-1]
        if np.any(far):
            out = np.where(far, self.values[-1] + self.slope_tail * (v - self.u[-1]), out)
        return out

    def derivative(self, v: np.ndarray) -> np.ndarray:
        slopes = np.diff(self.values) / np.diff(self.u)
        mids = 0.5 * (self.u[1:] + self.u[:-1])
        return np.sign(v) * np.interp(np.abs(v), mids, slopes)


def potential_from_prox_samples(x: np.ndarray, phi: np.ndarray) -> SampledPotential:
    """Integrate ``R(phi(x)) = int_0^x (s - phi(s)) dphi(s)`` with ``R(0) = 0``.

    ``x`` must be sorted, non-negative and start at 0.  Samples where ``phi``
    is still exactly zero are merged (a dead zone around the origin); any
    other non-increasing step means ``phi`` is not a valid prox and is
    rejected.
    """
    x = np.asarray(x, dtype=float)
    phi = np.asarray(phi, dtype=float)
    step = np.diff(phi)
    bad = (step <= 0) & (phi[1:] > 0)
    if np.any(bad):
        raise ValueError(
            f"prox samples are not strictly increasing near x = {x[1:][bad][0]:.4g}"
        )
    # of a run of zero outputs keep the last sample: R'(0+) = x_edge - 0
    keep = np.concatenate([step > 0, [True]])
    x, phi = x[keep], phi[keep]
    integrand = x - phi
    values = np.concatenate(
        [[0.0], np.cumsum(0.5 * (integrand[1:] + integrand[:-1]) * np.diff(phi))]
    )
    return SampledPotential(u=phi, values=values, slope_tail=float(integrand[-1]))


def ncpr_potential_numeric(
    p: RegularizerParams, grid: np.ndarray | None = None, channel: int = 0
) -> SampledPotential:
    """Recover the potential whose prox is the NCPR shrinkage of one channel.

    The prox is sampled on the non-negative part of ``grid`` and integrated
    with the trapezoidal rule; the result is even in its argument.
    """
    tau = float(np.asarray(p.tau).ravel()[channel])
    if grid is None:
        grid = np.linspace(0.0, 20.0 * max(tau, 1e-3), 40001)
    x = np.unique(np.abs(np.asarray(grid, dtype=float)))
    if x[0] != 0.0:
        x = np.concatenate([[0.0], x])
    phi = ncpr_prox(x, RegularizerParams(NCPR, tau, gamma=p.gamma))
    return potential_from_prox_samples(x, phi)


def ncpr_value(a: np.ndarray, p: RegularizerParams, base: SampledPotential | None = None) -> float:
    """Sum of the numeric NCPR potential over a code field (approximate).

    The potential for weight ``tau`` is ``tau**2 * R_1(u / tau)`` where
    ``R_1`` is the potential for ``tau = 1``.
    """
    a = np.asarray(a, dtype=float)
    if base is None:
        base = ncpr_potential_numeric(
            RegularizerParams(NCPR, 1.0, gamma=p.gamma),
            np.linspace(0.0, 50.0, 100001),
        )
    tau = np.asarray(p.tau, dtype=float).reshape(-1, 1, 1)
    tau_safe = np.where(tau > 0, tau, 1.0)
    vals = np.where(tau > 0, tau_safe**2 * base(a / tau_safe), 0.0)
    return float(vals.sum())
