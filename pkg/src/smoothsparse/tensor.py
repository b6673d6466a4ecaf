"""Circular patch operators expressed as convolutions.

Images are ``(h, w)`` float arrays and code fields are ``(p, h, w)`` arrays
(one channel per atom).  A dictionary is a ``(d, p)`` matrix whose columns are
atoms of an odd ``side x side`` patch flattened in row-major order, with
``d = side**2``.

Patch ``k`` is the ``side x side`` neighbourhood centred on pixel ``k`` under
circular (periodic) boundary conditions, so tap ``(a, b)`` of the patch at
pixel ``(i, j)`` reads ``x[(i + a - r) % h, (j + b - r) % w]`` with
``r = side // 2``.

With these conventions

* ``conv2d_circular(x, K)[:, i, j] = K.T @ P_ij x``  (analysis, a correlation)
* ``conv2d_transpose_circular(a, K) = sum_k P_k.T @ K @ a_k``  (synthesis,
  a convolution with the flipped atoms)
* ``patch_outer(x, a) = sum_k (P_k x) a_k.T``  (the kernel gradient of both)

FFT convention: ``numpy.fft`` default, i.e. unnormalised forward transform
and ``1/n`` normalised inverse.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

__all__ = [
    "PatchConv",
    "conv2d_circular",
    "conv2d_transpose_circular",
    "patch_outer",
    "extract_patches",
    "patch_gram_apply",
    "patch_gram_symbol",
    "spectral_norm_power_iter",
    "side_from_dim",
    "ShapeError",
]


class ShapeError(ValueError):
    """Raised when array shapes are inconsistent with an operation."""


def side_from_dim(d: int) -> int:
    """Return the odd patch side for a patch dimension ``d = side**2``."""
    side = int(round(np.sqrt(d)))
    if side * side != d or side % 2 == 0:
        raise ShapeError(f"patch dimension {d} is not the square of an odd side")
    return side


def _tap_offsets(side: int) -> tuple[np.ndarray, np.ndarray]:
    r = side // 2
    a, b = np.meshgrid(np.arange(side) - r, np.arange(side) - r, indexing="ij")
    return a.ravel(), b.ravel()


def _embed_kernels(K: np.ndarray, side: int, shape: tuple[int, int]) -> np.ndarray:
    """Place each atom of ``K`` (d, p) on an ``(p, h, w)`` periodic grid."""
    h, w = shape
    da, db = _tap_offsets(side)
    grid = np.zeros((K.shape[1], h, w))
    # add.at keeps taps correct when side exceeds the grid and taps alias
    np.add.at(grid, (slice(None), da % h, db % w), K.T)
    return grid


def _check_kernel(K: np.ndarray, shape: tuple[int, int]) -> int:
    if K.ndim != 2:
        raise ShapeError(f"dictionary must be 2-D (d, p), got shape {K.shape}")
    side = side_from_dim(K.shape[0])
    if side > min(shape):
        raise ShapeError(f"patch side {side} exceeds image size {shape}")
    return side


class PatchConv:
    """Precomputed spectra of a dictionary for a fixed image size.

    Reusing one instance across solver iterations avoids re-embedding and
    re-transforming the atoms.
    """

    def __init__(self, K: np.ndarray, shape: tuple[int, int]):
        K = np.asarray(K, dtype=float)
        self.shape = (int(shape[0]), int(shape[1]))
        self.side = _check_kernel(K, self.shape)
        self.count = K.shape[1]
        self._spec = np.fft.rfft2(_embed_kernels(K, self.side, self.shape))

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Analysis: ``(..., h, w) -> (..., p, h, w)``."""
        if x.shape[-2:] != self.shape:
            raise ShapeError(f"image shape {x.shape[-2:]} != {self.shape}")
        X = np.fft.rfft2(x)[..., None, :, :]
        return np.fft.irfft2(np.conj(self._spec) * X, s=self.shape)

    def adjoint(self, a: np.ndarray) -> np.ndarray:
        """Synthesis: ``(..., p, h, w) -> (..., h, w)``."""
        if a.shape[-3:] != (self.count, *self.shape):
            raise ShapeError(
                f"code shape {a.shape[-3:]} != {(self.count, *self.shape)}"
            )
        A = np.fft.rfft2(a)
        return np.fft.irfft2((self._spec * A).sum(axis=-3), s=self.shape)


def conv2d_circular(x: np.ndarray, K: np.ndarray) -> np.ndarray:
    """Inner products of every circular patch of ``x`` with every atom of ``K``."""
    x = np.asarray(x, dtype=float)
    if x.ndim < 2:
        raise ShapeError("image must be at least 2-D")
    return PatchConv(K, x.shape[-2:]).forward(x)


def conv2d_transpose_circular(a: np.ndarray, K: np.ndarray) -> np.ndarray:
    """Exact adjoint of :func:`conv2d_circular`."""
    a = np.asarray(a, dtype=float)
    if a.ndim < 3:
        raise ShapeError("code field must be at least 3-D (p, h, w)")
    if a.shape[-3] != np.shape(K)[1]:
        raise ShapeError(f"{a.shape[-3]} code channels but {np.shape(K)[1]} atoms")
    return PatchConv(K, a.shape[-2:]).adjoint(a)


def patch_outer(x: np.ndarray, a: np.ndarray, side: int) -> np.ndarray:
    """Return ``sum_k (P_k x) a_k^T`` as a ``(side**2, p)`` matrix.

    This is the gradient of ``<a, conv2d_circular(x, K)>`` with respect to
    ``K`` and of ``<x, conv2d_transpose_circular(a, K)>`` likewise.  Leading
    batch axes of ``x`` and ``a`` are summed.
    """
    x = np.asarray(x, dtype=float)
    a = np.asarray(a, dtype=float)
    shape = x.shape[-2:]
    if a.shape[-2:] != shape:
        raise ShapeError(f"spatial shapes differ: {a.shape[-2:]} vs {shape}")
    X = np.fft.rfft2(x)[..., None, :, :]
    corr = np.fft.irfft2(np.conj(np.fft.rfft2(a)) * X, s=shape)
    corr = corr.reshape(-1, *corr.shape[-3:]).sum(axis=0)
    da, db = _tap_offsets(side)
    h, w = shape
    return corr[:, da % h, db % w].T


def extract_patches(x: np.ndarray, side: int) -> np.ndarray:
    """Materialise all ``n`` circular patches as a ``(side**2, n)`` matrix.

    Column ``k`` is the patch centred at pixel ``k`` in row-major pixel order.
    Meant for small images and reference computations.
    """
    x = np.asarray(x, dtype=float)
    if side % 2 == 0 or side < 1:
        raise ShapeError(f"patch side must be odd and positive, got {side}")
    if x.ndim != 2 or side > min(x.shape):
        raise ShapeError(f"cannot take {side}x{side} patches of shape {x.shape}")
    h, w = x.shape
    da, db = _tap_offsets(side)
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    rows = (ii.ravel()[None, :] + da[:, None]) % h
    cols = (jj.ravel()[None, :] + db[:, None]) % w
    return x[rows, cols]


def patch_gram_apply(x: np.ndarray, Qconv: PatchConv | None, G: np.ndarray | None,
                     d: int) -> np.ndarray:
    """Apply ``sum_k P_k^T (I - QQ^T)^2 P_k`` without forming patches.

    ``G = Q^T Q``; when ``Q`` is exactly orthonormal this is the
    projected patch Gram operator ``sum_k Phat_k^T Phat_k``.
    """
    out = d * x
    if Qconv is None or Qconv.count == 0:
        return out
    C = Qconv.forward(x)
    GC = np.einsum("pq,...qhw->...phw", G, C)
    return out + Qconv.adjoint(GC - 2.0 * C)


def patch_gram_symbol(Q: np.ndarray, side: int, h: int, w: int) -> np.ndarray:
    """Fourier symbol (eigenvalues) of the projected patch Gram operator.

    The operator is shift invariant, so applying it to a delta image yields
    its impulse response and the real 2-D DFT of that response is its
    spectrum.  ``symbol.max()`` is the spectral norm.
    """
    Q = np.asarray(Q, dtype=float).reshape(side * side, -1)
    delta = np.zeros((h, w))
    delta[0, 0] = 1.0
    if Q.shape[1] == 0:
        resp = patch_gram_apply(delta, None, None, side * side)
    else:
        resp = patch_gram_apply(delta, PatchConv(Q, (h, w)), Q.T @ Q, side * side)
    return np.fft.fft2(resp).real


def spectral_norm_power_iter(
    apply_A: Callable[[np.ndarray], np.ndarray],
    apply_AT: Callable[[np.ndarray], np.ndarray],
    shape: tuple[int, ...],
    iters: int = 100,
    tol: float = 1e-10,
    seed: int = 0,
) -> float:
    """Largest singular value of ``A`` by power iteration on ``A^T A``.

    Real-valued inputs of ``shape`` are assumed; ``A`` may map into a
    complex space, in which case ``apply_AT`` must return the real adjoint.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(shape)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        u = np.real(apply_AT(apply_A(v)))
        lam_new = float(np.vdot(v, u).real)
        nrm = np.linalg.norm(u)
        if nrm == 0.0:
            return 0.0
        v = u / nrm
        if abs(lam_new - lam) <= tol * max(lam_new, 1e-300):
            lam = lam_new
            break
        lam = lam_new
    return float(np.sqrt(max(lam, 0.0)))
