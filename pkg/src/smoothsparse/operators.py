"""Measurement operators for denoising, super-resolution and CS-MRI.

All operators act on real images.  ``MaskedFourier`` produces complex k-space
samples with the unitary DFT (``norm="ortho"``), laid out as returned by
``numpy.fft.fft2`` (DC at index ``[0, 0]``); its adjoint keeps the real part,
which is the exact adjoint of the map restricted to real images.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, spectral_norm_power_iter

__all__ = [
    "ForwardOperator",
    "Identity",
    "BlurStride",
    "MaskedFourier",
    "make_sr_operator",
    "gaussian_kernel",
    "generate_column_mask",
    "default_center_fraction",
    "simulate_measurements",
    "operator_norm",
    "operator_from_spec",
]


class ForwardOperator:
    kind = "abstract"

    def apply(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def normal(self, x: np.ndarray) -> np.ndarray:
        """``H^T H x``."""
        return self.adjoint(self.apply(x))

    def norm(self, shape: tuple[int, int]) -> float:
        raise NotImplementedError

    def spec(self) -> dict:
        """JSON-serialisable description, inverse of :func:`operator_from_spec`."""
        raise NotImplementedError


class Identity(ForwardOperator):
    kind = "identity"

    def apply(self, x):
        return np.asarray(x, dtype=float)

    def adjoint(self, y):
        return np.asarray(y, dtype=float)

    def normal(self, x):
        return np.asarray(x, dtype=float)

    def norm(self, shape):
        return 1.0

    def spec(self):
        return {"kind": self.kind}


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Sampled isotropic Gaussian on a ``size x size`` grid, summing to one."""
    if size < 1:
        raise ValueError("kernel size must be >= 1")
    t = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(t**2) / (2.0 * sigma**2)) if sigma > 0 else (t == 0).astype(float)
    k = np.outer(g, g)
    if k.sum() == 0:
        k = np.zeros((size, size))
        k[size // 2, size // 2] = 1.0
    return k / k.sum()


@dataclass(eq=False)
class BlurStride(ForwardOperator):
    """Circular convolution with ``kernel`` followed by ``stride`` subsampling.

    Kernel tap ``(a, b)`` sits at offset ``(a - size // 2, b - size // 2)``.
    """

    kernel: np.ndarray
    stride: int = 1
    _spectra: dict = field(default_factory=dict, repr=False)
    _norms: dict = field(default_factory=dict, repr=False)
    kind = "blur_stride"

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=float)
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    def _spectrum(self, shape):
        shape = tuple(shape)
        if shape[0] % self.stride or shape[1] % self.stride:
            raise ShapeError(f"image shape {shape} not divisible by stride {self.stride}")
        if shape not in self._spectra:
            kh, kw = self.kernel.shape
            grid = np.zeros(shape)
            a = (np.arange(kh) - kh // 2) % shape[0]
            b = (np.arange(kw) - kw // 2) % shape[1]
            np.add.at(grid, (a[:, None], b[None, :]), self.kernel)
            self._spectra[shape] = np.fft.rfft2(grid)
        return self._spectra[shape]

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        K = self._spectrum(x.shape)
        blurred = np.fft.irfft2(np.fft.rfft2(x) * K, s=x.shape)
        return blurred[:: self.stride, :: self.stride]

    def adjoint(self, y):
        y = np.asarray(y, dtype=float)
        shape = (y.shape[0] * self.stride, y.shape[1] * self.stride)
        up = np.zeros(shape)
        up[:: self.stride, :: self.stride] = y
        K = self._spectrum(shape)
        return np.fft.irfft2(np.fft.rfft2(up) * np.conj(K), s=shape)

    def norm(self, shape):
        shape = tuple(shape)
        if shape not in self._norms:
            self._norms[shape] = spectral_norm_power_iter(
                self.apply, self.adjoint, shape, iters=1000, tol=1e-14
            )
        return self._norms[shape]

    def spec(self):
        return {"kind": self.kind, "kernel": self.kernel.tolist(), "stride": self.stride}


def make_sr_operator(sigma_kernel: float = 2.0, size: int = 16, stride: int = 4) -> BlurStride:
    """Gaussian blur (``size x size``, std ``sigma_kernel``) then stride subsampling."""
    if size < 1 or stride < 1:
        raise ValueError("size and stride must be >= 1")
    return BlurStride(gaussian_kernel(size, sigma_kernel), stride)


@dataclass(eq=False)
class MaskedFourier(ForwardOperator):
    """``y = M F x`` with a boolean k-space mask in unshifted FFT layout."""

    mask: np.ndarray
    kind = "masked_fourier"

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2:
            raise ShapeError("mask must be 2-D")

    def _check(self, shape):
        if tuple(shape) != self.mask.shape:
            raise ShapeError(f"shape {tuple(shape)} does not match mask {self.mask.shape}")

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        self._check(x.shape)
        return np.where(self.mask, np.fft.fft2(x, norm="ortho"), 0.0)

    def adjoint(self, y):
        y = np.asarray(y)
        self._check(y.shape)
        return np.fft.ifft2(np.where(self.mask, y, 0.0), norm="ortho").real

    def normal(self, x):
        return self.adjoint(self.apply(x))

    def norm(self, shape):
        self._check(shape)
        return 1.0 if self.mask.any() else 0.0

    def spec(self):
        return {"kind": self.kind, "mask": self.mask.astype(int).tolist()}


def default_center_fraction(acc: int) -> float:
    return 0.04 * 8.0 / acc


def generate_column_mask(
    h: int,
    w: int,
    acc: int,
    center_fraction: float | None = None,
    seed: int | None = 0,
) -> np.ndarray:
    """Cartesian column-subsampling mask keeping ``w // acc`` columns.

    A band of ``floor(center_fraction * w)`` lowest-frequency columns is
    always kept; the rest are drawn uniformly without replacement.  The mask
    is returned in unshifted FFT layout (DC column at index 0), broadcast to
    ``(h, w)``.
    """
    if acc < 1:
        raise ValueError("acceleration must be >= 1")
    if center_fraction is None:
        center_fraction = default_center_fraction(acc)
    if not 0.0 <= center_fraction < 1.0:
        raise ValueError("center_fraction must lie in [0, 1)")
    n_keep = w // acc
    n_center = int(np.floor(center_fraction * w))
    if n_center > n_keep:
        raise ValueError(
            f"center band of {n_center} columns exceeds the {n_keep} kept columns"
        )
    centered = np.zeros(w, dtype=bool)
    start = w // 2 - n_center // 2
    centered[start : start + n_center] = True
    cols = np.fft.ifftshift(centered)
    rng = np.random.default_rng(seed)
    free = np.flatnonzero(~cols)
    cols[rng.choice(free, size=n_keep - n_center, replace=False)] = True
    return np.broadcast_to(cols, (h, w)).copy()


def simulate_measurements(
    H: ForwardOperator, x_true: np.ndarray, sigma: float, seed: int | None = 0
) -> np.ndarray:
    """``y = H x + n`` with i.i.d. Gaussian noise of standard deviation ``sigma``.

    For complex measurements the real and imaginary parts each get ``sigma``,
    and noise is only added on sampled k-space entries.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    y = H.apply(x_true)
    if sigma == 0:
        return y
    rng = np.random.default_rng(seed)
    if np.iscomplexobj(y):
        noise = sigma * (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape))
        if isinstance(H, MaskedFourier):
            noise = np.where(H.mask, noise, 0.0)
        return y + noise
    return y + sigma * rng.standard_normal(y.shape)


def operator_norm(H: ForwardOperator, shape: tuple[int, int]) -> float:
    return H.norm(shape)


def operator_from_spec(spec: dict) -> ForwardOperator:
    kind = spec.get("kind", "identity")
    if kind == "identity":
        return Identity()
    if kind == "blur_stride":
        if "kernel" in spec:
            return BlurStride(np.asarray(spec["kernel"], dtype=float), int(spec["stride"]))
        return make_sr_operator(
            float(spec.get("sigma", 2.0)), int(spec.get("size", 16)), int(spec.get("stride", 4))
        )
    if kind == "masked_fourier":
        return MaskedFourier(np.asarray(spec["mask"], dtype=bool))
    raise ValueError(f"unknown operator kind {kind!r}")
