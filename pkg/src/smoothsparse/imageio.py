"""Grayscale image loading and saving.

Readable: PNG (8/16 bit, gray or colour), PGM, and anything else Pillow opens,
plus ``.npy`` float arrays.  Colour images are converted to luminance with the
Rec. 601 weights on floating-point values.  ``.npy`` round-trips exactly;
PNG output is 8-bit with values clamped to ``[0, 1]``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

__all__ = ["ImageFormatError", "load_image", "save_image", "load_image_dir", "SUPPORTED"]

SUPPORTED = (".png", ".pgm", ".npy", ".tif", ".tiff", ".jpg", ".jpeg", ".bmp")
_LUMA = np.array([0.299, 0.587, 0.114])


class ImageFormatError(ValueError):
    pass


def _unsupported(path: Path) -> ImageFormatError:
    return ImageFormatError(
        f"cannot read {path}; supported formats: {', '.join(SUPPORTED)}"
    )


def load_image(path: str | Path) -> np.ndarray:
    """Read a single-channel float image with values in ``[0, 1]``."""
    path = Path(path)
    if path.suffix.lower() == ".npy":
        arr = np.load(path, allow_pickle=False)
        if arr.ndim != 2:
            raise ImageFormatError(f"{path}: expected a 2-D array, got shape {arr.shape}")
        return arr.astype(float, copy=False)
    if path.suffix.lower() not in SUPPORTED:
        raise _unsupported(path)
    try:
        with Image.open(path) as im:
            mode = im.mode
            arr = np.asarray(im)
    except (UnidentifiedImageError, OSError) as exc:
        raise _unsupported(path) from exc
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        scale = 65535.0 if mode != "I" or arr.max() > 255 else 255.0
        return arr.astype(float) / scale
    if mode == "F":
        return arr.astype(float)
    if mode == "1":
        return arr.astype(float)
    arr = arr.astype(float) / 255.0
    if arr.ndim == 3:
        arr = arr[..., :3] @ _LUMA if arr.shape[2] >= 3 else arr[..., 0]
    return arr


def save_image(path: str | Path, x: np.ndarray) -> Path:
    """Write ``x`` as 8-bit PNG/PGM (clamped) or as an exact ``.npy`` array."""
    path = Path(path)
    x = np.asarray(x, dtype=float)
    suffix = path.suffix.lower()
    if suffix == ".npy":
        np.save(path, x)
        return path
    if suffix not in (".png", ".pgm", ".tif", ".tiff", ".bmp"):
        raise ImageFormatError(f"cannot write {suffix!r}; use .png, .pgm or .npy")
    q = np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q, mode="L").save(path)
    return path


def load_image_dir(directory: str | Path) -> list[np.ndarray]:
    """Load every supported image in ``directory`` (sorted by name)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ImageFormatError(f"{directory} is not a directory")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in SUPPORTED)
    if not files:
        raise ImageFormatError(f"no supported images in {directory}")
    return [load_image(p) for p in files]
