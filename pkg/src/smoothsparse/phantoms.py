"""Piecewise-constant synthetic test images."""

from __future__ import annotations

import numpy as np

__all__ = ["head_phantom"]


def head_phantom(n: int = 64, count: int = 8, seed: int = 0) -> np.ndarray:
    """Random head-like phantom in ``[0, 1]``.

    A bright elliptical rim around a darker interior holding ``count`` random
    ellipses, all with randomly perturbed sizes, positions and intensities.
    """
    rng = np.random.default_rng(seed)
    t = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    yy, xx = np.meshgrid(t, t, indexing="ij")

    def ellipse(cy, cx, ry, rx, angle=0.0):
        c, s = np.cos(angle), np.sin(angle)
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0

    ry, rx = rng.uniform(0.8, 0.92), rng.uniform(0.6, 0.72)
    rim = rng.uniform(0.03, 0.07)
    img = 1.0 * ellipse(0, 0, ry, rx) - rng.uniform(0.7, 0.85) * ellipse(0, 0, ry - rim, rx - rim)
    for _ in range(count):
        cy = rng.uniform(-0.6, 0.6) * (ry - rim)
        cx = rng.uniform(-0.6, 0.6) * (rx - rim)
        img += rng.uniform(-0.15, 0.3) * ellipse(cy, cx, *rng.uniform(0.04, 0.3, 2),
                                                 rng.uniform(0, np.pi))
    return np.clip(img, 0.0, 1.0)
