"""Procedural face-like test images (aligned layout, random colours and jitter)."""

from __future__ import annotations

import numpy as np


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def toy_face(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """One (size, size, 3) image in [0, 1] with face, eyes and mouth near the canonical boxes."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    bg = rng.uniform(0.1, 0.5, 3)
    img = np.broadcast_to(bg, (size, size, 3)).copy()
    # soft vertical background gradient
    img += (yy[..., None] - 0.5) * rng.uniform(-0.2, 0.2)
    skin = rng.uniform([0.55, 0.35, 0.25], [0.95, 0.75, 0.6])
    j = lambda s: rng.uniform(-s, s)  # noqa: E731
    face = _ellipse(yy, xx, 0.52 + j(0.02), 0.5 + j(0.02), 0.42 + j(0.03), 0.34 + j(0.03))
    img[face] = skin
    iris = rng.uniform(0.0, 0.4, 3)
    for cx in (0.325, 0.675):
        ey, ex = 0.40 + j(0.02), cx + j(0.02)
        img[_ellipse(yy, xx, ey, ex, 0.05, 0.09)] = 0.95
        img[_ellipse(yy, xx, ey, ex, 0.04, 0.04)] = iris
        img[_ellipse(yy, xx, ey - 0.09, ex, 0.015, 0.09)] = skin * 0.45
    lips = rng.uniform([0.5, 0.1, 0.1], [0.9, 0.4, 0.4])
    img[_ellipse(yy, xx, 0.72 + j(0.02), 0.5 + j(0.02), 0.045 + j(0.01), 0.15 + j(0.02))] = lips
    img[_ellipse(yy, xx, 0.57, 0.5 + j(0.01), 0.06, 0.025)] = skin * 0.8
    return np.clip(img, 0.0, 1.0)


def toy_faces(n: int, size: int = 64, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.stack([toy_face(rng, size) for _ in range(n)])


def quantize_8bit(images: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid so in-memory images match their PNG files exactly."""
    return np.round(np.clip(images, 0.0, 1.0) * 255.0) / 255.0
