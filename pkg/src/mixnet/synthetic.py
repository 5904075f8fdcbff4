"""Small synthetic paired datasets for smoke tests and sanity training runs."""

from __future__ import annotations

import numpy as np

from .training import ImagePair


def smooth_textures(n: int, size: int, seed: int = 0, waves: int = 4) -> np.ndarray:
    """``n`` RGB images ``(n, 3, size, size)`` in [0.05, 0.95] built from random sinusoids."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    out = np.empty((n, 3, size, size))
    for i in range(n):
        for c in range(3):
            acc = np.zeros((size, size))
            for _ in range(waves):
                fy, fx = rng.uniform(-3, 3, size=2) * 2 * np.pi / size
                acc += rng.uniform(0.3, 1.0) * np.sin(fy * yy + fx * xx + rng.uniform(0, 2 * np.pi))
            acc = (acc - acc.min()) / (acc.max() - acc.min() + 1e-12)
            out[i, c] = 0.05 + 0.9 * acc
    return out.astype(np.float32)


def lowlight_pairs(n: int = 8, size: int = 64, seed: int = 0,
                   gain: float = 0.35, gamma: float = 1.4) -> list[ImagePair]:
    """Clean textures paired with a darkened, gamma-compressed copy."""
    clean = smooth_textures(n, size, seed)
    degraded = (gain * clean ** gamma).astype(np.float32)
    return [ImagePair(degraded[i], clean[i], f"pair{i:02d}") for i in range(n)]


def offset_pairs(n: int = 4, size: int = 32, offset: float = 16 / 255, seed: int = 0) -> list[ImagePair]:
    """Pairs with ``clean = degraded + offset`` everywhere."""
    degraded = smooth_textures(n, size, seed) * 0.8
    clean = (degraded + np.float32(offset)).astype(np.float32)
    return [ImagePair(degraded[i], clean[i], f"pair{i:02d}") for i in range(n)]
