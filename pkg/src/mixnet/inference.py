"""Full-resolution and tiled inference on single images."""

from __future__ import annotations

import resource
import time
import tracemalloc
import warnings
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .errors import ConfigError
from .model import forward
from .tensor import Tensor

TILED_WARNING = ("tiled inference is approximate: the global modulation only sees one tile at a "
                 "time, so results differ from whole-image inference")


@dataclass(frozen=True)
class TileSpec:
    tile: int
    overlap: int | None = None

    def resolved_overlap(self) -> int:
        return self.tile // 8 if self.overlap is None else self.overlap

    def validate(self, factor: int) -> None:
        if self.tile < 1:
            raise ConfigError(f"tile must be >= 1, got {self.tile}")
        ov = self.resolved_overlap()
        if not 0 <= ov < self.tile:
            raise ConfigError(f"overlap {ov} must be in [0, tile={self.tile})")
        if self.tile % factor:
            raise ConfigError(f"tile {self.tile} must be divisible by the downsample factor {factor}")


def pad_to_multiple(img: np.ndarray, factor: int) -> np.ndarray:
    """Reflect-pad the bottom/right of a ``(3, H, W)`` image up to multiples of ``factor``."""
    h, w = img.shape[1:]
    ph, pw = -h % factor, -w % factor
    if not (ph or pw):
        return img
    mode = "reflect" if ph < h and pw < w else "symmetric"
    return np.pad(img, ((0, 0), (0, ph), (0, pw)), mode=mode)


def _run(img: np.ndarray, weights, cfg: ModelConfig) -> np.ndarray:
    out = forward(Tensor(img[None]), weights, cfg)
    return out.data[0]


def _positions(extent: int, tile: int, overlap: int) -> list[int]:
    if extent <= tile:
        return [0]
    stride = tile - overlap
    starts = list(range(0, extent - tile, stride))
    starts.append(extent - tile)
    return starts


def _ramp(length: int, overlap: int, lead: bool, trail: bool) -> np.ndarray:
    w = np.ones(length)
    if overlap:
        ramp = (np.arange(overlap) + 0.5) / overlap
        if lead:
            w[:overlap] = np.minimum(w[:overlap], ramp)
        if trail:
            w[-overlap:] = np.minimum(w[-overlap:], ramp[::-1])
    return w


def restore_tiled(img: np.ndarray, weights, cfg: ModelConfig, spec: TileSpec) -> np.ndarray:
    """Overlapping tiles blended with linear feathering across each overlap band."""
    spec.validate(cfg.downsample_factor)
    _, h, w = img.shape
    th, tw = min(spec.tile, h), min(spec.tile, w)
    ov = spec.resolved_overlap()
    ys, xs = _positions(h, th, ov), _positions(w, tw, ov)
    acc = np.zeros(img.shape, dtype=np.float64)
    norm = np.zeros((h, w), dtype=np.float64)
    for i, y0 in enumerate(ys):
        wy = _ramp(th, min(ov, th), i > 0, i < len(ys) - 1)
        for j, x0 in enumerate(xs):
            wx = _ramp(tw, min(ov, tw), j > 0, j < len(xs) - 1)
            out = _run(img[:, y0:y0 + th, x0:x0 + tw], weights, cfg)
            mask = np.outer(wy, wx)
            acc[:, y0:y0 + th, x0:x0 + tw] += out * mask
            norm[y0:y0 + th, x0:x0 + tw] += mask
    return (acc / norm).astype(np.float32)


def restore(img: np.ndarray, weights, cfg: ModelConfig, tile: TileSpec | None = None) -> np.ndarray:
    """Restore a ``(3, H, W)`` image, padding to the downsample factor and cropping back.

    Returns unclamped float32 values; clamping happens at export.
    """
    h, w = img.shape[1:]
    padded = pad_to_multiple(np.asarray(img, dtype=np.float32), cfg.downsample_factor)
    if tile is None:
        out = _run(padded, weights, cfg)
    else:
        warnings.warn(TILED_WARNING, stacklevel=2)
        out = restore_tiled(padded, weights, cfg, tile)
    return np.ascontiguousarray(out[:, :h, :w])


@dataclass
class BenchResult:
    width: int
    height: int
    seconds: float
    peak_rss_bytes: int
    activation_peak_bytes: int


def peak_rss_bytes() -> int:
    # ru_maxrss is reported in KiB on Linux.
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024


def bench(weights, cfg: ModelConfig, width: int, height: int, seed: int = 0) -> BenchResult:
    """Time one whole-image forward pass and measure its memory high-water marks.

    ``activation_peak_bytes`` is the tracemalloc peak of arrays allocated during
    the pass; ``peak_rss_bytes`` is the process-lifetime resident high-water mark.
    """
    img = np.random.default_rng(seed).random((3, height, width), dtype=np.float32)
    tracemalloc.start()
    try:
        base = tracemalloc.get_traced_memory()[0]
        t0 = time.perf_counter()
        out = restore(img, weights, cfg)
        seconds = time.perf_counter() - t0
        peak = tracemalloc.get_traced_memory()[1] - base
    finally:
        tracemalloc.stop()
    del out
    return BenchResult(width, height, seconds, peak_rss_bytes(), peak)
