"""PSNR and SSIM over RGB channels."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InputError, ShapeError
from .tensor import Tensor

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)`` over all elements; identical inputs give :data:`PSNR_CAP`."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    n = k.size
    x = sliding_window_view(x, n, axis=-1) @ k
    return np.moveaxis(sliding_window_view(np.moveaxis(x, -2, -1), n, axis=-1) @ k, -1, -2)


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean single-scale SSIM of every channel plane of ``(..., H, W)`` inputs.

    Gaussian 11x11 window (sigma 1.5), ``K1 = 0.01``, ``K2 = 0.03``, valid
    region only (no padding), averaged over channels and positions.
    """
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim < 2 or min(a.shape[-2:]) < SSIM_WINDOW:
        raise InputError(f"ssim needs H, W >= {SSIM_WINDOW}, got shape {a.shape}")
    k = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = _filter_valid(a, k)
    mu_b = _filter_valid(b, k)
    mu_ab = mu_a * mu_b
    mu_aa = mu_a * mu_a
    mu_bb = mu_b * mu_b
    var_a = _filter_valid(a * a, k) - mu_aa
    var_b = _filter_valid(b * b, k) - mu_bb
    cov = _filter_valid(a * b, k) - mu_ab
    num = (2 * mu_ab + c1) * (2 * cov + c2)
    den = (mu_aa + mu_bb + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    ids: list[str] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)

    def add(self, image_id: str, restored, reference) -> None:
        self.ids.append(image_id)
        self.psnr.append(psnr(restored, reference))
        self.ssim.append(ssim(restored, reference))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def to_tsv(self) -> str:
        lines = ["id\tpsnr\tssim"]
        lines += [f"{i}\t{p:.6f}\t{s:.6f}" for i, p, s in zip(self.ids, self.psnr, self.ssim)]
        lines.append(f"MEAN\t{self.mean_psnr:.6f}\t{self.mean_ssim:.6f}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_tsv(), encoding="utf-8")
