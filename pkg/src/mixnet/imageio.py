"""8-bit RGB image files and paired-directory discovery."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import InputError

IMAGE_SUFFIXES = {".png", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg"}


def load_image(path) -> np.ndarray:
    """Read an image as a ``(3, H, W)`` float32 array scaled to [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise InputError(f"cannot read image {path}: {exc}") from None
    return (arr.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


def quantize(img: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and map to uint8 ``(H, W, 3)`` with round-half-up."""
    v = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.ascontiguousarray(np.floor(v * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0))


def save_image(path, img: np.ndarray) -> None:
    Image.fromarray(quantize(img)).save(path)


def list_images(directory) -> dict[str, Path]:
    d = Path(directory)
    if not d.is_dir():
        raise InputError(f"not a directory: {d}")
    return {p.name: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file()}


def match_pairs(degraded_dir, clean_dir) -> tuple[list[tuple[str, Path, Path]], list[str]]:
    """Pair files by identical name; returns (pairs, unmatched names with their side)."""
    deg = list_images(degraded_dir)
    cln = list_images(clean_dir)
    pairs = [(name, deg[name], cln[name]) for name in deg if name in cln]
    unmatched = [f"{degraded_dir}/{n}" for n in deg if n not in cln]
    unmatched += [f"{clean_dir}/{n}" for n in cln if n not in deg]
    return pairs, unmatched
