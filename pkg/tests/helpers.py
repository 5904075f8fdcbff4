import numpy as np
from PIL import Image

from mixnet.model import init_weights


def passthrough_weights(cfg):
    """Weights under which the network returns its input exactly.

    The downsampler copies the 3*d*d rearranged channels into the first feature
    channels, every block weight and bias is zero (so each block is the
    identity), and the upsampler halves the doubled residual sum.
    """
    k = 3 * cfg.downsample_factor ** 2
    assert cfg.channels >= k
    w = init_weights(cfg)
    for p in w.values():
        if not p.name.endswith(".gamma"):
            p.data[:] = 0
    for i in range(k):
        w["down.conv.weight"].data[i, i, 1, 1] = 1.0
        w["up.conv.weight"].data[i, i, 1, 1] = 0.5
    return w


def write_png(path, img):
    """Save a ``(3, H, W)`` float image in [0, 1] or a ``(H, W, 3)`` uint8 array."""
    arr = img if img.dtype == np.uint8 else np.floor(np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(np.ascontiguousarray(arr)).save(path)


def write_pairs(root, pairs):
    (root / "degraded").mkdir(parents=True, exist_ok=True)
    (root / "clean").mkdir(parents=True, exist_ok=True)
    for p in pairs:
        write_png(root / "degraded" / f"{p.id}.png", p.degraded)
        write_png(root / "clean" / f"{p.id}.png", p.clean)
    return root
