"""Differentiable operators on NCHW tensors.

Each op computes its output with numpy and, when a :class:`~mixnet.tensor.Tape`
is active and an input is tracked, records a closure mapping the output
gradient to input gradients.
"""

from __future__ import annotations

import math
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.special import expit, ndtr

from .errors import ConfigError, ShapeError, UsageError
from .tensor import Tensor, current_tape, make_result

_AXES = {"C": 0, "H": 1, "W": 2}

LN_EPS = 1e-6


def _check_rank4(t: Tensor, what: str) -> None:
    if t.data.ndim != 4:
        raise ShapeError(f"{what} expects a rank-4 (N,C,H,W) tensor, got shape {t.shape}")


def _parse_order(order) -> tuple[int, int, int]:
    if isinstance(order, str):
        order = tuple(order)
    try:
        perm = tuple(_AXES[a] if isinstance(a, str) else int(a) for a in order)
    except (KeyError, TypeError, ValueError):
        raise ConfigError(f"invalid permutation descriptor {order!r}") from None
    if sorted(perm) != [0, 1, 2]:
        raise ConfigError(f"invalid permutation descriptor {order!r}: must be a bijection over C,H,W")
    return perm


# -- shape manipulation ------------------------------------------------------

def permute(t: Tensor, order) -> Tensor:
    """Reorder the three non-batch axes.

    ``order`` names, for each output position, the input axis placed there,
    e.g. ``"WCH"`` maps ``(N,C,H,W)`` to ``(N,W,C,H)``. Letters refer to the
    current positions, so the same descriptor can be applied repeatedly.
    """
    _check_rank4(t, "permute")
    perm = _parse_order(order)
    axes = (0,) + tuple(1 + p for p in perm)
    inverse = tuple(int(i) for i in np.argsort(axes))
    out = np.ascontiguousarray(t.data.transpose(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return make_result(out, (t,), backward)


@lru_cache(maxsize=64)
def _interp_matrix(n_in: int, n_out: int, mode: str, dtype_name: str) -> np.ndarray:
    a = np.zeros((n_out, n_in), dtype=np.float64)
    if mode == "bilinear":
        scale = n_in / n_out
        for i in range(n_out):
            src = max((i + 0.5) * scale - 0.5, 0.0)
            i0 = min(int(math.floor(src)), n_in - 1)
            i1 = min(i0 + 1, n_in - 1)
            lam = src - i0
            a[i, i0] += 1.0 - lam
            a[i, i1] += lam
    else:
        for i in range(n_out):
            a[i, min((i * n_in) // n_out, n_in - 1)] = 1.0
    a = a.astype(dtype_name)
    a.setflags(write=False)
    return a


def interpolate(t: Tensor, height: int, width: int, mode: str = "bilinear") -> Tensor:
    """Resize the spatial axes.

    Bilinear uses half-pixel centres without corner alignment (source
    coordinates below zero are clamped); nearest picks ``floor(i * in / out)``.
    Both are separable linear maps, applied as ``A_h @ x @ A_w.T``.
    """
    _check_rank4(t, "interpolate")
    if mode not in ("bilinear", "nearest"):
        raise ConfigError(f"unknown interpolation mode {mode!r}")
    if height < 1 or width < 1:
        raise ShapeError(f"target extents must be >= 1, got {height}x{width}")
    h, w = t.shape[2:]
    dt = t.dtype.name
    a_h = None if h == height else _interp_matrix(h, height, mode, dt)
    a_w = None if w == width else _interp_matrix(w, width, mode, dt)
    out = t.data
    if a_w is not None:
        out = np.matmul(out, a_w.T)
    if a_h is not None:
        out = np.matmul(a_h, out)
    if out is t.data:
        out = out.copy()

    def backward(g):
        if a_h is not None:
            g = np.matmul(a_h.T, g)
        if a_w is not None:
            g = np.matmul(g, a_w)
        return (g,)

    return make_result(out, (t,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_rank4(a, "concat_channels")
    _check_rank4(b, "concat_channels")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels needs matching N,H,W; got {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward(g):
        return g[:, :ca].copy(), g[:, ca:].copy()

    return make_result(out, (a, b), backward)


def slice_channels(t: Tensor, start: int, stop: int) -> Tensor:
    _check_rank4(t, "slice_channels")
    if not 0 <= start < stop <= t.shape[1]:
        raise ShapeError(f"channel slice [{start}:{stop}] out of range for {t.shape}")
    out = t.data[:, start:stop].copy()
    shape = t.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return make_result(out, (t,), backward)


def space_to_depth(t: Tensor, factor: int) -> Tensor:
    """Fold each ``factor x factor`` patch into channels.

    Output channel ``c * factor**2 + i * factor + j`` holds input pixel
    offset ``(i, j)`` of channel ``c``.
    """
    _check_rank4(t, "space_to_depth")
    n, c, h, w = t.shape
    d = factor
    if h % d or w % d:
        raise ShapeError(f"space_to_depth needs H and W divisible by {d}, got {h}x{w}")
    if d == 1:
        return make_result(t.data.copy(), (t,), lambda g: (g,))
    out = t.data.reshape(n, c, h // d, d, w // d, d).transpose(0, 1, 3, 5, 2, 4)
    out = np.ascontiguousarray(out).reshape(n, c * d * d, h // d, w // d)

    def backward(g):
        g = g.reshape(n, c, d, d, h // d, w // d).transpose(0, 1, 4, 2, 5, 3)
        return (np.ascontiguousarray(g).reshape(n, c, h, w),)

    return make_result(out, (t,), backward)


def depth_to_space(t: Tensor, factor: int) -> Tensor:
    """Inverse of :func:`space_to_depth`."""
    _check_rank4(t, "depth_to_space")
    n, cd, h, w = t.shape
    d = factor
    if cd % (d * d):
        raise ShapeError(f"depth_to_space needs channels divisible by {d * d}, got {cd}")
    if d == 1:
        return make_result(t.data.copy(), (t,), lambda g: (g,))
    c = cd // (d * d)
    out = t.data.reshape(n, c, d, d, h, w).transpose(0, 1, 4, 2, 5, 3)
    out = np.ascontiguousarray(out).reshape(n, c, h * d, w * d)

    def backward(g):
        g = g.reshape(n, c, h, d, w, d).transpose(0, 1, 3, 5, 2, 4)
        return (np.ascontiguousarray(g).reshape(n, cd, h, w),)

    return make_result(out, (t,), backward)


# -- elementwise arithmetic ----------------------------------------------------

def _broadcast_kind(a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "same"
    if a.data.ndim == 4 and b.data.ndim == 4 and a.shape[:2] == b.shape[:2]:
        if b.shape[2:] == (1, 1):
            return "b"
        if a.shape[2:] == (1, 1):
            return "a"
    raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=(2, 3), keepdims=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_kind(a, b)
    out = a.data + b.data
    sa, sb = a.shape, b.shape

    def backward(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return make_result(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_kind(a, b)
    out = a.data - b.data
    sa, sb = a.shape, b.shape

    def backward(g):
        return _reduce_to(g, sa), -_reduce_to(g, sb)

    return make_result(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; a ``(N,C,1,1)`` operand broadcasts over H, W."""
    _broadcast_kind(a, b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def backward(g):
        ga = _reduce_to(g * bd, ad.shape) if a.requires_grad else None
        gb = _reduce_to(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward)


def scale(t: Tensor, factor: float) -> Tensor:
    f = t.dtype.type(factor)
    return make_result(t.data * f, (t,), lambda g: (g * f,))


# -- convolutions ---------------------------------------------------------------

def _check_conv(x: Tensor, w: Tensor, b: Tensor, kernel: int) -> None:
    _check_rank4(x, f"conv{kernel}x{kernel}")
    expected_rank = 2 if kernel == 1 else 4
    if w.data.ndim != expected_rank or (kernel == 3 and w.shape[2:] != (3, 3)):
        raise ShapeError(f"conv{kernel}x{kernel} weight has unexpected shape {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv{kernel}x{kernel}: input has {x.shape[1]} channels, weight expects {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"conv{kernel}x{kernel}: bias shape {b.shape} != ({w.shape[0]},)")


def conv1x1(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``out[n,o,h,w] = b[o] + sum_i w[o,i] * x[n,i,h,w]`` with ``w`` of shape (Cout, Cin)."""
    _check_conv(x, w, b, 1)
    n, ci, h, wd = x.shape
    co = w.shape[0]
    xd = x.data.reshape(n, ci, h * wd)
    wm = w.data
    out = np.empty((n, co, h * wd), dtype=x.dtype)
    for i in range(n):
        np.matmul(wm, xd[i], out=out[i])
        out[i] += b.data[:, None]
    out = out.reshape(n, co, h, wd)

    def backward(g):
        g2 = g.reshape(n, co, h * wd)
        gx = np.matmul(wm.T, g2).reshape(n, ci, h, wd) if x.requires_grad else None
        gw = sum(g2[i] @ xd[i].T for i in range(n)) if w.requires_grad else None
        gb = g2.sum(axis=(0, 2)) if b.requires_grad else None
        return gx, gw, gb

    return make_result(out, (x, w, b), backward)


def conv3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1; ``w`` is (Cout, Cin, 3, 3).

    Computed as nine shifted 1x1 products so the working set stays at a few
    feature maps even at UHD sizes.
    """
    _check_conv(x, w, b, 3)
    n, ci, h, wd = x.shape
    co = w.shape[0]
    dt = x.dtype
    taps = [np.ascontiguousarray(w.data[:, :, ky, kx]) for ky in range(3) for kx in range(3)]
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, co, h * wd), dtype=dt)
    shifted = np.empty((ci, h, wd), dtype=dt)
    prod = np.empty((co, h * wd), dtype=dt)
    for i in range(n):
        for k, wk in enumerate(taps):
            ky, kx = divmod(k, 3)
            shifted[...] = xp[i, :, ky:ky + h, kx:kx + wd]
            np.matmul(wk, shifted.reshape(ci, -1), out=prod)
            out[i] += prod
        out[i] += b.data[:, None]
    del shifted, prod
    out = out.reshape(n, co, h, wd)

    def backward(g):
        g2 = g.reshape(n, co, h * wd)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(w.data) if w.requires_grad else None
        buf = np.empty((ci, h, wd), dtype=dt)
        for i in range(n):
            for k, wk in enumerate(taps):
                ky, kx = divmod(k, 3)
                if gw is not None:
                    buf[...] = xp[i, :, ky:ky + h, kx:kx + wd]
                    gw[:, :, ky, kx] += g2[i] @ buf.reshape(ci, -1).T
                if gxp is not None:
                    gxp[i, :, ky:ky + h, kx:kx + wd] += (wk.T @ g2[i]).reshape(ci, h, wd)
        gx = gxp[:, :, 1:-1, 1:-1].copy() if gxp is not None else None
        gb = g2.sum(axis=(0, 2)) if b.requires_grad else None
        return gx, gw, gb

    return make_result(out, (x, w, b), backward)


# -- activations ------------------------------------------------------------------

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    xd = x.data
    cdf = ndtr(xd)
    if current_tape() is None or not x.requires_grad:
        # Nothing will call backward, so reuse the CDF buffer for the output.
        cdf *= xd
        return Tensor._wrap(cdf)
    out = xd * cdf

    def backward(g):
        pdf = np.exp(-0.5 * xd * xd) * xd.dtype.type(_INV_SQRT_2PI)
        return (g * (cdf + xd * pdf),)

    return make_result(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    out = np.maximum(xd, 0)
    return make_result(out, (x,), lambda g: (g * (xd > 0),))


def _sigmoid_backward(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * y * (1 - y)


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    # Looked up at call time so tests can inject a faulty derivative.
    return make_result(y, (x,), lambda g: (_sigmoid_backward(y, g),))


# -- normalisation and pooling ------------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Per-pixel normalisation across channels (population variance) with affine."""
    _check_rank4(x, "layer_norm")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm affine must have shape ({c},), got {gamma.shape} and {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * rstd
    del xc
    gm = gamma.data[None, :, None, None]
    out = xhat * gm + beta.data[None, :, None, None]
    if not x.requires_grad and not gamma.requires_grad:
        del xhat
        xhat = None

    def backward(g):
        gx = None
        if x.requires_grad:
            gxh = g * gm
            gx = rstd * (gxh - gxh.mean(axis=1, keepdims=True)
                         - xhat * (gxh * xhat).mean(axis=1, keepdims=True))
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    _check_rank4(x, "global_avg_pool")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    inv = x.dtype.type(1.0 / (h * w))

    def backward(g):
        return (np.broadcast_to(g * inv, (n, c, h, w)).copy(),)

    return make_result(out, (x,), backward)


# -- reductions and losses --------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=x.dtype), dtype=x.dtype).reshape(1)
    shape = x.shape
    return make_result(out, (x,), lambda g: (np.full(shape, g[0], dtype=g.dtype),))


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.size)


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error over every element; subgradient 0 at ties."""
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    numel = diff.size
    out = np.asarray(np.abs(diff).mean(dtype=np.float64), dtype=pred.dtype).reshape(1)

    def backward(g):
        s = np.sign(diff) * (g[0] / numel)
        return s, -s

    return make_result(out, (pred, target), backward)


def project(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(x * weights)`` for a fixed array of weights."""
    if weights.shape != x.shape:
        raise ShapeError(f"projection weights {weights.shape} do not match {x.shape}")
    wd = weights.astype(x.dtype)
    out = np.asarray((x.data * wd).sum(dtype=np.float64), dtype=x.dtype).reshape(1)
    return make_result(out, (x,), lambda g: (wd * g[0],))


def assert_scalar(t: Tensor) -> None:
    if t.size != 1:
        raise UsageError(f"expected a scalar tensor, got shape {t.shape}")


__all__: Sequence[str] = [
    "permute", "interpolate", "concat_channels", "slice_channels", "space_to_depth",
    "depth_to_space", "add", "sub", "mul", "scale", "conv1x1", "conv3x3", "gelu", "relu",
    "sigmoid", "layer_norm", "global_avg_pool", "sum_all", "mean_all", "l1_loss", "project",
]
