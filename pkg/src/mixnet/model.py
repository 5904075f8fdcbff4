"""Full network: DownSampler -> stacked FMBs -> feature residual -> UpSampler."""

from __future__ import annotations

import re
from collections import OrderedDict

import numpy as np

from . import ops
from .blocks import Scope, fmb_forward, fmb_specs, ParamSpec, _conv
from .config import STAGE_AXES, ModelConfig
from .errors import InputError, SchemaMismatchError
from .tensor import Parameter, Tensor, get_dtype
from .weights import WeightStore


def param_specs(cfg: ModelConfig) -> "OrderedDict[str, ParamSpec]":
    d2 = 3 * cfg.downsample_factor ** 2
    specs: OrderedDict[str, ParamSpec] = OrderedDict()
    for k, v in _conv("down.conv", cfg.channels, d2, 1.0, kernel=3).items():
        specs[k] = v
    block = fmb_specs(cfg)
    for i in range(cfg.num_fmb):
        for k, v in block.items():
            specs[f"fmb.{i}.{k}"] = v
    for k, v in _conv("up.conv", d2, cfg.channels, 1.0, kernel=3).items():
        specs[k] = v
    return specs


def param_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    return OrderedDict((k, s.shape) for k, s in param_specs(cfg).items())


def param_count(cfg: ModelConfig) -> int:
    """Closed-form number of learnable scalars."""
    c, s, d = cfg.channels, cfg.gfml_size, cfg.downsample_factor
    samplers = (27 * d * d * c + c) + (27 * d * d * c + 3 * d * d)
    block = 0
    branches = int(cfg.use_gfml) + int(cfg.use_lfml)
    if branches:
        block += 2 * c  # ln1
        block += branches * c * c + c  # fuse
    if cfg.use_gfml:
        for axis in cfg.gfml_stages:
            e = c if axis == "C" else s
            block += e * e + e
    if cfg.use_lfml:
        hidden = c // cfg.lfml_reduction
        block += 2 * hidden * c + hidden + c
    if cfg.use_ffl:
        block += 2 * c  # ln2
        block += 18 * c * c + 2 * c + 2 * c * c + c
    return samplers + cfg.num_fmb * block


def param_breakdown(cfg: ModelConfig) -> "OrderedDict[str, int]":
    """Scalar counts grouped by top-level module (``down``, ``fmb.i``, ``up``)."""
    out: OrderedDict[str, int] = OrderedDict()
    for name, spec in param_specs(cfg).items():
        parts = name.split(".")
        key = ".".join(parts[:2]) if parts[0] == "fmb" else parts[0]
        out[key] = out.get(key, 0) + int(np.prod(spec.shape))
    return out


def init_weights(cfg: ModelConfig, seed: int = 0) -> WeightStore:
    """Kaiming-uniform weights (bound ``gain * sqrt(3 / fan_in)``), zero biases, unit LN gains."""
    rng = np.random.default_rng(seed)
    dtype = get_dtype()
    store = WeightStore()
    for name, spec in param_specs(cfg).items():
        if spec.init == "zeros":
            arr = np.zeros(spec.shape)
        elif spec.init == "ones":
            arr = np.ones(spec.shape)
        else:
            bound = spec.gain * np.sqrt(3.0 / spec.fan_in)
            arr = rng.uniform(-bound, bound, size=spec.shape)
        store.add(Parameter(arr.astype(dtype), name=name))
    return store


def config_from_weights(arrays) -> ModelConfig:
    """Recover the :class:`ModelConfig` implied by a weight table's names and shapes."""
    names = list(arrays)
    try:
        down = arrays["down.conv.weight"]
        channels, d2 = int(down.shape[0]), int(down.shape[1])
    except KeyError:
        raise SchemaMismatchError("missing tensors: down.conv.weight", missing=["down.conv.weight"]) from None
    d = int(round(np.sqrt(d2 / 3)))
    if 3 * d * d != d2:
        raise SchemaMismatchError(f"down.conv.weight has {d2} input channels, not 3*d^2")
    indices = {int(m.group(1)) for n in names if (m := re.match(r"fmb\.(\d+)\.", n))}
    num_fmb = max(indices) + 1 if indices else 0
    block = {n[len("fmb.0."):] for n in names if n.startswith("fmb.0.")}
    use_gfml = any(n.startswith("gfml.") for n in block)
    use_lfml = any(n.startswith("lfml.") for n in block)
    use_ffl = any(n.startswith("ffl.") for n in block)
    stages = "".join(a for a, key in zip(STAGE_AXES, ("conv_c", "conv_w", "conv_h"))
                     if f"gfml.{key}.weight" in block)
    size = 64
    for key in ("conv_w", "conv_h"):
        if f"gfml.{key}.weight" in block:
            size = int(arrays[f"fmb.0.gfml.{key}.weight"].shape[0])
    reduction = 4
    if use_lfml:
        reduction = channels // int(arrays["fmb.0.lfml.reduce.weight"].shape[0])
    return ModelConfig(num_fmb=num_fmb, channels=channels, gfml_size=size, lfml_reduction=reduction,
                       downsample_factor=d, gfml_stages=stages or STAGE_AXES, use_gfml=use_gfml,
                       use_lfml=use_lfml, use_ffl=use_ffl)


def _check_input(x: Tensor, cfg: ModelConfig) -> None:
    if x.data.ndim != 4 or x.shape[1] != 3:
        raise InputError(f"expected an (N,3,H,W) image tensor, got shape {x.shape}")
    d = cfg.downsample_factor
    h, w = x.shape[2:]
    if h % d or w % d:
        raise InputError(f"image extents {h}x{w} must be divisible by the downsample factor {d}")


def downsampler(x: Tensor, p, cfg: ModelConfig) -> Tensor:
    _check_input(x, cfg)
    z = ops.space_to_depth(x, cfg.downsample_factor)
    return ops.conv3x3(z, p["down.conv.weight"], p["down.conv.bias"])


def upsampler(f: Tensor, p, cfg: ModelConfig) -> Tensor:
    z = ops.conv3x3(f, p["up.conv.weight"], p["up.conv.bias"])
    return ops.depth_to_space(z, cfg.downsample_factor)


def forward(x: Tensor, p, cfg: ModelConfig) -> Tensor:
    """Restore a batch of images; the output is unclamped."""
    f0 = downsampler(x, p, cfg)
    f = f0
    for i in range(cfg.num_fmb):
        f = fmb_forward(f, Scope(p, f"fmb.{i}"), cfg)
    f = ops.add(f, f0)
    del f0
    return upsampler(f, p, cfg)
