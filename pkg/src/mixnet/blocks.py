"""GFML, LFML and FFL layers and the Feature Mixing Block that combines them.

Block functions take a mapping from relative parameter names (for example
``"conv_c.weight"``) to tensors, so they can run on a slice of a model's
:class:`~mixnet.weights.WeightStore` or on a standalone dict.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

from . import ops
from .config import STAGE_AXES, ModelConfig
from .errors import ConfigError
from .tensor import Tensor

# One application rotates (C,H,W) -> (W,C,H); three applications are the identity.
CYCLE = "WCH"

_STAGE_PARAM = {"C": "conv_c", "W": "conv_w", "H": "conv_h"}

Params = Mapping[str, Tensor]


@dataclass(frozen=True)
class ParamSpec:
    shape: tuple[int, ...]
    init: str = "kaiming"  # or "zeros" / "ones"
    fan_in: int = 0
    gain: float = 1.0


_RELU_GAIN = math.sqrt(2.0)


def _conv(name: str, cout: int, cin: int, gain: float, kernel: int = 1) -> dict[str, ParamSpec]:
    shape = (cout, cin) if kernel == 1 else (cout, cin, kernel, kernel)
    return {
        f"{name}.weight": ParamSpec(shape, "kaiming", cin * kernel * kernel, gain),
        f"{name}.bias": ParamSpec((cout,), "zeros"),
    }


def gfml_specs(channels: int, size: int, stages: str = STAGE_AXES) -> dict[str, ParamSpec]:
    specs = {}
    for k, axis in enumerate(stages):
        extent = channels if axis == "C" else size
        # Every stage but the last feeds a GELU; the last feeds the sigmoid gate.
        gain = 1.0 if k == len(stages) - 1 else _RELU_GAIN
        specs.update(_conv(_STAGE_PARAM[axis], extent, extent, gain))
    return specs


def lfml_specs(channels: int, reduction: int) -> dict[str, ParamSpec]:
    hidden = channels // reduction
    return {**_conv("reduce", hidden, channels, _RELU_GAIN), **_conv("expand", channels, hidden, 1.0)}


def ffl_specs(channels: int) -> dict[str, ParamSpec]:
    return {**_conv("conv3", 2 * channels, channels, _RELU_GAIN, kernel=3),
            **_conv("conv1", channels, 2 * channels, 1.0)}


def _norm(name: str, channels: int) -> dict[str, ParamSpec]:
    return {f"{name}.gamma": ParamSpec((channels,), "ones"), f"{name}.beta": ParamSpec((channels,), "zeros")}


def _prefixed(prefix: str, specs: dict[str, ParamSpec]) -> dict[str, ParamSpec]:
    return {f"{prefix}.{k}": v for k, v in specs.items()}


def fmb_specs(cfg: ModelConfig) -> dict[str, ParamSpec]:
    c = cfg.channels
    branches = int(cfg.use_gfml) + int(cfg.use_lfml)
    specs = _norm("ln1", c) if branches else {}
    if cfg.use_gfml:
        specs.update(_prefixed("gfml", gfml_specs(c, cfg.gfml_size, cfg.gfml_stages)))
    if cfg.use_lfml:
        specs.update(_prefixed("lfml", lfml_specs(c, cfg.lfml_reduction)))
    if branches:
        specs.update(_conv("fuse", c, branches * c, 1.0))
    if cfg.use_ffl:
        specs.update(_norm("ln2", c))
        specs.update(_prefixed("ffl", ffl_specs(c)))
    return specs


class Scope(Mapping):
    """Read-only view of ``params`` restricted to names under ``prefix.``."""

    def __init__(self, params: Params, prefix: str):
        self._params = params
        self._prefix = prefix + "."

    def __getitem__(self, key: str) -> Tensor:
        return self._params[self._prefix + key]

    def __iter__(self):
        n = len(self._prefix)
        return (k[n:] for k in self._params if k.startswith(self._prefix))

    def __len__(self) -> int:
        return sum(1 for _ in self)


def gfml_forward(x: Tensor, p: Params, size: int, stages: str = STAGE_AXES,
                 mode: str = "bilinear") -> Tensor:
    """Global feature modulation.

    The input is resized to ``size x size``; each active stage applies a 1x1
    convolution along the current leading axis, an activation (GELU, or the
    sigmoid for the final stage) and one rotation of the axis cycle. The
    resulting map in (0, 1) is resized back and gates the input.
    """
    if size < 1:
        raise ConfigError(f"GFML internal size must be >= 1, got {size}")
    if not stages:
        raise ConfigError("GFML needs at least one stage")
    _, _, h, w = x.shape
    t = ops.interpolate(x, size, size, mode)
    orient = 0
    for k, axis in enumerate(stages):
        while orient != STAGE_AXES.index(axis):
            t = ops.permute(t, CYCLE)
            orient = (orient + 1) % 3
        name = _STAGE_PARAM[axis]
        t = ops.conv1x1(t, p[f"{name}.weight"], p[f"{name}.bias"])
        t = ops.sigmoid(t) if k == len(stages) - 1 else ops.gelu(t)
        t = ops.permute(t, CYCLE)
        orient = (orient + 1) % 3
    while orient:
        t = ops.permute(t, CYCLE)
        orient = (orient + 1) % 3
    gate = ops.interpolate(t, h, w, mode)
    del t
    return ops.mul(gate, x)


def lfml_forward(x: Tensor, p: Params) -> Tensor:
    """Channel reweighting from pooled statistics (squeeze-excitation style)."""
    s = ops.global_avg_pool(x)
    s = ops.relu(ops.conv1x1(s, p["reduce.weight"], p["reduce.bias"]))
    s = ops.sigmoid(ops.conv1x1(s, p["expand.weight"], p["expand.bias"]))
    return ops.mul(x, s)


def ffl_forward(x: Tensor, p: Params) -> Tensor:
    h = ops.gelu(ops.conv3x3(x, p["conv3.weight"], p["conv3.bias"]))
    return ops.conv1x1(h, p["conv1.weight"], p["conv1.bias"])


def fmb_forward(x: Tensor, p: Params, cfg: ModelConfig) -> Tensor:
    """Feature Mixing Block: fused GFML/LFML branch then a feed-forward layer, each residual."""
    branches = []
    if cfg.use_gfml or cfg.use_lfml:
        z = ops.layer_norm(x, p["ln1.gamma"], p["ln1.beta"])
        if cfg.use_gfml:
            branches.append(gfml_forward(z, Scope(p, "gfml"), cfg.gfml_size, cfg.gfml_stages))
        if cfg.use_lfml:
            branches.append(lfml_forward(z, Scope(p, "lfml")))
        del z
    if branches:
        mixed = branches[0] if len(branches) == 1 else ops.concat_channels(*branches)
        branches.clear()
        mid = ops.add(ops.conv1x1(mixed, p["fuse.weight"], p["fuse.bias"]), x)
        del mixed
    else:
        mid = x
    if not cfg.use_ffl:
        return mid
    y = ffl_forward(ops.layer_norm(mid, p["ln2.gamma"], p["ln2.beta"]), Scope(p, "ffl"))
    return ops.add(y, mid)
