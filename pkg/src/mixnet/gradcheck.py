"""Finite-difference gradient checking and the standard check suite."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops
from .blocks import ffl_forward, ffl_specs, fmb_forward, fmb_specs, gfml_forward, gfml_specs, lfml_forward, lfml_specs
from .config import ModelConfig
from .errors import UsageError
from .model import forward, init_weights
from .tensor import Parameter, Tape, Tensor, get_dtype, precision

PRIMITIVE_TOL = 1e-4
BLOCK_TOL = 1e-3
MODEL_TOL = 1e-3


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-4,
               max_coords: int | None = None, seed: int = 0) -> float:
    """Max over checked coordinates of ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.

    Non-scalar outputs are reduced with a fixed random projection. The numeric
    side is the central difference with the given ``step``. With ``max_coords``,
    a uniform random subset of that many coordinates is checked.
    """
    if get_dtype() is not np.float64:
        raise UsageError("grad_check requires float64 precision")
    rng = np.random.default_rng(seed)
    saved_flags = [t.requires_grad for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    try:
        with Tape() as tape:
            out = f(*inputs)
            proj = None if out.size == 1 and out._is_op else rng.standard_normal(out.shape)
            loss = out if proj is None else ops.project(out, proj)
        tape.backward(loss)
        analytic = [t.grad.copy() for t in inputs]

        def value() -> float:
            o = f(*inputs).data
            return float(o.reshape(())) if proj is None else float(np.sum(o * proj))

        sizes = [t.size for t in inputs]
        total = sum(sizes)
        if max_coords is None or total <= max_coords:
            coords = np.arange(total)
        else:
            coords = np.sort(rng.choice(total, size=max_coords, replace=False))
        offsets = np.cumsum([0] + sizes)
        worst = 0.0
        for c in coords:
            k = int(np.searchsorted(offsets, c, side="right") - 1)
            i = int(c - offsets[k])
            flat = inputs[k].data.reshape(-1)
            orig = flat[i]
            flat[i] = orig + step
            up = value()
            flat[i] = orig - step
            down = value()
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            a = float(analytic[k].reshape(-1)[i])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
        return worst
    finally:
        for t, flag in zip(inputs, saved_flags):
            t.requires_grad = flag
            if not isinstance(t, Parameter):
                t.grad = None


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.error < self.tolerance)


def _params(specs, rng) -> dict[str, Parameter]:
    out = {}
    for name, spec in specs.items():
        if spec.init == "kaiming":
            arr = rng.uniform(-1, 1, spec.shape) * spec.gain * np.sqrt(3.0 / spec.fan_in)
        else:
            arr = (1.0 if spec.init == "ones" else 0.0) + 0.1 * rng.standard_normal(spec.shape)
        out[name] = Parameter(arr, name=name)
    return out


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.5, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def _cases(rng) -> list[tuple[str, float, Callable[[], float]]]:
    t = lambda *shape: Tensor(rng.standard_normal(shape))
    cases: list[tuple[str, float, Callable[[], float]]] = []

    def prim(name, f, *inputs, **kw):
        cases.append((name, PRIMITIVE_TOL, lambda: grad_check(f, list(inputs), **kw)))

    prim("permute", lambda x: ops.permute(x, "WCH"), t(2, 3, 4, 5))
    prim("interpolate_bilinear_up", lambda x: ops.interpolate(x, 7, 9), t(2, 3, 5, 4))
    prim("interpolate_bilinear_down", lambda x: ops.interpolate(x, 3, 2), t(1, 2, 8, 7))
    prim("interpolate_nearest", lambda x: ops.interpolate(x, 7, 3, "nearest"), t(1, 2, 4, 5))
    prim("concat_channels", ops.concat_channels, t(1, 2, 3, 3), t(1, 3, 3, 3))
    prim("slice_channels", lambda x: ops.slice_channels(x, 1, 3), t(1, 4, 3, 3))
    prim("space_to_depth", lambda x: ops.space_to_depth(x, 2), t(2, 3, 4, 6))
    prim("depth_to_space", lambda x: ops.depth_to_space(x, 2), t(2, 12, 2, 3))
    prim("add", ops.add, t(2, 3, 4, 4), t(2, 3, 4, 4))
    prim("add_broadcast", ops.add, t(2, 3, 4, 4), t(2, 3, 1, 1))
    prim("mul", ops.mul, t(2, 3, 4, 4), t(2, 3, 4, 4))
    prim("mul_broadcast", ops.mul, t(2, 3, 4, 4), t(2, 3, 1, 1))
    prim("conv1x1", ops.conv1x1, t(2, 3, 4, 5), t(4, 3), t(4))
    prim("conv3x3", ops.conv3x3, t(2, 3, 5, 5), t(4, 3, 3, 3), t(4))
    prim("gelu", ops.gelu, t(2, 3, 4, 4))
    prim("relu", ops.relu, Tensor(_away_from_zero(rng, (2, 3, 4, 4))))
    prim("sigmoid", ops.sigmoid, t(2, 3, 4, 4))
    prim("layer_norm", ops.layer_norm, t(2, 5, 3, 3), Tensor(1 + 0.1 * rng.standard_normal(5)),
         Tensor(0.1 * rng.standard_normal(5)))
    prim("global_avg_pool", ops.global_avg_pool, t(2, 3, 4, 5))
    target = t(2, 3, 4, 4)
    pred = Tensor(target.data + _away_from_zero(rng, target.shape))
    prim("l1_loss", lambda p: ops.l1_loss(p, target), pred)

    def block(name, fn, x, specs):
        params = _params(specs, rng)
        names = list(params)

        def f(xx, *ps):
            return fn(xx, dict(zip(names, ps)))

        cases.append((name, BLOCK_TOL, lambda: grad_check(f, [x, *params.values()], max_coords=400)))

    block("gfml", lambda x, p: gfml_forward(x, p, 6), t(1, 4, 8, 8), gfml_specs(4, 6))
    block("lfml", lfml_forward, t(1, 8, 4, 4), lfml_specs(8, 2))
    block("ffl", ffl_forward, t(1, 4, 6, 6), ffl_specs(4))
    fmb_cfg = ModelConfig(num_fmb=1, channels=4, gfml_size=8, lfml_reduction=2)
    block("fmb", lambda x, p: fmb_forward(x, p, fmb_cfg), t(1, 4, 8, 8), fmb_specs(fmb_cfg))

    def end_to_end(name, cfg, size):
        store = init_weights(cfg, seed=int(rng.integers(1 << 31)))
        for p in store.values():
            p.data += 0.05 * rng.standard_normal(p.shape)
        x = Tensor(rng.random((1, 3, size, size)))
        with precision("float64"):
            base = forward(x, store, cfg).data
        # Targets kept away from the prediction so no L1 kink sits within one step.
        y = Tensor(base + _away_from_zero(rng, base.shape, 0.05) * 0.3)
        params = list(store.values())

        def f(*ps):
            return ops.l1_loss(forward(x, store, cfg), y)

        cases.append((name, MODEL_TOL, lambda: grad_check(f, params, max_coords=300)))

    end_to_end("model_d1", ModelConfig(num_fmb=2, channels=8, gfml_size=8, lfml_reduction=2,
                                       downsample_factor=1), 16)
    end_to_end("model_d2", ModelConfig(num_fmb=2, channels=8, gfml_size=8, lfml_reduction=2,
                                       downsample_factor=2), 16)
    return cases


def run_suite(seed: int = 0) -> list[CheckResult]:
    """Check every primitive, block and a tiny end-to-end model in float64."""
    results = []
    with precision("float64"):
        rng = np.random.default_rng(seed)
        for name, tol, check in _cases(rng):
            t0 = time.perf_counter()
            err = check()
            results.append(CheckResult(name, err, tol, time.perf_counter() - t0))
    return results


def format_table(results: Sequence[CheckResult]) -> str:
    lines = [f"{'check':<28}{'max_rel_err':>14}{'tolerance':>12}  status"]
    for r in results:
        lines.append(f"{r.name:<28}{r.error:>14.3e}{r.tolerance:>12.0e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
