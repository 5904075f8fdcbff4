"""L1 training with Adam, cosine annealing, random crops and flips."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ModelConfig, TrainConfig
from .errors import ConfigError, InputError, TrainingDivergedError, UsageError
from .model import forward, init_weights, param_shapes
from .ops import l1_loss
from .tensor import Tape, Tensor
from .weights import WeightStore, check_schema, read_tensors, write_tensors

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_OPTIM_PREFIX = "optim."


@dataclass
class ImagePair:
    """A degraded/clean pair, each ``(3, H, W)`` float in [0, 1]."""

    degraded: np.ndarray
    clean: np.ndarray
    id: str = ""

    def __post_init__(self):
        if self.degraded.shape != self.clean.shape:
            raise InputError(f"pair {self.id!r}: shapes differ {self.degraded.shape} vs {self.clean.shape}")
        if self.degraded.ndim != 3 or self.degraded.shape[0] != 3:
            raise InputError(f"pair {self.id!r}: expected (3,H,W) images, got {self.degraded.shape}")


def check_dataset(pairs: Sequence[ImagePair], crop: int) -> None:
    if not pairs:
        raise InputError("dataset is empty")
    small = [p.id for p in pairs if min(p.degraded.shape[1:]) < crop]
    if small:
        raise InputError(f"images smaller than crop {crop}: {', '.join(map(str, small))}")


def cosine_lr(iteration: int, cfg: TrainConfig) -> float:
    if not 0 <= iteration < cfg.total_iters:
        raise UsageError(f"iteration {iteration} outside [0, {cfg.total_iters})")
    if cfg.total_iters == 1:
        return cfg.lr0
    frac = iteration / (cfg.total_iters - 1)
    return cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + math.cos(math.pi * frac))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, store: WeightStore) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in store.items()},
                   {k: np.zeros_like(p.data) for k, p in store.items()}, 0)


def adam_step(store: WeightStore, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update in place, reading gradients from ``store``."""
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name, p in store.items():
        g = p.grad
        m, v = state.m[name], state.v[name]
        dt = p.data.dtype.type
        m *= dt(ADAM_BETA1)
        m += dt(1 - ADAM_BETA1) * g
        v *= dt(ADAM_BETA2)
        v += dt(1 - ADAM_BETA2) * (g * g)
        denom = np.sqrt(v / dt(c2)) + dt(ADAM_EPS)
        p.data -= dt(lr) * (m / dt(c1)) / denom


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    # Keyed by iteration so a resumed run draws the same batches.
    return np.random.default_rng([seed, iteration])


def sample_batch(pairs: Sequence[ImagePair], cfg: TrainConfig,
                 rng: np.random.Generator) -> tuple[Tensor, Tensor]:
    """Random pairs (with replacement), one crop window and flip decision per pair."""
    crop = cfg.crop
    deg = np.empty((cfg.batch_size, 3, crop, crop), dtype=np.float32)
    cln = np.empty_like(deg)
    for b in range(cfg.batch_size):
        pair = pairs[int(rng.integers(len(pairs)))]
        h, w = pair.degraded.shape[1:]
        top = int(rng.integers(h - crop + 1))
        left = int(rng.integers(w - crop + 1))
        hflip = cfg.flips and rng.random() < 0.5
        vflip = cfg.flips and rng.random() < 0.5
        for src, dst in ((pair.degraded, deg), (pair.clean, cln)):
            window = src[:, top:top + crop, left:left + crop]
            if hflip:
                window = window[:, :, ::-1]
            if vflip:
                window = window[:, ::-1, :]
            dst[b] = window
    return Tensor(deg), Tensor(cln)


def save_checkpoint(path, store: WeightStore, state: AdamState) -> None:
    tensors = dict(store.arrays())
    for k in store:
        tensors[f"{_OPTIM_PREFIX}m.{k}"] = state.m[k]
        tensors[f"{_OPTIM_PREFIX}v.{k}"] = state.v[k]
    tensors[f"{_OPTIM_PREFIX}step"] = np.array([state.step], dtype=np.float32)
    write_tensors(path, tensors)


def load_checkpoint(path, cfg: ModelConfig) -> tuple[WeightStore, AdamState]:
    arrays = read_tensors(path)
    weights = {k: v for k, v in arrays.items() if not k.startswith(_OPTIM_PREFIX)}
    check_schema(weights, param_shapes(cfg))
    store = WeightStore.from_arrays(weights)
    try:
        state = AdamState({k: arrays[f"{_OPTIM_PREFIX}m.{k}"].copy() for k in store},
                          {k: arrays[f"{_OPTIM_PREFIX}v.{k}"].copy() for k in store},
                          int(arrays[f"{_OPTIM_PREFIX}step"][0]))
    except KeyError as exc:
        raise ConfigError(f"{path}: checkpoint lacks optimizer tensor {exc.args[0]}") from None
    return store, state


@dataclass
class TrainResult:
    weights: WeightStore
    losses: list[tuple[int, float, float]]
    state: AdamState


def train_loop(model_cfg: ModelConfig, train_cfg: TrainConfig, pairs: Sequence[ImagePair],
               checkpoint_dir=None, *, weights: WeightStore | None = None,
               resume_from=None, stop_at: int | None = None) -> TrainResult:
    """Run ``total_iters`` optimisation steps (or stop early at ``stop_at``).

    ``losses`` holds ``(iteration, lr, loss)`` for every step taken. With a
    ``checkpoint_dir``, ``loss.log`` is appended every ``log_every`` steps and
    ``ckpt_<iter>.mixw`` plus ``last.mixw`` are written every
    ``checkpoint_every`` steps and at the end.
    """
    train_cfg.check_model(model_cfg)
    check_dataset(pairs, train_cfg.crop)
    if resume_from is not None:
        store, state = load_checkpoint(resume_from, model_cfg)
    else:
        store = weights if weights is not None else init_weights(model_cfg, train_cfg.seed)
        state = AdamState.zeros_like(store)
    end = train_cfg.total_iters if stop_at is None else min(stop_at, train_cfg.total_iters)

    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    log_file = None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)
        log_file = open(ckdir / "loss.log", "a", encoding="utf-8")
    pending: list[str] = []
    losses: list[tuple[int, float, float]] = []
    try:
        for it in range(state.step, end):
            lr = cosine_lr(it, train_cfg)
            x, y = sample_batch(pairs, train_cfg, iteration_rng(train_cfg.seed, it))
            store.zero_grad()
            with Tape() as tape:
                loss = l1_loss(forward(x, store, model_cfg), y)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(it, lr, value)
            tape.backward(loss)
            del tape, loss
            adam_step(store, state, lr)
            losses.append((it, lr, value))
            if log_file is not None:
                pending.append(f"{it}\t{lr:.9g}\t{value:.9g}\n")
                if (it + 1) % train_cfg.log_every == 0:
                    log_file.writelines(pending)
                    log_file.flush()
                    pending.clear()
            if ckdir is not None and (it + 1) % train_cfg.checkpoint_every == 0:
                save_checkpoint(ckdir / f"ckpt_{it + 1}.mixw", store, state)
        if ckdir is not None:
            save_checkpoint(ckdir / "last.mixw", store, state)
    finally:
        if log_file is not None:
            log_file.writelines(pending)
            log_file.close()
    if losses:
        log.info("trained %d steps, final loss %.5f", len(losses), losses[-1][2])
    return TrainResult(store, losses, state)


__all__ = ["ImagePair", "cosine_lr", "AdamState", "adam_step", "sample_batch", "train_loop",
           "l1_loss", "save_checkpoint", "load_checkpoint", "iteration_rng"]
