"""Model, training and run configuration.

A run file is plain UTF-8 ``key = value`` lines; ``#`` starts a comment.
Keys are the fields of :class:`ModelConfig` and :class:`TrainConfig` plus the
paths in :data:`PATH_KEYS`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError

STAGE_AXES = "CWH"


@dataclass(frozen=True)
class ModelConfig:
    num_fmb: int = 8
    channels: int = 48
    gfml_size: int = 64
    lfml_reduction: int = 4
    downsample_factor: int = 2
    # Which GFML mixing stages run, a subset of "CWH" (channel, width, height).
    gfml_stages: str = STAGE_AXES
    use_gfml: bool = True
    use_lfml: bool = True
    use_ffl: bool = True

    def __post_init__(self):
        if self.num_fmb < 0:
            raise ConfigError(f"num_fmb must be >= 0, got {self.num_fmb}")
        for name in ("channels", "gfml_size", "lfml_reduction", "downsample_factor"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.use_lfml and self.channels % self.lfml_reduction:
            raise ConfigError(
                f"lfml_reduction {self.lfml_reduction} must divide channels {self.channels}")
        stages = self.gfml_stages
        if self.use_gfml and (not stages or len(set(stages)) != len(stages)
                              or any(s not in STAGE_AXES for s in stages)):
            raise ConfigError(f"gfml_stages must be a non-empty subset of {STAGE_AXES!r}, got {stages!r}")
        # Canonical mixing order is C, then W, then H.
        object.__setattr__(self, "gfml_stages", "".join(a for a in STAGE_AXES if a in stages))

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 2e-4
    lr_min: float = 1e-6
    total_iters: int = 300_000
    batch_size: int = 24
    crop: int = 512
    flips: bool = True
    seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 10_000

    def __post_init__(self):
        if self.total_iters < 1:
            raise ConfigError(f"total_iters must be >= 1, got {self.total_iters}")
        if self.batch_size < 1 or self.crop < 1:
            raise ConfigError("batch_size and crop must be >= 1")
        if self.lr0 <= 0 or self.lr_min < 0 or self.lr_min > self.lr0:
            raise ConfigError(f"need 0 <= lr_min <= lr0 and lr0 > 0, got lr0={self.lr0}, lr_min={self.lr_min}")
        if self.log_every < 1 or self.checkpoint_every < 1:
            raise ConfigError("log_every and checkpoint_every must be >= 1")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def check_model(self, model: ModelConfig) -> None:
        if self.crop % model.downsample_factor:
            raise ConfigError(
                f"crop {self.crop} must be divisible by downsample_factor {model.downsample_factor}")


PATH_KEYS = ("train_dir", "val_dir", "checkpoint_dir")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    train_dir: Path | None = None
    val_dir: Path | None = None
    checkpoint_dir: Path | None = None


def _coerce(raw: str, typ, key: str):
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        return typ(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _field_types(cls) -> dict[str, type]:
    hints = {"int": int, "float": float, "bool": bool, "str": str}
    return {f.name: hints[f.type] if isinstance(f.type, str) else f.type for f in fields(cls)}


def parse_run_config(text: str) -> RunConfig:
    model_types = _field_types(ModelConfig)
    train_types = _field_types(TrainConfig)
    model_kw, train_kw, paths = {}, {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in model_types:
            model_kw[key] = _coerce(value, model_types[key], key)
        elif key in train_types:
            train_kw[key] = _coerce(value, train_types[key], key)
        elif key in PATH_KEYS:
            paths[key] = Path(value)
        else:
            raise ConfigError(f"unknown key {key!r} (line {lineno})")
    model = ModelConfig(**model_kw)
    train = TrainConfig(**train_kw)
    train.check_model(model)
    return RunConfig(model=model, train=train, **paths)


def load_run_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    run = parse_run_config(text)
    # Relative paths are taken relative to the config file, not the working directory.
    base = Path(path).parent
    for key in PATH_KEYS:
        value = getattr(run, key)
        if value is not None and not value.is_absolute():
            setattr(run, key, base / value)
    return run
