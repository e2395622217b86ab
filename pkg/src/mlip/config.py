"""Model, training and run configuration plus the ``key = value`` file format.

Config files are UTF-8 text: one ``dotted.key = value`` per line, ``#``
starts a comment, and an optional ``preset = <name>`` line must come before
any other key. Unknown keys and malformed values are reported with their line
number.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .data import VOCABULARY

LOSS_NAMES = ("ins_fre", "ins_spa", "tok_fre", "tok_spa")


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class BlockSpec:
    kind: str  # "mhsa" or "acc"
    keep_ratio: float = 1.0

    def __str__(self) -> str:
        return "mhsa" if self.kind == "mhsa" else f"acc:{self.keep_ratio:g}"


def parse_schedule(text) -> tuple:
    items = text.split(",") if isinstance(text, str) else list(text)
    blocks = []
    for item in items:
        if isinstance(item, BlockSpec):
            blocks.append(item)
            continue
        item = item.strip().lower()
        if item == "mhsa":
            blocks.append(BlockSpec("mhsa"))
        elif item.startswith("acc"):
            _, _, ratio = item.partition(":")
            blocks.append(BlockSpec("acc", float(ratio) if ratio else 1.0))
        else:
            raise ConfigError(f"unknown block kind {item!r}")
    return tuple(blocks)


@dataclass
class GuideConfig:
    patch_size: int = 8
    width: int = 32
    depth: int = 2
    heads: int = 2


@dataclass
class TextConfig:
    vocab_size: int = len(VOCABULARY)
    context_length: int = 16
    width: int = 64
    depth: int = 2
    heads: int = 4


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    width: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    freq_blocks: int = 2
    lego_pieces: int = 4
    spatial_schedule: tuple = parse_schedule("mhsa, mhsa, acc:0.5, acc:0.5")
    proj_dim: int = 64
    tau_init: float = 0.07
    mix: tuple = (0.15, 0.65, 0.1, 0.1)
    guide: GuideConfig = field(default_factory=GuideConfig)
    text: TextConfig = field(default_factory=TextConfig)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def low_res_size(self) -> int:
        return self.image_size // 2

    def validate(self):
        from .spectral import SpectralConfigError, _check_grid

        if self.image_size % self.patch_size:
            raise ConfigError(f"image size {self.image_size} not divisible by patch {self.patch_size}")
        try:
            _check_grid(self.grid, self.grid)
        except SpectralConfigError as exc:
            raise ConfigError(str(exc)) from None
        if self.grid % 2:
            raise ConfigError("patch grid width must be even")
        if self.lego_pieces < 2:
            raise ConfigError("lego_pieces must be at least 2")
        if self.width % self.heads or self.guide.width % self.guide.heads \
                or self.text.width % self.text.heads:
            raise ConfigError("head count must divide the width")
        if self.low_res_size % self.guide.patch_size:
            raise ConfigError(f"guide input {self.low_res_size} not divisible by patch {self.guide.patch_size}")
        if not self.spatial_schedule:
            raise ConfigError("spatial schedule is empty")
        if self.spatial_schedule[0].kind != "mhsa":
            raise ConfigError("an Acceleration Block must follow at least one MHSA Block")
        n = self.grid * self.grid
        from .merge import merge_count

        for spec in self.spatial_schedule:
            if spec.kind == "acc":
                if not 0.5 <= spec.keep_ratio <= 1.0:
                    raise ConfigError(f"keep ratio {spec.keep_ratio} outside [0.5, 1]")
                if spec.keep_ratio < 1.0:
                    c = merge_count(n, spec.keep_ratio)
                    if 2 * c > n:
                        raise ConfigError(f"keep ratio {spec.keep_ratio} needs {2 * c} of {n} tokens")
                    n -= c
        if len(self.mix) != 4 or min(self.mix) < 0 or max(self.mix) <= 0:
            raise ConfigError("mix needs four nonnegative coefficients, one positive")
        if self.tau_init <= 0:
            raise ConfigError("tau_init must be positive")
        return self


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 30
    peak_lr: float = 3e-4
    warmup_steps: int = 100
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0


@dataclass
class DataConfig:
    dir: str = ""
    n: int = 256
    seed: int = 0


@dataclass
class LossConfig:
    disable: tuple = ()
    tok_spa_strategy: str = "o2o"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def validate(self):
        self.model.validate()
        for name in self.loss.disable:
            if name not in LOSS_NAMES:
                raise ConfigError(f"unknown loss {name!r}; expected one of {LOSS_NAMES}")
        if all(name in self.loss.disable or c == 0
               for name, c in zip(LOSS_NAMES, self.model.mix)):
            raise ConfigError("every loss is disabled")
        if self.loss.tok_spa_strategy not in ("o2o", "o2m"):
            raise ConfigError("tok_spa_strategy must be o2o or o2m")
        if self.train.batch_size < 2:
            raise ConfigError("batch size must be at least 2")
        return self

    def coefficients(self) -> tuple:
        return tuple(0.0 if name in self.loss.disable else float(c)
                     for name, c in zip(LOSS_NAMES, self.model.mix))


# ---------------------------------------------------------------------- presets
def tiny() -> RunConfig:
    return RunConfig()


def gradcheck() -> RunConfig:
    """Width-8 model (under 5k parameters) for full finite-difference checks."""
    model = ModelConfig(
        image_size=8, patch_size=2, width=8, heads=2, freq_blocks=1, lego_pieces=2,
        spatial_schedule=parse_schedule("mhsa, acc:0.5"), proj_dim=8,
        guide=GuideConfig(patch_size=2, width=4, depth=1, heads=1),
        text=TextConfig(context_length=8, width=8, depth=1, heads=2),
    )
    return RunConfig(model=model, train=TrainConfig(batch_size=3, epochs=1, warmup_steps=1))


PRESETS = {"tiny": tiny, "gradcheck": gradcheck}


# ---------------------------------------------------------------------- parsing
def _convert(current, raw: str):
    if isinstance(current, bool):
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"expected a boolean, got {raw!r}")
        return low in ("true", "1", "yes")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, str):
        return raw
    if isinstance(current, tuple):
        if current and isinstance(current[0], BlockSpec) or raw.lower().startswith(("mhsa", "acc")):
            return parse_schedule(raw)
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if current and isinstance(current[0], float):
            return tuple(float(p) for p in parts)
        return tuple(parts)
    raise ValueError(f"unsupported value type {type(current).__name__}")


def set_key(cfg: RunConfig, key: str, raw: str, line: Optional[int] = None):
    parts = key.split(".")
    target = cfg
    for part in parts[:-1]:
        if not dataclasses.is_dataclass(target) or not hasattr(target, part):
            raise ConfigError(f"unknown key {key!r}", line)
        target = getattr(target, part)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(target) or leaf not in {f.name for f in dataclasses.fields(target)}:
        raise ConfigError(f"unknown key {key!r}", line)
    current = getattr(target, leaf)
    if dataclasses.is_dataclass(current):
        raise ConfigError(f"key {key!r} names a section, not a value", line)
    try:
        value = _convert(current, raw)
    except (ValueError, ConfigError) as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}", line) from None
    setattr(target, leaf, value)


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    seen_key = False
    for lineno, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        if "=" not in content:
            raise ConfigError(f"expected 'key = value', got {content!r}", lineno)
        key, _, raw = (s.strip() for s in content.partition("="))
        if not key:
            raise ConfigError("empty key", lineno)
        if key == "preset":
            if seen_key:
                raise ConfigError("preset must come before other keys", lineno)
            if raw not in PRESETS:
                raise ConfigError(f"unknown preset {raw!r}", lineno)
            cfg = PRESETS[raw]()
        else:
            set_key(cfg, key, raw, lineno)
        seen_key = True
    try:
        return cfg.validate()
    except ConfigError as exc:
        raise exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def _flatten(obj, prefix: str = ""):
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            yield from _flatten(value, key + ".")
        elif isinstance(value, tuple):
            yield key, ", ".join(str(v) for v in value)
        else:
            yield key, str(value)


def format_config(cfg) -> str:
    """Render ``cfg`` in the config file format (round-trips through parsing)."""
    return "".join(f"{k} = {v}\n" for k, v in _flatten(cfg))


def model_config_from_dict(d: dict) -> ModelConfig:
    cfg = RunConfig()
    for key, raw in d.items():
        set_key(cfg, f"model.{key}", raw)
    return cfg.model


def model_config_to_dict(model: ModelConfig) -> dict:
    return dict(_flatten(model))
