"""Training configuration and its flat ``key = value`` file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from poseattn.losses import ConfigError, LossWeights, Margins


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2000
    base_lr: float = 2e-4
    decay_start_epoch: int = 1000
    batch_size: int = 8
    weights: LossWeights = field(default_factory=LossWeights)
    margins: Margins = field(default_factory=Margins)
    blocks_n: int = 4
    use_d_appearance: bool = True
    use_d_pose: bool = True
    use_semantic_loss: bool = True
    seed: int = 0
    # scale knobs for CPU-sized runs
    channels: int = 32
    backbone_dim: int = 256
    disc_widths: tuple[int, ...] = (32, 64, 128, 256)
    sigma: float = 0.0  # 0 -> scale with canvas height
    quartet_form: str = "printed"
    gan_form: str = "nonsaturating"
    max_steps: int = 0  # 0 -> run all epochs
    max_pairs: int = 0  # 0 -> every ordered same-identity pair
    pool_size: int = 256
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be > 0")
        if not 0 <= self.decay_start_epoch <= self.epochs:
            raise ConfigError("decay_start_epoch must lie in [0, epochs]")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch normalization)")
        if not 1 <= self.blocks_n <= 8:
            raise ConfigError("blocks_n must be in [1, 8]")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")
        if self.quartet_form not in ("printed", "hinge"):
            raise ConfigError(f"quartet_form must be printed or hinge, got {self.quartet_form!r}")
        if self.gan_form not in ("nonsaturating", "literal"):
            raise ConfigError(f"gan_form must be nonsaturating or literal, got {self.gan_form!r}")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")

    def replace(self, **changes) -> "TrainConfig":
        return parse_config_dict({**self.to_flat(), **changes})

    def to_flat(self) -> dict:
        flat = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (LossWeights, Margins)):
                flat.update(dataclasses.asdict(v))
            else:
                flat[f.name] = v
        return flat

    def to_text(self) -> str:
        lines = []
        for k, v in self.to_flat().items():
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


_WEIGHT_KEYS = {f.name for f in dataclasses.fields(LossWeights)}
_MARGIN_KEYS = {f.name for f in dataclasses.fields(Margins)}
_TOP_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
KNOWN_KEYS = (set(_TOP_FIELDS) - {"weights", "margins"}) | _WEIGHT_KEYS | _MARGIN_KEYS


def _coerce(key: str, value, kind):
    if not isinstance(value, str):
        return value
    try:
        if kind is bool:
            low = value.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        if kind == "tuple":
            return tuple(int(x) for x in value.split(","))
        return value.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None


def _kind(name: str):
    if name in _WEIGHT_KEYS or name in _MARGIN_KEYS:
        return float
    default = _TOP_FIELDS[name].default
    if isinstance(default, bool):
        return bool
    if isinstance(default, tuple):
        return "tuple"
    return type(default)


def parse_config_dict(values: dict) -> TrainConfig:
    unknown = sorted(set(values) - KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config key: {unknown[0]}")
    top, weights, margins = {}, {}, {}
    for k, v in values.items():
        v = _coerce(k, v, _kind(k))
        if k in _WEIGHT_KEYS:
            weights[k] = v
        elif k in _MARGIN_KEYS:
            margins[k] = v
        else:
            top[k] = v
    return TrainConfig(weights=LossWeights(**weights), margins=Margins(**margins), **top)


def parse_config_text(text: str) -> TrainConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if k in values:
            raise ConfigError(f"{k}: duplicate key")
        values[k] = v
    return parse_config_dict(values)


def load_config(path_or_preset: str | Path) -> TrainConfig:
    """Read a config file, or a bundled preset by name (``desk``, ``paper``)."""
    p = Path(path_or_preset)
    if p.exists():
        return parse_config_text(p.read_text())
    name = str(path_or_preset).removesuffix(".cfg")
    preset = resources.files("poseattn") / "presets" / f"{name}.cfg"
    if preset.is_file():
        return parse_config_text(preset.read_text())
    raise FileNotFoundError(f"no config file or preset named {path_or_preset!r}")
