"""Run configuration and its ``key = value`` file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, Union


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # loss weights
    alpha1: float = 0.01
    alpha2: float = 0.1
    gamma_plus: float = 2.0
    gamma_minus: float = 4.0
    # optimisation
    lr_model: float = 1e-3
    lr_adv: float = 5e-6
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 500
    t_pre: int = 2
    t_adv: int = 10
    seed: int = 0
    # architecture
    patch: int = 13
    d_spa: int = 32
    d_cha: int = 3
    d_c: int = 64
    d_i: int = 64
    heads: int = 2
    adv_layers: int = 5
    adv_width: int = 32
    norm_eps: float = 1e-5
    proto_momentum: float = 0.9
    # ablation switches
    use_kmm: bool = True
    use_adv: bool = True
    use_consist: bool = True
    # data handling
    val_fraction: float = 0.2

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.alpha2 <= 1.0:
            raise ConfigError(f"alpha2 must lie in [0, 1], got {self.alpha2}")
        if self.lr_model <= 0 or self.lr_adv <= 0:
            raise ConfigError("learning rates must be positive")
        if self.epochs < 1 or self.t_pre < 0 or self.t_adv < 1:
            raise ConfigError("epochs and t_adv must be positive and t_pre non-negative")
        if self.t_pre > self.epochs:
            raise ConfigError(f"t_pre ({self.t_pre}) exceeds epochs ({self.epochs})")
        if self.patch < 1 or self.patch % 2 == 0:
            raise ConfigError(f"patch size must be odd and positive, got {self.patch}")
        if self.d_spa % self.heads:
            raise ConfigError(f"d_spa ({self.d_spa}) must be divisible by heads ({self.heads})")
        if self.d_i < 4:
            raise ConfigError("d_i must be at least 4")
        if not 2 <= self.adv_layers <= 6:
            raise ConfigError(f"adv_layers must be in [2, 6], got {self.adv_layers}")
        if not 0.0 <= self.proto_momentum < 1.0:
            raise ConfigError("proto_momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, Union[int, float, bool]]:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_text(cls, text: str, base: "RunConfig" = None) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = dict((base or cls()).to_dict())
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _parse(types[key], value, key, lineno)
        return cls(**values)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "RunConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v)


def _parse(typ: str, value: str, key: str, lineno: int):
    try:
        if typ == "bool":
            low = value.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(value)
        if typ == "int":
            return int(value)
        return float(value)
    except ValueError:
        raise ConfigError(f"line {lineno}: bad {typ} value {value!r} for {key}") from None
