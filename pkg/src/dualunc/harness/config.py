"""Flat ``key = value`` experiment configuration.

Blank lines and ``#`` comments are ignored. Tuple-valued keys take
comma-separated integers (``swap_pair = 2, 5``). Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, get_type_hints

from ..model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    # data
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    train_limit: int = 0  # 0 keeps every sample
    test_limit: int = 0
    # simulated experts
    experts: int = 4
    swap_pair: tuple[int, ...] = (2, 5)
    fraction: float = 0.25
    affected: tuple[int, ...] = (0, 1, 2)
    # conflicting duplicates (optional second training set)
    conflict_classes: tuple[int, ...] = ()
    conflict_fraction: float = 0.3
    label_source: str = "experts"  # experts | conflicts | clean
    # model
    method: str = "ours"  # ours | baseline
    latent_dim: int = 6
    beta: float = 1.0
    beta_warmup: bool = False
    dropout: float = 0.5
    kl_direction: str = "prior_posterior"
    fusion: str = "latent"
    fusion_hidden: int = 0
    conv_channels: tuple[int, ...] = (8, 16)
    hidden: int = 128
    encoder_channels: tuple[int, ...] = (4, 8)
    encoder_hidden: int = 64
    penalty_n: int = 0
    # optimisation
    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 10
    # evaluation
    T: int = 20
    eval_train_limit: int = 0
    # bookkeeping
    seed: int = 0
    out: str = "runs/default"

    def __post_init__(self):
        if self.method not in ("ours", "baseline"):
            raise ConfigError(f"method must be 'ours' or 'baseline', got {self.method!r}")
        if self.label_source not in ("experts", "conflicts", "clean"):
            raise ConfigError(f"label_source must be experts, conflicts or clean")
        if len(self.swap_pair) != 2:
            raise ConfigError(f"swap_pair needs two classes, got {self.swap_pair}")
        if self.label_source == "conflicts" and len(self.conflict_classes) < 2:
            raise ConfigError("label_source=conflicts needs at least two conflict_classes")
        for name in ("epochs", "batch_size", "T"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    def model_config(self, image_size=(28, 28)) -> ModelConfig:
        baseline = self.method == "baseline"
        try:
            return ModelConfig(
                image_size=tuple(image_size),
                conv_channels=tuple(self.conv_channels),
                hidden=self.hidden,
                encoder_channels=tuple(self.encoder_channels),
                encoder_hidden=self.encoder_hidden,
                latent_dim=self.latent_dim,
                fusion_hidden=self.fusion_hidden,
                beta=0.0 if baseline else self.beta,
                dropout=self.dropout,
                kl_direction=self.kl_direction,
                fusion="none" if baseline else self.fusion,
                penalty_n=self.penalty_n,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def changed_classes(self) -> tuple[int, ...]:
        return tuple(self.conflict_classes) if self.label_source == "conflicts" \
            else tuple(self.swap_pair)

    def replace(self, **kwargs) -> "ExperimentConfig":
        return dataclasses.replace(self, **kwargs)


_TYPES = get_type_hints(ExperimentConfig)
KEYS = tuple(f.name for f in fields(ExperimentConfig))


def parse_value(key: str, text: str) -> Any:
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is str:
            return text
        return tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = parse_value(key, value)
    return (base or ExperimentConfig()).replace(**values)


def load_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    return parse_config(Path(path).read_text(), base)


def dump_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {format_value(getattr(cfg, k))}\n" for k in KEYS)
