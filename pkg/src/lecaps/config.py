"""Run configuration: a flat INI file with [model], [train], [loss] and
[data] sections, mapped onto the dataclasses the rest of the package uses.

Unknown sections or keys are rejected by name rather than ignored, so a
typo in a config file fails loudly.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields
from pathlib import Path

from .losses import LossParams
from .models import ModelConfig
from .trainer import TrainConfig

__all__ = ["ConfigError", "DataConfig", "RunConfig", "load_run_config", "dump_run_config", "parse_run_config"]


class ConfigError(Exception):
    """Unknown key, unparseable value, or missing config file."""


@dataclass(frozen=True)
class DataConfig:
    dataset: str = "synthetic"
    data_dir: str = "data"
    train_limit: int | None = None
    test_limit: int | None = None
    synthetic_fallback: bool = False


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    loss: LossParams = LossParams()
    data: DataConfig = DataConfig()


_BOOL_WORDS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _parse_bool(raw: str) -> bool:
    try:
        return _BOOL_WORDS[raw.strip().lower()]
    except KeyError:
        raise ConfigError(f"expected a boolean (true/false), got {raw!r}") from None


def _parse_optional_int(raw: str) -> int | None:
    raw = raw.strip()
    return None if raw == "" else int(raw)


def _parse_optional_float(raw: str) -> float | None:
    raw = raw.strip()
    return None if raw == "" else float(raw)


# field name -> parser, per section dataclass
_PARSERS = {
    ModelConfig: {
        "variant": str,
        "image_size": int,
        "in_channels": int,
        "n_classes": int,
        "routing_iters": int,
        "decoder": str,
        "dropout_rate": float,
        "width": float,
        "primary_dim": int,
        "class_dim": int,
    },
    TrainConfig: {
        "lr": float,
        "gamma": float,
        "batch_size": int,
        "epochs": int,
        "seed": int,
        "hard_training": _parse_bool,
        "dropout_rate": _parse_optional_float,
        "deterministic": _parse_bool,
    },
    LossParams: {
        "m_plus": float,
        "m_minus": float,
        "loss_lambda": float,
        "recon_weight": float,
    },
    DataConfig: {
        "dataset": str,
        "data_dir": str,
        "train_limit": _parse_optional_int,
        "test_limit": _parse_optional_int,
        "synthetic_fallback": _parse_bool,
    },
}

_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "loss": LossParams, "data": DataConfig}


def _build_section(cls, section: str, items: dict[str, str]):
    parsers = _PARSERS[cls]
    kwargs = {}
    for key, raw in items.items():
        if key not in parsers:
            raise ConfigError(f"unknown key {key!r} in section [{section}] (valid: {', '.join(parsers)})")
        try:
            kwargs[key] = parsers[key](raw)
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(f"bad value for {section}.{key}: {e}") from None
    try:
        return cls(**kwargs)
    except ValueError as e:
        raise ConfigError(f"invalid [{section}] configuration: {e}") from None


def parse_run_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse config: {e}") from None
    sections = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}] (valid: {', '.join(_SECTIONS)})")
        sections[section] = _build_section(_SECTIONS[section], section, dict(parser.items(section)))
    return RunConfig(
        model=sections.get("model", ModelConfig()),
        train=sections.get("train", TrainConfig()),
        loss=sections.get("loss", LossParams()),
        data=sections.get("data", DataConfig()),
    )


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_run_config(path.read_text())


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def dump_run_config(cfg: RunConfig) -> str:
    """Full INI text (every key explicit) that parses back to cfg."""
    lines = []
    for section, obj in (("model", cfg.model), ("train", cfg.train), ("loss", cfg.loss), ("data", cfg.data)):
        lines.append(f"[{section}]")
        for f in fields(obj):
            lines.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)
