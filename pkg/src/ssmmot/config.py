"""Run configuration files (TOML).

A run file has an optional top-level ``seed`` and the sections below; every
key must name a field of the owning config, anything else is rejected::

    seed = 0

    [model]         # ModelConfig
    n_blocks = 2

    [association]   # AssociationConfig
    max_age = 30

    [merge]         # MergeConfig
    tau_cos = 0.3

    [synthetic]     # SyntheticConfig, image size as width/height
    kind = "sinusoid"

    [train]
    epochs = 500

    [paths]
    out = "res.txt"

Precedence: built-in defaults < command-line flags < run file.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .association import AssociationConfig
from .merging import MergeConfig
from .ssm import ModelConfig
from .synthetic import SyntheticConfig


class ConfigError(ValueError):
    pass


TRAIN_KEYS = ("epochs", "batch", "lr", "samples_per_tracklet", "jitter_px", "schedule")
PATH_KEYS = ("data", "det", "seqinfo", "model", "out", "res", "gt", "report", "loss_csv")


def _names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


SECTIONS = {
    "model": _names(ModelConfig),
    "association": _names(AssociationConfig),
    "merge": _names(MergeConfig),
    "synthetic": (_names(SyntheticConfig) - {"image", "seed"}) | {"width", "height"},
    "train": set(TRAIN_KEYS),
    "paths": set(PATH_KEYS),
}


@dataclass
class RunConfig:
    seed: int | None = None
    sections: dict[str, dict] = field(default_factory=dict)

    def get(self, section: str, key: str):
        return self.sections.get(section, {}).get(key)

    def resolve(self, section: str, key: str, flag, default=None):
        """Run file beats flag beats default (``None`` means unset)."""
        value = self.get(section, key)
        if value is not None:
            return value
        return default if flag is None else flag


def load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg = RunConfig()
    for key, value in raw.items():
        if key == "seed":
            if not isinstance(value, int):
                raise ConfigError(f"{path}: seed must be an integer")
            cfg.seed = value
        elif key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: [{key}] must be a table")
            unknown = sorted(set(value) - SECTIONS[key])
            if unknown:
                raise ConfigError(f"{path}: unknown key(s) in [{key}]: {', '.join(unknown)}")
            cfg.sections[key] = dict(value)
        else:
            raise ConfigError(f"{path}: unknown key or section '{key}'")
    return cfg


def path_or_none(value) -> Path | None:
    return None if value is None else Path(value)
