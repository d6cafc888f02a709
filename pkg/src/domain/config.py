#!/usr/bin/env python3
"""
Run configuration: one TOML document with [network], [train] and [data]
sections.

Info:
Precedence, lowest first: the shipped src/data/default_run.toml, the
user's config file, environment variables (CMTNET_SEED, CMTNET_DEVICE),
then explicit overrides from the command line. Unknown keys at any level
are rejected.
"""

from __future__ import annotations

import copy
import logging
import os
import pathlib

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from typing import Any, Dict, Literal, Mapping, Optional, Tuple

from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from .ingestion import STRATA
from .network import NetworkConfig
from .training import TrainConfig

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = pathlib.Path(__file__).parent.parent / "data" / "default_run.toml"

ENV_OVERRIDES = {
    "CMTNET_SEED": ("train", "seed", int),
    "CMTNET_DEVICE": ("train", "device", str),
}


class ConfigError(ValueError):
    """Raised for unreadable or invalid run configurations."""


class DataConfig(BaseModel):
    """Where the data lives and how it is split and augmented.

    Relative image and mask paths in the manifest resolve against
    image_root / mask_dir, which default to the manifest's directory.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    manifest: Optional[str] = None
    image_root: Optional[str] = None
    mask_dir: Optional[str] = None
    train_fraction: float = 0.8
    split_seed: int = 0
    augment: bool = True
    augment_strata: Tuple[str, ...] = ("covid",)
    eval_split: Literal["train", "test"] = "test"
    workers: int = 1

    @model_validator(mode="after")
    def _check(self) -> "DataConfig":
        if not (0.0 < self.train_fraction < 1.0):
            raise ValueError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        unknown = [s for s in self.augment_strata if s not in STRATA]
        if unknown:
            raise ValueError(f"unknown augmentation strata {unknown}; choose from {STRATA}")
        return self

    def resolved_image_root(self) -> Optional[pathlib.Path]:
        if self.image_root is not None:
            return pathlib.Path(self.image_root)
        return pathlib.Path(self.manifest).parent if self.manifest else None

    def resolved_mask_dir(self) -> Optional[pathlib.Path]:
        if self.mask_dir is not None:
            return pathlib.Path(self.mask_dir)
        return pathlib.Path(self.manifest).parent if self.manifest else None


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    network: NetworkConfig = NetworkConfig()
    train: TrainConfig = TrainConfig()
    data: DataConfig = DataConfig()

    @property
    def image_size(self) -> int:
        return self.network.input_size[0]

    def to_json(self) -> str:
        return self.model_dump_json()


def _merge(base: Dict[str, Any], update: Mapping[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _read_toml(path: pathlib.Path) -> Dict[str, Any]:
    try:
        with pathlib.Path(path).open("rb") as f:
            return tomllib.load(f)
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Malformed config {path}: {e}") from e


def _validate(document: Mapping[str, Any], origin: str) -> RunConfig:
    try:
        return RunConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigError(f"Invalid config ({origin}): {e}") from e


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, Any]:
    """Nested override document from CMTNET_* environment variables."""
    environ = os.environ if environ is None else environ
    overrides: Dict[str, Any] = {}
    for name, (section, key, cast) in ENV_OVERRIDES.items():
        if name in environ and environ[name] != "":
            try:
                overrides.setdefault(section, {})[key] = cast(environ[name])
            except ValueError as e:
                raise ConfigError(f"{name}={environ[name]!r}: {e}") from e
    return overrides


def load_run_config(path: Optional[pathlib.Path] = None, environ: Optional[Mapping[str, str]] = None,
                    overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Resolve the effective RunConfig.

    Args:
        path: Optional user TOML file.
        environ: Environment mapping (defaults to os.environ).
        overrides: Nested {section: {key: value}} applied last.

    Returns:
        Validated RunConfig.

    Raises:
        ConfigError: On unreadable files, unknown keys or invalid values.
    """
    document = _read_toml(DEFAULT_CONFIG_PATH)
    origin = str(DEFAULT_CONFIG_PATH)
    if path is not None:
        document = _merge(document, _read_toml(path))
        origin = str(path)
    document = _merge(document, env_overrides(environ))
    if overrides:
        document = _merge(document, overrides)

    config = _validate(document, origin)
    logger.debug(f"Resolved config from {origin}")
    return config


def with_overrides(config: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    """Re-validate a config with nested overrides applied."""
    return _validate(_merge(config.model_dump(mode="json"), overrides), "overrides")
