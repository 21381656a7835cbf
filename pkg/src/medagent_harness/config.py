"""Run configuration for medagent-harness.

A run is described by one JSON file. Settings resolve in this order, first wins:

1. Command-line flags (seeds, workers, output directory)
2. Environment variables (``MEDAGENT_HARNESS_WORKERS``, ``MEDAGENT_HARNESS_OUTPUT_DIR``)
3. The config file
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal

from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .agentclinic import DEFAULT_MAX_TURNS
from .backend import BackendSpec, RouteConfig
from .evalkit import PIPELINE_KINDS
from .medagents import DEFAULT_MAX_ITERS, RefineMode

ENV_WORKERS = "MEDAGENT_HARNESS_WORKERS"
ENV_OUTPUT_DIR = "MEDAGENT_HARNESS_OUTPUT_DIR"

DEFAULT_OUTPUT_DIR = Path("runs")
DEFAULT_K_FOLDS = 3


class ConfigError(Exception):
    """The run configuration is unusable; ``field_path`` points at the culprit."""

    def __init__(self, field_path: str, message: str) -> None:
        """Prefix the message with the dotted field path."""
        self.field_path = field_path
        super().__init__(f"{field_path}: {message}")


class DatasetRef(BaseModel):
    """Dataset file and record kind."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    path: Path
    kind: Literal["mcq", "clinical"]
    name: str | None = None

    @property
    def display_name(self) -> str:
        """Name used in reports; defaults to the file stem."""
        return self.name or self.path.stem


class Seeds(BaseModel):
    """Seeds for sampling and fold assignment."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    sample: int = 0
    fold: int = 0


class RunConfig(BaseModel):
    """Everything one ``run`` needs."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    pipeline: Literal["cod", "medagents", "agentclinic"]
    dataset: DatasetRef
    backends: tuple[BackendSpec, ...] = Field(min_length=1)
    route: RouteConfig
    n_sample: int | None = Field(default=None, ge=1)
    k_folds: int = Field(default=DEFAULT_K_FOLDS, ge=1)
    seeds: Seeds = Field(default_factory=Seeds)
    max_iters: int = Field(default=DEFAULT_MAX_ITERS, ge=1)
    max_turns: int = Field(default=DEFAULT_MAX_TURNS, ge=1)
    refine_mode: RefineMode = "first"
    parallel_analyses: int = Field(default=1, ge=1)
    shuffle_seed: int | None = None
    workers: int = Field(default=1, ge=1)
    output_dir: Path = DEFAULT_OUTPUT_DIR
    clock: Literal["auto", "system", "simulated"] = "auto"

    @model_validator(mode="after")
    def _sample_covers_folds(self) -> RunConfig:
        if self.n_sample is not None and self.n_sample < self.k_folds:
            msg = f"n_sample ({self.n_sample}) must be at least k_folds ({self.k_folds})"
            raise ValueError(msg)
        return self

    def uses_simulated_clock(self) -> bool:
        """``auto`` simulates time when every backend is scripted."""
        if self.clock == "auto":
            return all(spec.kind == "scripted" for spec in self.backends)
        return self.clock == "simulated"


@dataclass(frozen=True)
class RunOverrides:
    """Values given on the command line."""

    sample_seed: int | None = None
    fold_seed: int | None = None
    workers: int | None = None
    output_dir: Path | None = None


def _field_path(error: dict[str, Any]) -> str:
    parts = [str(part) for part in error.get("loc", ())]
    return ".".join(parts) or "<root>"


def _check_references(config: RunConfig) -> None:
    names = [spec.name for spec in config.backends]
    seen: set[str] = set()
    for index, name in enumerate(names):
        if name in seen:
            raise ConfigError(f"backends.{index}.name", f"duplicate backend name {name!r}")
        seen.add(name)
    if config.route.default_backend not in seen:
        raise ConfigError(
            "route.default_backend",
            f"backend {config.route.default_backend!r} is not defined",
        )
    for key, name in config.route.overrides.items():
        if name not in seen:
            raise ConfigError(f"route.overrides.{key}", f"backend {name!r} is not defined")
    expected = PIPELINE_KINDS[config.pipeline]
    if config.dataset.kind != expected:
        raise ConfigError(
            "dataset.kind",
            f"pipeline {config.pipeline} needs a {expected} dataset, got {config.dataset.kind}",
        )


def _resolve_paths(data: dict[str, Any], base: Path) -> dict[str, Any]:
    """Make dataset and script paths relative to the config file's directory."""
    dataset = data.get("dataset")
    if isinstance(dataset, dict) and isinstance(dataset.get("path"), str):
        dataset["path"] = str(base / Path(dataset["path"]).expanduser())
    for spec in data.get("backends") or []:
        if isinstance(spec, dict) and isinstance(spec.get("script_path"), str):
            spec["script_path"] = str(base / Path(spec["script_path"]).expanduser())
    return data


def _env_int(name: str) -> int | None:
    value = os.environ.get(name)
    if value is None or not value.strip():
        return None
    try:
        return int(value)
    except ValueError as e:
        raise ConfigError(name, f"expected an integer, got {value!r}") from e


def load_run_config(path: Path, overrides: RunOverrides | None = None) -> RunConfig:
    """Load, validate and resolve a run configuration.

    Args:
        path: JSON config file.
        overrides: Command-line values; they beat environment variables and the file.

    Returns:
        The validated configuration.

    Raises:
        ConfigError: The file is unreadable or invalid, or names undefined backends.

    """
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError("<root>", f"invalid JSON in {path}: {e}") from e
    except OSError as e:
        raise ConfigError("<root>", f"cannot read {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a JSON object")

    data = _resolve_paths(data, path.parent)

    env_workers = _env_int(ENV_WORKERS)
    if env_workers is not None:
        data["workers"] = env_workers
    if os.environ.get(ENV_OUTPUT_DIR):
        data["output_dir"] = os.environ[ENV_OUTPUT_DIR]

    overrides = overrides or RunOverrides()
    seeds = dict(data.get("seeds") or {})
    if overrides.sample_seed is not None:
        seeds["sample"] = overrides.sample_seed
    if overrides.fold_seed is not None:
        seeds["fold"] = overrides.fold_seed
    if seeds:
        data["seeds"] = seeds
    if overrides.workers is not None:
        data["workers"] = overrides.workers
    if overrides.output_dir is not None:
        data["output_dir"] = str(overrides.output_dir)

    try:
        config = RunConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        raise ConfigError(_field_path(first), first["msg"]) from e

    _check_references(config)
    logger.debug("Loaded run config {} (pipeline {})", path, config.pipeline)
    return config
