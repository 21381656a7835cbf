"""Tests for run configuration loading."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import pytest

from medagent_harness.backend import route
from medagent_harness.config import (
    ENV_OUTPUT_DIR,
    ENV_WORKERS,
    ConfigError,
    RunOverrides,
    load_run_config,
)


def _config(**changes: Any) -> dict[str, Any]:
    config: dict[str, Any] = {
        "pipeline": "cod",
        "dataset": {"path": "data/cases.jsonl", "kind": "clinical"},
        "backends": [{"name": "oracle", "kind": "scripted", "script": [{"reply": "Answer: A"}]}],
        "route": {"name": "scripted-oracle", "default_backend": "oracle"},
    }
    config.update(changes)
    return config


def _write(tmp_path: Path, config: dict[str, Any]) -> Path:
    path = tmp_path / "run.json"
    path.write_text(json.dumps(config), encoding="utf-8")
    return path


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.delenv(ENV_WORKERS, raising=False)
    monkeypatch.delenv(ENV_OUTPUT_DIR, raising=False)


def test_defaults_and_relative_paths(tmp_path: Path) -> None:
    """Test defaults and paths resolved against the config file's directory."""
    config = load_run_config(_write(tmp_path, _config()))
    assert config.dataset.path == tmp_path / "data" / "cases.jsonl"
    assert config.dataset.display_name == "cases"
    assert config.k_folds == 3
    assert config.max_iters == 3
    assert config.max_turns == 20
    assert config.workers == 1
    assert config.output_dir == Path("runs")
    assert config.uses_simulated_clock()


def test_flags_beat_environment_beat_file(
    tmp_path: Path, monkeypatch: pytest.MonkeyPatch
) -> None:
    """Test the override order for workers, seeds and output directory."""
    path = _write(tmp_path, _config(workers=2, seeds={"sample": 1, "fold": 1}))
    monkeypatch.setenv(ENV_WORKERS, "4")
    monkeypatch.setenv(ENV_OUTPUT_DIR, str(tmp_path / "env-out"))

    from_env = load_run_config(path)
    assert from_env.workers == 4
    assert from_env.output_dir == tmp_path / "env-out"

    from_flags = load_run_config(
        path, RunOverrides(fold_seed=9, workers=8, output_dir=tmp_path / "flag-out")
    )
    assert from_flags.workers == 8
    assert from_flags.seeds.fold == 9
    assert from_flags.seeds.sample == 1
    assert from_flags.output_dir == tmp_path / "flag-out"


def test_invalid_environment_value(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    """Test a non-integer worker count from the environment."""
    monkeypatch.setenv(ENV_WORKERS, "many")
    with pytest.raises(ConfigError) as excinfo:
        load_run_config(_write(tmp_path, _config()))
    assert excinfo.value.field_path == ENV_WORKERS


@pytest.mark.parametrize(
    ("changes", "field_path"),
    [
        ({"route": {"default_backend": "claude"}}, "route.default_backend"),
        (
            {"route": {"default_backend": "oracle", "overrides": {"cod.rank": "claude"}}},
            "route.overrides.cod.rank",
        ),
        ({"pipeline": "medagents"}, "dataset.kind"),
        ({"k_folds": 0}, "k_folds"),
        ({"unexpected": True}, "unexpected"),
        ({"backends": [{"name": "gpt", "kind": "live", "model": "m"}]}, "backends.0"),
        (
            {
                "backends": [
                    {"name": "oracle", "kind": "scripted"},
                    {"name": "oracle", "kind": "scripted"},
                ]
            },
            "backends.1.name",
        ),
    ],
)
def test_invalid_configs_name_the_field(
    tmp_path: Path, changes: dict[str, Any], field_path: str
) -> None:
    """Test configuration errors point at the offending field."""
    with pytest.raises(ConfigError) as excinfo:
        load_run_config(_write(tmp_path, _config(**changes)))
    assert excinfo.value.field_path == field_path
    assert str(excinfo.value).startswith(f"{field_path}: ")


def test_sample_smaller_than_folds(tmp_path: Path) -> None:
    """Test a sample that cannot fill every fold."""
    with pytest.raises(ConfigError, match="n_sample"):
        load_run_config(_write(tmp_path, _config(n_sample=2, k_folds=3)))


def test_unreadable_config(tmp_path: Path) -> None:
    """Test invalid JSON and a missing file."""
    path = tmp_path / "broken.json"
    path.write_text("{", encoding="utf-8")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_run_config(path)
    with pytest.raises(ConfigError, match="cannot read"):
        load_run_config(tmp_path / "missing.json")


def test_live_backends_use_the_system_clock(tmp_path: Path) -> None:
    """Test ``auto`` only simulates time for all-scripted runs."""
    live = {
        "name": "gpt",
        "kind": "live",
        "endpoint": "https://llm.example.test/v1/chat/completions",
        "model": "gpt-test",
        "credential_env": "OPENAI_API_KEY",
    }
    config = load_run_config(
        _write(tmp_path, _config(backends=[live], route={"default_backend": "gpt"}))
    )
    assert not config.uses_simulated_clock()
    forced = load_run_config(
        _write(
            tmp_path,
            _config(backends=[live], route={"default_backend": "gpt"}, clock="simulated"),
        )
    )
    assert forced.uses_simulated_clock()


CONFIG_DIR = Path(__file__).parent.parent / "configs"


def test_shipped_configs_load() -> None:
    """Test every config under configs/ validates."""
    paths = sorted(CONFIG_DIR.glob("*.json"))
    assert len(paths) == 6
    for path in paths:
        config = load_run_config(path)
        assert config.pipeline in {"medagents", "agentclinic"}


@pytest.mark.parametrize(
    ("filename", "key", "model"),
    [
        ("medagents-gpt4.json", "medagents.gather", "gpt-4"),
        ("medagents-gpt4.json", "medagents.decide", "gpt-4"),
        ("medagents-gpt4-eg.json", "medagents.gather", "gpt-4"),
        ("medagents-gpt4-eg.json", "medagents.analyze", "o1-preview"),
        ("medagents-gpt4-eg.json", "medagents.decide", "o1-preview"),
        ("agentclinic-o1-doctor.json", "agentclinic.doctor", "o1-preview"),
        ("agentclinic-o1-doctor.json", "agentclinic.patient", "gpt-4"),
        ("agentclinic-o1-doctor.json", "agentclinic.moderator", "gpt-4"),
        ("agentclinic-o1-patient.json", "agentclinic.patient", "o1-preview"),
        ("agentclinic-o1-patient.json", "agentclinic.doctor", "gpt-4"),
        ("agentclinic-o1-all.json", "agentclinic.doctor", "o1-preview"),
        ("agentclinic-o1-all.json", "agentclinic.patient", "o1-preview"),
        ("agentclinic-o1-all.json", "agentclinic.measurement", "o1-preview"),
        ("agentclinic-o1-all.json", "agentclinic.moderator", "o1-preview"),
    ],
)
def test_ablation_routes(filename: str, key: str, model: str) -> None:
    """Test each shipped ablation sends its roles to the intended backbone."""
    config = load_run_config(CONFIG_DIR / filename)
    specs = {spec.name: spec for spec in config.backends}
    assert route(config.route, key, specs).model == model
    assert config.n_sample == 120


def test_ablation_route_names() -> None:
    """Test reports carry the ablation names."""
    names = {
        load_run_config(CONFIG_DIR / f"{stem}.json").route.name
        for stem in ("medagents-gpt4-eg", "agentclinic-o1-doctor", "agentclinic-o1-patient")
    }
    assert names == {"GPT4-EG", "o1-doctor", "o1-patient"}
