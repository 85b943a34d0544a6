"""Experiment configuration files (strict JSON) and content hashing."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .dp import GridSpec
from .env import ConfigError, EnvConfig, validate_config
from .presets import PRESET_IDS, get_preset
from .trainers import CONDITION_KINDS, Condition, PpoConfig

CONFIG_SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "DAMAGELAB_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"

_TOP_LEVEL = {
    "schema_version",
    "preset",
    "env_overrides",
    "condition",
    "seeds",
    "steps",
    "ppo",
    "grid",
    "output_dir",
    "eval_horizon",
}


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT))


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def _merge(base: dict, overrides: dict, path: str) -> dict:
    out = copy.deepcopy(base)
    for key, value in overrides.items():
        where = f"{path}.{key}" if path else key
        if key not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} expects an object")
            out[key] = _merge(out[key], value, where)
        else:
            out[key] = value
    return out


def _check_keys(d: dict, allowed: set[str], path: str) -> None:
    for key in d:
        if key not in allowed:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key {where!r}")


def apply_env_overrides(base: EnvConfig, overrides: dict) -> EnvConfig:
    d = base.to_dict()
    if "activities" in overrides:
        raise ConfigError("activities cannot be overridden piecemeal; define a new preset instead")
    merged = _merge(d, overrides, "env_overrides")
    config = EnvConfig.from_dict(merged)
    errors = validate_config(config)
    if errors:
        raise ConfigError("; ".join(errors))
    return config


@dataclass
class ExperimentConfig:
    preset: str = "bricklayer"
    env_overrides: dict = field(default_factory=dict)
    condition: Condition = field(default_factory=Condition)
    seeds: list[int] = field(default_factory=lambda: [0])
    steps: int = 1_000_000
    ppo: PpoConfig = field(default_factory=PpoConfig)
    grid: GridSpec = field(default_factory=GridSpec)
    output_dir: str | None = None
    eval_horizon: int | None = None
    schema_version: int = CONFIG_SCHEMA_VERSION

    @property
    def env(self) -> EnvConfig:
        return apply_env_overrides(get_preset(self.preset), self.env_overrides)

    @property
    def eval_env(self) -> EnvConfig:
        env = self.env
        return env if self.eval_horizon is None else env.with_updates(horizon=self.eval_horizon)

    def echo(self) -> dict:
        """Fully resolved configuration, defaults filled in."""
        return {
            "schema_version": self.schema_version,
            "preset": self.preset,
            "env": self.env.to_dict(),
            "condition": self.condition.to_dict(),
            "seeds": list(self.seeds),
            "steps": self.steps,
            "ppo": asdict(self.ppo),
            "grid": self.grid.to_dict(),
            "output_dir": self.output_dir,
            "eval_horizon": self.eval_horizon,
        }

    def run_hash(self, seed: int) -> str:
        d = self.echo()
        d.pop("output_dir")
        d["seeds"] = [seed]
        return config_hash(d)


def _dataclass_from(cls, d: dict, path: str):
    if not isinstance(d, dict):
        raise ConfigError(f"config key {path!r} expects an object")
    _check_keys(d, {f.name for f in fields(cls)}, path)
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {path}: {exc}") from exc


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys(raw, _TOP_LEVEL, "")
    version = raw.get("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"config schema version {version} is not supported (expected {CONFIG_SCHEMA_VERSION})")
    preset = raw.get("preset", "bricklayer")
    if preset not in PRESET_IDS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {PRESET_IDS}")
    cond_raw = dict(raw.get("condition", {}))
    if cond_raw.get("kind", "ppo_real") not in CONDITION_KINDS:
        raise ConfigError(f"unknown condition kind {cond_raw.get('kind')!r}")
    steps = int(raw.get("steps", PpoConfig().total_steps))
    ppo_raw = dict(raw.get("ppo", {}))
    ppo_raw.setdefault("total_steps", steps)
    grid_raw = dict(raw.get("grid", asdict(GridSpec.for_preset(preset))))
    for key in ("effort_levels", "share_levels"):
        if key in grid_raw:
            grid_raw[key] = tuple(grid_raw[key])
    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise ConfigError("seeds must be an explicit list of integers")
    cfg = ExperimentConfig(
        preset=preset,
        env_overrides=dict(raw.get("env_overrides", {})),
        condition=_dataclass_from(Condition, cond_raw, "condition"),
        seeds=list(seeds),
        steps=steps,
        ppo=_dataclass_from(PpoConfig, ppo_raw, "ppo"),
        grid=_dataclass_from(GridSpec, grid_raw, "grid"),
        output_dir=raw.get("output_dir"),
        eval_horizon=raw.get("eval_horizon"),
        schema_version=version,
    )
    cfg.env  # validates the overrides eagerly
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(raw)
