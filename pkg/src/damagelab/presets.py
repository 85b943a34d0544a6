"""The two calibrated career environments."""

from __future__ import annotations

from .env import ActivitySpec, ConfigError, DynamicsParams, EnvConfig, LoadModel, RoleRule, validate_config

__all__ = [
    "PRESET_IDS",
    "bricklayer_config",
    "nba_config",
    "get_preset",
    "with_horizon",
    "validate_config",
]

PRESET_IDS = ("bricklayer", "nba")

# (name, energy, hazard, perf)
BRICKLAYER_ACTIVITIES = (
    ("block_laying", 85, 90, 105),
    ("scaffold_work", 80, 55, 85),
    ("mortar_mixing", 60, 50, 60),
    ("cutting_grinding", 65, 35, 65),
    ("pointing_finishing", 35, 25, 62),
    ("light_repair", 20, 10, 32),
    ("coordination", 15, 5, 45),
)

NBA_ACTIVITIES = (
    ("post_play", 90, 90, 110),
    ("perimeter_play", 70, 45, 75),
    ("full_practice", 75, 55, 60),
    ("skill_training", 40, 15, 45),
    ("strength_conditioning", 55, 25, 35),
    ("rehab_rest", 10, 3, 10),
)


def _activities(rows) -> tuple[ActivitySpec, ...]:
    return tuple(ActivitySpec(name, float(e), float(h), float(p)) for name, e, h, p in rows)


def bricklayer_config() -> EnvConfig:
    return EnvConfig(
        name="bricklayer",
        activities=_activities(BRICKLAYER_ACTIVITIES),
        load_model=LoadModel(variant="weighted"),
        dynamics=DynamicsParams(),
        role=RoleRule(window=5, alpha=0.15, dominant_index=0),
        horizon=49,
        start_age=16.0,
    )


def nba_config() -> EnvConfig:
    # Recovery pivot/span and meniscal onset age are not given for the NBA
    # environment; these are documented placeholders, overridable per run.
    dynamics = DynamicsParams(
        damage_scale=0.055,
        meniscal_base_rate=0.15,
        recovery_pivot_age=27.0,
        recovery_span=20.0,
        onset_age=30.0,
    )
    return EnvConfig(
        name="nba",
        activities=_activities(NBA_ACTIVITIES),
        load_model=LoadModel(variant="normalized", h_max=90.0),
        dynamics=dynamics,
        role=RoleRule(window=3, alpha=0.12, dominant_index=0),
        horizon=20,
        start_age=18.0,
    )


def get_preset(preset_id: str) -> EnvConfig:
    if preset_id == "bricklayer":
        return bricklayer_config()
    if preset_id == "nba":
        return nba_config()
    raise ConfigError(f"unknown preset {preset_id!r}; expected one of {PRESET_IDS}")


def with_horizon(config: EnvConfig, horizon: int) -> EnvConfig:
    """Truncate (or extend) a career to ``horizon`` steps from the same start age."""
    return config.with_updates(horizon=int(horizon))
