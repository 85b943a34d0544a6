"""Per-seed summaries, completion/optimality cells and reactive-basin labels."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SUMMARY_SCHEMA_VERSION = 1
CELL_TOLERANCE = 0.02
CELL_ORDER = ("A", "B", "C")

CHECKPOINT_AGES = {
    "bricklayer": (16.0, 30.0, 60.0),
    "nba": (18.0, 28.0, 36.0),
}


@dataclass(frozen=True)
class BasinThresholds:
    initial_min: float = 0.80
    mid_min: float = 0.40
    late_max: float = 0.30
    monotone_tolerance: float = 0.02


def classify_cell(completion_rate: float, M_final: float | None, dp_M_final: float | None, eps: float = CELL_TOLERANCE) -> str:
    """``A`` if the policy does not always complete; otherwise ``C`` when its
    M_final is within ``eps`` of the DP reference, else ``B``."""
    if not 0.0 <= completion_rate <= 1.0:
        raise ValueError("completion_rate must lie in [0, 1]")
    if completion_rate < 1.0:
        return "A"
    if dp_M_final is None:
        raise ValueError("a completing policy needs a DP reference M_final to be classified")
    if M_final is None:
        raise ValueError("a completing policy must report M_final")
    return "C" if dp_M_final - M_final <= eps else "B"


def is_monotone_decline(efforts: Sequence[float], tolerance: float = 0.02) -> bool:
    e = np.asarray(efforts, dtype=float)
    return bool(np.all(np.diff(e) <= tolerance))


def checkpoint_efforts(ages: Sequence[float], efforts: Sequence[float], checkpoints: Sequence[float]) -> tuple[float, ...]:
    lookup = {round(float(a), 6): float(e) for a, e in zip(ages, efforts)}
    out = []
    for age in checkpoints:
        key = round(float(age), 6)
        if key not in lookup:
            raise ValueError(f"effort profile does not cover age {age}")
        out.append(lookup[key])
    return tuple(out)


def classify_basin(
    ages: Sequence[float],
    efforts: Sequence[float],
    checkpoints: Sequence[float],
    thresholds: BasinThresholds = BasinThresholds(),
) -> str:
    """``reactive`` when the profile starts high, stays moderate mid-career,
    ends low and never rises year-over-year by more than the tolerance."""
    initial, mid, late = checkpoint_efforts(ages, efforts, checkpoints)
    reactive = (
        initial > thresholds.initial_min
        and mid > thresholds.mid_min
        and late < thresholds.late_max
        and is_monotone_decline(efforts, thresholds.monotone_tolerance)
    )
    return "reactive" if reactive else "other"


@dataclass
class SeedSummary:
    seed: int
    preset: str
    condition: dict
    eval_episodes: int
    completion_rate: float
    exit_age_mean: float
    exit_age_sd: float
    M_final_mean: float
    M_final_sd: float
    D_final_mean: float
    return_mean: float
    termination_counts: dict
    checkpoint_ages: list
    checkpoint_efforts: list | None
    basin: str | None
    training_steps: int
    config_hash: str
    schema_version: int = SUMMARY_SCHEMA_VERSION
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        validate_summary(asdict(self))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SeedSummary":
        validate_summary(d)
        return cls(**d)


_REQUIRED = {
    "seed": int,
    "preset": str,
    "condition": dict,
    "eval_episodes": int,
    "completion_rate": float,
    "exit_age_mean": float,
    "exit_age_sd": float,
    "M_final_mean": float,
    "M_final_sd": float,
    "D_final_mean": float,
    "return_mean": float,
    "termination_counts": dict,
    "checkpoint_ages": list,
    "checkpoint_efforts": (list, type(None)),
    "basin": (str, type(None)),
    "training_steps": int,
    "config_hash": str,
    "schema_version": int,
    "extra": dict,
}


def validate_summary(d: dict) -> None:
    missing = set(_REQUIRED) - set(d)
    unknown = set(d) - set(_REQUIRED)
    if missing or unknown:
        raise ValueError(f"summary schema violation: missing {sorted(missing)}, unknown {sorted(unknown)}")
    if d["schema_version"] != SUMMARY_SCHEMA_VERSION:
        raise ValueError(f"summary schema version {d['schema_version']} != {SUMMARY_SCHEMA_VERSION}")
    for key, kind in _REQUIRED.items():
        value = d[key]
        if kind is float:
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        elif kind is int:
            ok = isinstance(value, int) and not isinstance(value, bool)
        else:
            ok = isinstance(value, kind)
        if not ok:
            raise ValueError(f"summary field {key!r} has type {type(value).__name__}")
    if not 0.0 <= d["completion_rate"] <= 1.0:
        raise ValueError("completion_rate outside [0, 1]")
    if d["eval_episodes"] < 1:
        raise ValueError("a summary needs at least one evaluation episode")
    if d["checkpoint_efforts"] is not None and d["completion_rate"] < 1.0:
        raise ValueError("checkpoint efforts are only recorded for completing policies")


def _sd(x: np.ndarray) -> float:
    return float(x.std(ddof=1)) if len(x) > 1 else 0.0


def summarize_seed(
    episodes: Sequence[dict],
    *,
    seed: int,
    preset: str,
    condition: dict,
    start_age: float,
    training_steps: int = 0,
    config_hash: str = "",
    profile: dict | None = None,
    checkpoints: Sequence[float] | None = None,
    thresholds: BasinThresholds = BasinThresholds(),
    extra: dict | None = None,
) -> SeedSummary:
    """Aggregate evaluation episodes into a :class:`SeedSummary`.

    Checkpoint efforts and the basin label come from ``profile`` (a
    deterministic rollout with ``ages`` and ``dominant_efforts``) when given,
    otherwise from the per-age mean over episodes. Both are left empty unless
    every episode completed.
    """
    if not episodes:
        raise ValueError("need at least one evaluation episode")
    completed = np.array([bool(e["completed"]) for e in episodes])
    exit_age = np.array([float(e["exit_age"]) for e in episodes])
    M_final = np.array([float(e["M_final"]) for e in episodes])
    D_final = np.array([float(e["D_final"]) for e in episodes])
    returns = np.array([float(e["return"]) for e in episodes])
    counts: dict[str, int] = {}
    for e in episodes:
        counts[e["termination"]] = counts.get(e["termination"], 0) + 1

    ages_cp = list(checkpoints if checkpoints is not None else CHECKPOINT_AGES.get(preset, ()))
    cp_efforts, basin = None, None
    completion_rate = float(completed.mean())
    if completion_rate == 1.0 and ages_cp:
        if profile is not None and profile.get("completed", True):
            ages, efforts = profile["ages"], profile["dominant_efforts"]
        else:
            efforts = np.mean([e["dominant_efforts"] for e in episodes], axis=0)
            ages = start_age + np.arange(len(efforts))
        cp_efforts = list(checkpoint_efforts(ages, efforts, ages_cp))
        basin = classify_basin(ages, efforts, ages_cp, thresholds)

    return SeedSummary(
        seed=int(seed),
        preset=preset,
        condition=dict(condition),
        eval_episodes=len(episodes),
        completion_rate=completion_rate,
        exit_age_mean=float(exit_age.mean()),
        exit_age_sd=_sd(exit_age),
        M_final_mean=float(M_final.mean()),
        M_final_sd=_sd(M_final),
        D_final_mean=float(D_final.mean()),
        return_mean=float(returns.mean()),
        termination_counts=counts,
        checkpoint_ages=[float(a) for a in ages_cp],
        checkpoint_efforts=cp_efforts,
        basin=basin,
        training_steps=int(training_steps),
        config_hash=config_hash,
        extra=dict(extra or {}),
    )


def write_summary(summary: SeedSummary, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(summary.to_dict(), indent=2, sort_keys=True))
    os.replace(tmp, path)


def read_summary(path: str | Path) -> SeedSummary:
    return SeedSummary.from_dict(json.loads(Path(path).read_text()))


def aggregate_summaries(summaries: Sequence[SeedSummary], dp_M_final: float | None = None) -> dict:
    """One table row for a group of seeds (same preset and condition)."""
    if not summaries:
        raise ValueError("no summaries to aggregate")
    completion = np.array([s.completion_rate for s in summaries])
    exit_age = np.array([s.exit_age_mean for s in summaries])
    completing = [s for s in summaries if s.completion_rate == 1.0]
    M = np.array([s.M_final_mean for s in completing])
    cells = []
    for s in summaries:
        if s.completion_rate < 1.0 or dp_M_final is not None:
            cells.append(classify_cell(s.completion_rate, s.M_final_mean, dp_M_final))
    row = {
        "n_seeds": len(summaries),
        "completion_mean": float(completion.mean()),
        "exit_age_mean": float(exit_age.mean()),
        "exit_age_sd": _sd(exit_age),
        "M_final_mean": float(M.mean()) if len(M) else math.nan,
        "M_final_sd": _sd(M) if len(M) else math.nan,
        "delta_M_final": float(dp_M_final - M.mean()) if len(M) and dp_M_final is not None else math.nan,
        "cells": {c: cells.count(c) for c in CELL_ORDER},
        "reactive": sum(s.basin == "reactive" for s in summaries),
    }
    return row
