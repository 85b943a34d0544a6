"""Cumulative-damage career simulator.

The dynamics are deterministic: a year of work is an allocation of time
shares across activities plus a per-activity effort level. Joint damage
``D`` accumulates from the hazard-weighted load, the meniscal variable
``M`` drains under shear and amplifies damage through the Baratz factor,
and the only damage-related observation is the proxy signal ``S``.

All formula helpers broadcast over numpy arrays so the dynamic-programming
solver can evaluate whole grids with the same code the simulator steps with.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, replace
from functools import cached_property
from typing import Any, Sequence

import numpy as np

ROLE_TOLERANCE = 1e-9
SIMPLEX_TOLERANCE = 1e-9


class ConfigError(ValueError):
    """Raised for an invalid environment or experiment configuration."""


class TerminalStateError(RuntimeError):
    """Raised when stepping an episode that has already terminated."""


class Termination(str, enum.Enum):
    NONE = "none"
    ROLE_EXIT = "role_exit"
    CAPACITY_EXIT = "capacity_exit"
    AGE_LIMIT = "age_limit"


@dataclass(frozen=True)
class ActivitySpec:
    name: str
    energy: float
    hazard: float
    perf: float


@dataclass(frozen=True)
class LoadModel:
    """How an allocation is turned into a scalar joint load.

    ``weighted`` (bricklayer): each hazard is split into stress/strain/shear
    fractions which are re-weighted into one composite factor; hazards are on
    a 0-100 scale. ``normalized`` (NBA): load is the hazard-weighted effort
    divided by ``h_max`` and doubles as the shear input.
    """

    variant: str = "weighted"
    stress_weight: float = 0.40
    strain_weight: float = 0.35
    shear_weight: float = 0.25
    stress_fraction: float = 0.45
    strain_fraction: float = 0.35
    shear_fraction: float = 0.20
    composite: float = 0.355
    hazard_scale: float = 100.0
    h_max: float = 90.0


@dataclass(frozen=True)
class DynamicsParams:
    damage_scale: float = 0.083
    baratz_exponent: float = 1.3
    baratz_intercept: float = 0.45
    baratz_slope: float = 0.55
    bmi_slope: float = 0.07
    bmi_pivot: float = 22.0
    recovery_scale: float = 0.015
    recovery_pivot_age: float = 30.0
    recovery_span: float = 50.0
    meniscal_base_rate: float = 0.075
    amp_threshold: float = 0.6
    amp_slope: float = 3.0
    onset_age: float = 45.0
    onset_slope: float = 0.5
    onset_span: float = 20.0
    proxy_scale: float = 2.5
    proxy_exponent: float = 1.8
    d_clin: float = 0.30
    capacity_slope: float = 1.5
    effort_exponent: float = 0.6


@dataclass(frozen=True)
class RoleRule:
    window: int = 5
    alpha: float = 0.15
    dominant_index: int = 0


@dataclass(frozen=True)
class EnvConfig:
    name: str
    activities: tuple[ActivitySpec, ...]
    load_model: LoadModel
    dynamics: DynamicsParams
    role: RoleRule
    horizon: int
    start_age: float
    bmi: float = 22.0
    zero_proxy: bool = False
    no_exit: bool = False
    penalty_weight: float = 0.0

    @property
    def k(self) -> int:
        return len(self.activities)

    @property
    def terminal_age(self) -> float:
        return self.start_age + self.horizon

    @cached_property
    def hazards(self) -> np.ndarray:
        return np.array([a.hazard for a in self.activities], dtype=float)

    @cached_property
    def perfs(self) -> np.ndarray:
        return np.array([a.perf for a in self.activities], dtype=float)

    @property
    def perf_max(self) -> float:
        return float(self.perfs.max())

    def with_updates(self, **changes: Any) -> "EnvConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["activities"] = [asdict(a) for a in self.activities]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        d = dict(d)
        try:
            d["activities"] = tuple(ActivitySpec(**a) for a in d["activities"])
            d["load_model"] = LoadModel(**d["load_model"])
            d["dynamics"] = DynamicsParams(**d["dynamics"])
            d["role"] = RoleRule(**d["role"])
            return cls(**d)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed environment config: {exc}") from exc


@dataclass(frozen=True)
class EnvState:
    D: float
    M: float
    t: int
    age: float
    share_history: tuple[float, ...] = ()
    done: bool = False


@dataclass(frozen=True)
class StepOutcome:
    reward: float
    penalty: float
    observation: np.ndarray
    termination: Termination
    D: float
    M: float
    load: float
    shear: float
    S: float
    h_occ: float
    s_dom: float
    role_violation: bool = False
    capacity_violation: bool = False


# ---------------------------------------------------------------------------
# formula helpers (array-friendly)


def compute_load(shares, efforts, config: EnvConfig):
    """Return ``(load, shear)`` for an allocation; trailing axis is activities."""
    shares = np.asarray(shares, dtype=float)
    efforts = np.asarray(efforts, dtype=float)
    if shares.shape[-1] != config.k or efforts.shape[-1] != config.k:
        raise ConfigError(
            f"expected {config.k} activities, got shares {shares.shape[-1]} "
            f"and efforts {efforts.shape[-1]}"
        )
    lm = config.load_model
    exposure = np.sum(shares * efforts * config.hazards, axis=-1)
    if lm.variant == "weighted":
        exposure = exposure / lm.hazard_scale
        return lm.composite * exposure, lm.shear_fraction * exposure
    if lm.variant == "normalized":
        load = exposure / lm.h_max
        return load, load
    raise ConfigError(f"unknown load model variant {lm.variant!r}")


def baratz(M, p: DynamicsParams):
    return 1.0 / (p.baratz_intercept + p.baratz_slope * np.asarray(M, dtype=float))


def bmi_factor(bmi, p: DynamicsParams):
    return 1.0 + p.bmi_slope * np.maximum(0.0, np.asarray(bmi, dtype=float) - p.bmi_pivot)


def recovery(age, p: DynamicsParams):
    # Not capped above: at age 16 the factor is 1.28.
    frac = 1.0 - (np.asarray(age, dtype=float) - p.recovery_pivot_age) / p.recovery_span
    return p.recovery_scale * np.maximum(0.0, frac)


def damage_step(D, load, M, bmi, age, p: DynamicsParams):
    inc = p.damage_scale * load * bmi_factor(bmi, p) * baratz(M, p) ** p.baratz_exponent
    return np.clip(D + inc - recovery(age, p), 0.0, 1.0)


def amplification(M, p: DynamicsParams):
    M = np.asarray(M, dtype=float)
    return np.where(M < p.amp_threshold, 1.0 + p.amp_slope * (p.amp_threshold - M), 1.0)


def onset(age, p: DynamicsParams):
    age = np.asarray(age, dtype=float)
    return np.where(age >= p.onset_age, 1.0 + p.onset_slope * (age - p.onset_age) / p.onset_span, 1.0)


def meniscal_step(M, shear, age, p: DynamicsParams):
    drain = p.meniscal_base_rate * shear * amplification(M, p) * onset(age, p)
    return np.clip(M - drain, 0.0, 1.0)


def proxy_signal(D, p: DynamicsParams):
    return 1.0 + p.proxy_scale * np.asarray(D, dtype=float) ** p.proxy_exponent


def capacity_factor(D, S, p: DynamicsParams):
    D = np.asarray(D, dtype=float)
    excess = np.where(D > p.d_clin, p.capacity_slope * (D - p.d_clin) * S, 0.0)
    return np.maximum(0.0, 1.0 - excess)


def step_reward(shares, efforts, h_occ, config: EnvConfig):
    shares = np.asarray(shares, dtype=float)
    efforts = np.asarray(efforts, dtype=float)
    beta = config.dynamics.effort_exponent
    gain = np.sum(shares * efforts**beta * config.perfs, axis=-1) / config.perf_max
    return h_occ * gain


def role_check(share_history: Sequence[float], rule: RoleRule) -> bool:
    """True when a full trailing window has mean dominant share below alpha."""
    if len(share_history) < rule.window:
        return False
    recent = share_history[-rule.window :]
    return math.fsum(recent) / rule.window < rule.alpha - ROLE_TOLERANCE


# ---------------------------------------------------------------------------
# episode mechanics


def validate_action(shares, efforts, k: int) -> tuple[np.ndarray, np.ndarray]:
    shares = np.asarray(shares, dtype=float)
    efforts = np.asarray(efforts, dtype=float)
    if shares.shape != (k,) or efforts.shape != (k,):
        raise ConfigError(f"action must have {k} shares and {k} efforts")
    if np.any(shares < 0) or abs(shares.sum() - 1.0) > SIMPLEX_TOLERANCE:
        raise ValueError(f"shares not on the simplex: {shares}")
    if np.any(efforts < 0) or np.any(efforts > 1):
        raise ValueError(f"efforts outside [0, 1]: {efforts}")
    return shares, efforts


def observe(state: EnvState, config: EnvConfig) -> np.ndarray:
    S = 0.0 if config.zero_proxy else float(proxy_signal(state.D, config.dynamics))
    return np.array([state.t / config.horizon, S])


def env_reset(config: EnvConfig, seed: int | None = None) -> tuple[EnvState, np.ndarray]:
    # The dynamics are deterministic; seed is accepted for API symmetry only.
    del seed
    problems = validate_config(config)
    if problems:
        raise ConfigError("; ".join(problems))
    state = EnvState(D=0.0, M=1.0, t=0, age=float(config.start_age))
    return state, observe(state, config)


def env_step(state: EnvState, shares, efforts, config: EnvConfig) -> tuple[EnvState, StepOutcome]:
    if state.done or state.t >= config.horizon:
        raise TerminalStateError("episode already terminated; call env_reset")
    shares, efforts = validate_action(shares, efforts, config.k)
    p = config.dynamics
    role = config.role

    load, shear = compute_load(shares, efforts, config)
    load, shear = float(load), float(shear)
    S = float(proxy_signal(state.D, p))
    h_occ = float(capacity_factor(state.D, S, p))
    reward = float(step_reward(shares, efforts, h_occ, config))

    s_dom = float(shares[role.dominant_index])
    penalty = -config.penalty_weight if (config.penalty_weight > 0 and s_dom < role.alpha) else 0.0

    D_next = float(damage_step(state.D, load, state.M, config.bmi, state.age, p))
    M_next = float(meniscal_step(state.M, shear, state.age, p))
    history = (state.share_history + (s_dom,))[-role.window :]
    t_next = state.t + 1

    role_violation = role_check(history, role)
    S_next = float(proxy_signal(D_next, p))
    capacity_violation = float(capacity_factor(D_next, S_next, p)) <= 0.0

    if role_violation and not config.no_exit:
        termination = Termination.ROLE_EXIT
    elif capacity_violation and not config.no_exit:
        termination = Termination.CAPACITY_EXIT
    elif t_next >= config.horizon:
        termination = Termination.AGE_LIMIT
    else:
        termination = Termination.NONE

    new_state = EnvState(
        D=D_next,
        M=M_next,
        t=t_next,
        age=float(config.start_age + t_next),
        share_history=history,
        done=termination is not Termination.NONE,
    )
    outcome = StepOutcome(
        reward=reward,
        penalty=penalty,
        observation=observe(new_state, config),
        termination=termination,
        D=D_next,
        M=M_next,
        load=load,
        shear=shear,
        S=S,
        h_occ=h_occ,
        s_dom=s_dom,
        role_violation=role_violation,
        capacity_violation=capacity_violation,
    )
    return new_state, outcome


class CareerEnv:
    """Gym-style stateful wrapper around :func:`env_reset` / :func:`env_step`."""

    def __init__(self, config: EnvConfig):
        self.config = config
        self.state: EnvState | None = None

    @property
    def observation_size(self) -> int:
        return 2

    def reset(self, seed: int | None = None) -> np.ndarray:
        self.state, obs = env_reset(self.config, seed)
        return obs

    def step(self, shares, efforts) -> StepOutcome:
        if self.state is None:
            raise TerminalStateError("call reset() before step()")
        self.state, outcome = env_step(self.state, shares, efforts, self.config)
        return outcome


def validate_config(config: EnvConfig) -> list[str]:
    """Return human-readable invariant violations; empty when the config is valid."""
    problems: list[str] = []
    acts = config.activities
    if config.horizon < 1:
        problems.append(f"horizon must be >= 1, got {config.horizon}")
    if len(acts) < 2:
        problems.append(f"need at least 2 activities, got {len(acts)}")
    for a in acts:
        if min(a.energy, a.hazard, a.perf) < 0:
            problems.append(f"activity {a.name!r} has a negative parameter")
    if len(acts) >= 2:
        hazards = [a.hazard for a in acts]
        perfs = [a.perf for a in acts]
        h_max = max(hazards)
        p_max = max(perfs)
        h_arg = [i for i, h in enumerate(hazards) if h == h_max]
        p_arg = [i for i, p in enumerate(perfs) if p == p_max]
        if len(h_arg) != 1:
            problems.append(f"hazard maximiser is not unique: {[acts[i].name for i in h_arg]}")
        elif len(p_arg) != 1:
            problems.append(f"perf maximiser is not unique: {[acts[i].name for i in p_arg]}")
        elif h_arg[0] != p_arg[0]:
            problems.append("hazard and perf maximisers differ; no dominant activity")
        elif h_arg[0] != config.role.dominant_index:
            problems.append(
                f"dominant_index {config.role.dominant_index} does not point at the dominant activity"
            )
    role = config.role
    if role.window < 1:
        problems.append(f"role window must be >= 1, got {role.window}")
    if not 0.0 < role.alpha < 1.0:
        problems.append(f"role alpha must lie in (0, 1), got {role.alpha}")
    p = config.dynamics
    if p.damage_scale <= 0:
        problems.append("damage_scale must be positive")
    if not 0.0 < p.amp_threshold < 1.0:
        problems.append("amp_threshold must lie in (0, 1)")
    if not 0.0 < p.d_clin < 1.0:
        problems.append("d_clin must lie in (0, 1)")
    if not 0.0 < p.effort_exponent <= 1.0:
        problems.append("effort_exponent must lie in (0, 1]")
    lm = config.load_model
    if lm.variant not in ("weighted", "normalized"):
        problems.append(f"unknown load model variant {lm.variant!r}")
    if lm.h_max <= 0:
        problems.append("h_max must be positive")
    if config.penalty_weight < 0:
        problems.append("penalty_weight must be non-negative")
    return problems


def rollout(config: EnvConfig, policy, max_steps: int | None = None) -> dict:
    """Run one episode with ``policy(state) -> (shares, efforts)``.

    Returns per-step records plus the terminal summary. Used for reference
    rollouts, schedule evaluation and calibration reports.
    """
    state, _ = env_reset(config)
    steps = []
    total = 0.0
    outcome = None
    limit = config.horizon if max_steps is None else max_steps
    while not state.done and state.t < limit:
        shares, efforts = policy(state)
        age = state.age
        t = state.t
        state, outcome = env_step(state, shares, efforts, config)
        total += outcome.reward
        steps.append(
            {
                "t": t,
                "age": age,
                "D": outcome.D,
                "M": outcome.M,
                "S": outcome.S,
                "load": outcome.load,
                "reward": outcome.reward,
                "s_dom": outcome.s_dom,
                "efforts": list(map(float, efforts)),
                "termination": outcome.termination.value,
            }
        )
    return {
        "steps": steps,
        "return": total,
        "length": len(steps),
        "exit_age": state.age,
        "termination": outcome.termination.value if outcome else Termination.NONE.value,
        "completed": state.t >= config.horizon,
        "D_final": state.D,
        "M_final": state.M,
    }
