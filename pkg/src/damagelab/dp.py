"""Backward induction over the (D, M, age) grid.

The action space is the fixed-share parameterisation: a dominant-activity
share level and a dominant-effort level, with the remaining share split
uniformly over the other activities at a fixed effort. The trailing role
window is not part of the DP state; the share floor keeps every candidate
role-viable.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .env import (
    EnvConfig,
    EnvState,
    capacity_factor,
    compute_load,
    damage_step,
    env_reset,
    env_step,
    meniscal_step,
    proxy_signal,
    rollout,
    step_reward,
)


class DPReferenceError(RuntimeError):
    """The DP reference rollout failed to complete; indicates a solver bug."""


def _levels(lo: float, hi: float, step: float) -> tuple[float, ...]:
    n = int(round((hi - lo) / step))
    return tuple(round(lo + i * step, 10) for i in range(n + 1))


def axis_nodes(delta: float) -> np.ndarray:
    """Grid nodes on [0, 1]; a final short cell is added when delta does not divide 1."""
    n = int(math.floor(1.0 / delta + 1e-9))
    nodes = [round(i * delta, 12) for i in range(n + 1)]
    if nodes[-1] < 1.0 - 1e-12:
        nodes.append(1.0)
    return np.array(nodes)


@dataclass(frozen=True)
class GridSpec:
    dD: float = 0.01
    dM: float = 0.01
    effort_levels: tuple[float, ...] = _levels(0.20, 0.80, 0.05)
    share_levels: tuple[float, ...] = _levels(0.15, 0.80, 0.05)
    nondominant_effort: float = 0.40
    interpolation: str = "bilinear"

    @classmethod
    def for_preset(cls, preset: str) -> "GridSpec":
        if preset == "nba":
            return cls(dD=0.02, dM=0.053)
        return cls()

    def d_nodes(self) -> np.ndarray:
        return axis_nodes(self.dD)

    def m_nodes(self) -> np.ndarray:
        return axis_nodes(self.dM)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        d = dict(d)
        for key in ("effort_levels", "share_levels"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def action_set(config: EnvConfig, grid: GridSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Candidate actions ordered by (dominant effort, dominant share) ascending.

    Returns ``(levels, shares, efforts)`` with shapes (A, 2), (A, k), (A, k).
    The ordering makes ``argmax`` break ties toward lower effort, then lower share.
    """
    k = config.k
    dom = config.role.dominant_index
    levels, shares, efforts = [], [], []
    for e in grid.effort_levels:
        for s in grid.share_levels:
            sh = np.full(k, (1.0 - s) / (k - 1))
            sh[dom] = s
            ef = np.full(k, grid.nondominant_effort)
            ef[dom] = e
            levels.append((s, e))
            shares.append(sh)
            efforts.append(ef)
    return np.array(levels), np.array(shares), np.array(efforts)


@dataclass
class ValueTable:
    V: np.ndarray  # (H + 1, nD, nM); V[H] is the terminal value (0)
    best: np.ndarray  # (H, nD, nM) index into the action set
    d_nodes: np.ndarray
    m_nodes: np.ndarray
    levels: np.ndarray
    shares: np.ndarray
    efforts: np.ndarray
    grid: GridSpec
    config: EnvConfig

    @property
    def horizon(self) -> int:
        return self.best.shape[0]


@dataclass
class ShareSchedule:
    """Per-step share vectors read off the DP reference trajectory."""

    shares: np.ndarray  # (H, k)
    dominant_index: int
    dominant_efforts: np.ndarray = field(default_factory=lambda: np.zeros(0))
    start_age: float = 0.0

    def __len__(self) -> int:
        return len(self.shares)

    def at(self, t: int) -> np.ndarray:
        return self.shares[min(t, len(self.shares) - 1)]

    @property
    def dominant_shares(self) -> np.ndarray:
        return self.shares[:, self.dominant_index]

    def to_dict(self) -> dict:
        return {
            "shares": self.shares.tolist(),
            "dominant_index": self.dominant_index,
            "dominant_efforts": np.asarray(self.dominant_efforts).tolist(),
            "start_age": self.start_age,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ShareSchedule":
        return cls(
            shares=np.array(d["shares"], dtype=float),
            dominant_index=int(d["dominant_index"]),
            dominant_efforts=np.array(d.get("dominant_efforts", []), dtype=float),
            start_age=float(d.get("start_age", 0.0)),
        )


def _interp(V: np.ndarray, d_nodes: np.ndarray, m_nodes: np.ndarray, D, M, method: str):
    D = np.clip(np.asarray(D, dtype=float), 0.0, 1.0)
    M = np.clip(np.asarray(M, dtype=float), 0.0, 1.0)
    if method == "nearest":
        i = np.abs(D[..., None] - d_nodes).argmin(-1)
        j = np.abs(M[..., None] - m_nodes).argmin(-1)
        return V[i, j]
    i = np.clip(np.searchsorted(d_nodes, D, side="right") - 1, 0, len(d_nodes) - 2)
    j = np.clip(np.searchsorted(m_nodes, M, side="right") - 1, 0, len(m_nodes) - 2)
    wd = (D - d_nodes[i]) / (d_nodes[i + 1] - d_nodes[i])
    wm = (M - m_nodes[j]) / (m_nodes[j + 1] - m_nodes[j])
    return (
        (1 - wd) * (1 - wm) * V[i, j]
        + wd * (1 - wm) * V[i + 1, j]
        + (1 - wd) * wm * V[i, j + 1]
        + wd * wm * V[i + 1, j + 1]
    )


def interpolate_value(table: ValueTable, D, M, t: int):
    """Value at step ``t`` for off-grid (D, M), bilinear over cell corners."""
    return _interp(table.V[t], table.d_nodes, table.m_nodes, D, M, table.grid.interpolation)


def _q_values(table_V_next, d_nodes, m_nodes, D, M, age, config, loads, shears, gains, method):
    """Q(D, M, a) for broadcastable D (…,1), M (…,1) against the action axis."""
    p = config.dynamics
    S = proxy_signal(D, p)
    reward = capacity_factor(D, S, p) * gains
    D_next = damage_step(D, loads, M, config.bmi, age, p)
    M_next = meniscal_step(M, shears, age, p)
    cont = _interp(table_V_next, d_nodes, m_nodes, D_next, M_next, method)
    alive = capacity_factor(D_next, proxy_signal(D_next, p), p) > 0.0
    return reward + np.where(alive, cont, 0.0)


def solve_dp(config: EnvConfig, grid: GridSpec | None = None) -> ValueTable:
    grid = grid or GridSpec()
    d_nodes, m_nodes = grid.d_nodes(), grid.m_nodes()
    levels, shares, efforts = action_set(config, grid)
    loads, shears = compute_load(shares, efforts, config)
    gains = step_reward(shares, efforts, 1.0, config)

    H = config.horizon
    V = np.zeros((H + 1, len(d_nodes), len(m_nodes)))
    best = np.zeros((H, len(d_nodes), len(m_nodes)), dtype=np.int32)
    D = d_nodes[:, None, None]
    M = m_nodes[None, :, None]
    for t in range(H - 1, -1, -1):
        age = config.start_age + t
        Q = _q_values(V[t + 1], d_nodes, m_nodes, D, M, age, config, loads, shears, gains, grid.interpolation)
        best[t] = Q.argmax(axis=-1)
        V[t] = np.take_along_axis(Q, best[t][..., None], axis=-1)[..., 0]
    return ValueTable(V, best, d_nodes, m_nodes, levels, shares, efforts, grid, config)


def dp_action_index(table: ValueTable, state: EnvState) -> int:
    """Argmax action at an exact (off-grid) state via one-step lookahead."""
    config = table.config
    loads, shears = compute_load(table.shares, table.efforts, config)
    gains = step_reward(table.shares, table.efforts, 1.0, config)
    Q = _q_values(
        table.V[state.t + 1], table.d_nodes, table.m_nodes,
        np.array(state.D), np.array(state.M), state.age,
        config, loads, shears, gains, table.grid.interpolation,
    )
    return int(np.argmax(Q))


def dp_policy(table: ValueTable) -> Callable[[EnvState], tuple[np.ndarray, np.ndarray]]:
    def act(state: EnvState):
        a = dp_action_index(table, state)
        return table.shares[a], table.efforts[a]

    return act


def rollout_reference(
    config: EnvConfig,
    source: ValueTable | ShareSchedule,
    effort_source: Callable[[EnvState], np.ndarray] | None = None,
) -> dict:
    """Deterministic rollout of the DP policy, or of a schedule plus an effort source.

    With a schedule and no effort source, the schedule's recorded dominant
    efforts are used (non-dominant efforts are taken from the default grid).
    """
    if isinstance(source, ValueTable):
        policy = dp_policy(source)
        must_complete = True
    else:
        schedule = source
        must_complete = effort_source is None
        if effort_source is None:
            nd = GridSpec().nondominant_effort

            def effort_source(state: EnvState) -> np.ndarray:
                ef = np.full(config.k, nd)
                ef[schedule.dominant_index] = schedule.dominant_efforts[state.t]
                return ef

        def policy(state: EnvState):
            return schedule.at(state.t), effort_source(state)

    result = rollout(config.with_updates(no_exit=False), policy)
    if must_complete and not result["completed"]:
        raise DPReferenceError(
            f"DP reference exited at age {result['exit_age']} via {result['termination']}"
        )
    return result


def extract_share_schedule(table: ValueTable, config: EnvConfig | None = None) -> ShareSchedule:
    """Shares (and dominant efforts) chosen along the greedy DP trajectory from reset."""
    config = config or table.config
    state, _ = env_reset(config)
    shares, dom_efforts = [], []
    dom = config.role.dominant_index
    while not state.done:
        a = dp_action_index(table, state)
        shares.append(table.shares[a])
        dom_efforts.append(table.efforts[a][dom])
        state, _ = env_step(state, table.shares[a], table.efforts[a], config.with_updates(no_exit=False))
    if state.t < config.horizon:
        raise DPReferenceError(f"DP trajectory terminated early at step {state.t}")
    return ShareSchedule(
        shares=np.array(shares),
        dominant_index=dom,
        dominant_efforts=np.array(dom_efforts),
        start_age=config.start_age,
    )


def save_value_table(table: ValueTable, path: str | Path, config_hash: str = "") -> None:
    meta = {
        "grid": table.grid.to_dict(),
        "config": table.config.to_dict(),
        "config_hash": config_hash,
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez_compressed(
        tmp,
        V=table.V,
        best=table.best,
        d_nodes=table.d_nodes,
        m_nodes=table.m_nodes,
        meta=np.array(json.dumps(meta)),
    )
    tmp.replace(path)


def load_value_table(path: str | Path) -> ValueTable:
    with np.load(path) as data:
        meta = json.loads(str(data["meta"]))
        grid = GridSpec.from_dict(meta["grid"])
        config = EnvConfig.from_dict(meta["config"])
        levels, shares, efforts = action_set(config, grid)
        return ValueTable(
            V=data["V"],
            best=data["best"],
            d_nodes=data["d_nodes"],
            m_nodes=data["m_nodes"],
            levels=levels,
            shares=shares,
            efforts=efforts,
            grid=grid,
            config=config,
        )
