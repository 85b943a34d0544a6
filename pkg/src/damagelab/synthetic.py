"""Minimal binary-effort cumulative-damage MDP.

Damage starts at 0 and grows by ``kappa * e`` per step (clipped at 1);
the per-step reward is ``e**beta * (1 - D)**2``. The continuation policy is
uniform over {e_L, e_H}. Because damage only depends on how many high-effort
steps were taken, exact values come from a DP over (t, count) in O(H^2).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable

import numpy as np


@dataclass(frozen=True)
class MinimalMdpParams:
    kappa: float
    beta: float
    e_low: float
    e_high: float
    horizon: int

    def __post_init__(self):
        if not 0.0 < self.beta <= 1.0:
            raise ValueError("beta must lie in (0, 1]")
        if not 0.0 < self.e_low < self.e_high <= 1.0:
            raise ValueError("need 0 < e_low < e_high <= 1")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")

    @property
    def reward_gap(self) -> float:
        return self.e_high**self.beta - self.e_low**self.beta

    @property
    def mean_effort_reward(self) -> float:
        return 0.5 * (self.e_low**self.beta + self.e_high**self.beta)


def _reward(D, e, beta):
    return e**beta * (1.0 - D) ** 2


def _count_dp(p: MinimalMdpParams) -> list[np.ndarray]:
    """``V[t][c]``: expected remaining return from step t after c high-effort steps."""
    H = p.horizon
    V = [np.zeros(t + 1) for t in range(H + 1)]
    for t in range(H - 1, -1, -1):
        c = np.arange(t + 1)
        D = np.minimum(1.0, p.kappa * (c * p.e_high + (t - c) * p.e_low))
        high = _reward(D, p.e_high, p.beta) + V[t + 1][c + 1]
        low = _reward(D, p.e_low, p.beta) + V[t + 1][c]
        V[t] = 0.5 * (high + low)
    return V


def continuation_values(p: MinimalMdpParams) -> tuple[float, float]:
    """Uniform-policy values from step 1 after a high / low first action."""
    if p.horizon == 1:
        return 0.0, 0.0
    V = _count_dp(p)
    return float(V[1][1]), float(V[1][0])


def exact_q_origin(p: MinimalMdpParams) -> tuple[float, float, float]:
    """``(Q(0, e_H), Q(0, e_L), gap)`` under the uniform continuation policy."""
    v_high, v_low = continuation_values(p)
    q_high = p.e_high**p.beta + v_high
    q_low = p.e_low**p.beta + v_low
    return q_high, q_low, q_high - q_low


def enumerate_q_origin(p: MinimalMdpParams) -> tuple[float, float, float]:
    """Brute force over all 2^(H-1) continuation sequences. Exponential; test oracle only."""
    def episode(first: float, rest: tuple[float, ...]) -> float:
        D, total = 0.0, 0.0
        for e in (first,) + rest:
            total += _reward(D, e, p.beta)
            D = min(1.0, D + p.kappa * e)
        return total

    n = p.horizon - 1
    weight = 0.5**n
    q = {}
    for first in (p.e_high, p.e_low):
        q[first] = sum(weight * episode(first, rest) for rest in itertools.product((p.e_high, p.e_low), repeat=n))
    return q[p.e_high], q[p.e_low], q[p.e_high] - q[p.e_low]


def expected_step0_gradient(p: MinimalMdpParams) -> float:
    return 0.25 * exact_q_origin(p)[2]


def lipschitz_bound(p: MinimalMdpParams) -> float:
    return 2.0 * (p.horizon - 1) * p.mean_effort_reward * p.kappa * (p.e_high - p.e_low)


def gap_lower_bound(p: MinimalMdpParams) -> float:
    return p.reward_gap - lipschitz_bound(p)


def h_star(p: MinimalMdpParams) -> float:
    """Largest horizon for which the commitment condition is guaranteed."""
    denom = 2.0 * p.kappa * p.mean_effort_reward * (p.e_high - p.e_low)
    if denom == 0.0:
        raise ZeroDivisionError("critical horizon undefined for kappa = 0 or e_high = e_low")
    return 1.0 + p.reward_gap / denom


def sample_returns(p: MinimalMdpParams, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``n`` uniform-policy episodes; returns (first action is high, return)."""
    high = rng.random((n, p.horizon)) < 0.5
    efforts = np.where(high, p.e_high, p.e_low)
    D = np.zeros(n)
    G = np.zeros(n)
    for t in range(p.horizon):
        G += _reward(D, efforts[:, t], p.beta)
        D = np.minimum(1.0, D + p.kappa * efforts[:, t])
    return high[:, 0], G


def mc_step0_gradient(p: MinimalMdpParams, n_samples: int, seed: int) -> tuple[float, float]:
    """REINFORCE estimate of the step-0 gradient at theta = 0 and its standard error.

    With pi(e_H | D=0) = sigmoid(theta), the score at theta = 0 is +1/2 for
    e_H and -1/2 for e_L.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    first_high, G = sample_returns(p, n_samples, np.random.default_rng(seed))
    samples = np.where(first_high, 0.5, -0.5) * G
    if n_samples == 1:
        return float(samples[0]), float("nan")
    return float(samples.mean()), float(samples.std(ddof=1) / np.sqrt(n_samples))


def commitment_sweep(grid: Iterable[MinimalMdpParams]) -> list[dict]:
    rows = []
    for p in grid:
        q_high, q_low, gap = exact_q_origin(p)
        hs = h_star(p)
        rows.append(
            {
                "kappa": p.kappa,
                "beta": p.beta,
                "e_low": p.e_low,
                "e_high": p.e_high,
                "H": p.horizon,
                "h_star": hs,
                "q_high": q_high,
                "q_low": q_low,
                "gap": gap,
                "gap_lower_bound": gap_lower_bound(p),
                "gap_positive": gap > 0,
                "within_h_star": p.horizon <= hs,
            }
        )
    return rows


def sweep_grid(
    kappas: Iterable[float],
    horizons: Iterable[int],
    beta: float = 0.6,
    e_low: float = 0.05,
    e_high: float = 1.0,
) -> list[MinimalMdpParams]:
    return [MinimalMdpParams(k, beta, e_low, e_high, H) for k in kappas for H in horizons]
