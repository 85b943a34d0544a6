"""Per-year (dominant share, dominant effort) schedule search with CMA-ES.

The optimiser is the standard (mu/mu_w, lambda) CMA-ES with rank-one and
rank-mu covariance updates and cumulative step-size adaptation. Bounds are
handled by clipping at decode time, so the search distribution itself is
unconstrained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dp import ShareSchedule
from .env import EnvConfig, rollout

NONDOMINANT_EFFORT = 0.40
NONFINITE_PENALTY = -1e12


@dataclass(frozen=True)
class CmaConfig:
    dim: int
    popsize: int = 50
    generations: int = 300
    lower: tuple[float, ...] | None = None
    upper: tuple[float, ...] | None = None
    mean: tuple[float, ...] | None = None
    sigma: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1 or self.popsize < 2 or self.generations < 1:
            raise ValueError("dim >= 1, popsize >= 2 and generations >= 1 required")
        for name in ("lower", "upper", "mean"):
            v = getattr(self, name)
            if v is not None and len(v) != self.dim:
                raise ValueError(f"{name} has length {len(v)}, expected {self.dim}")
        if self.lower is not None and self.upper is not None:
            if np.any(np.asarray(self.lower) >= np.asarray(self.upper)):
                raise ValueError("every lower bound must be below its upper bound")

    @classmethod
    def for_schedule(
        cls,
        horizon: int,
        share_bounds: tuple[float, float] = (0.15, 0.80),
        effort_bounds: tuple[float, float] = (0.05, 1.00),
        **kwargs,
    ) -> "CmaConfig":
        """Interleaved (share, effort) per year; mean at the box centre, sigma 0.3 of the width."""
        lower = np.tile([share_bounds[0], effort_bounds[0]], horizon)
        upper = np.tile([share_bounds[1], effort_bounds[1]], horizon)
        kwargs.setdefault("mean", tuple(0.5 * (lower + upper)))
        kwargs.setdefault("sigma", 0.3 * float(np.mean(upper - lower)))
        return cls(dim=2 * horizon, lower=tuple(lower), upper=tuple(upper), **kwargs)


@dataclass
class CmaResult:
    best_x: np.ndarray
    best_score: float
    history: list[dict]


def cma_optimize(objective: Callable[[np.ndarray], float], config: CmaConfig) -> CmaResult:
    """Maximise ``objective``. Deterministic for a given ``config.seed``."""
    n, lam = config.dim, config.popsize
    rng = np.random.default_rng(config.seed)

    mu = lam // 2
    w = math.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    w /= w.sum()
    mueff = 1.0 / np.sum(w**2)

    cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
    cs = (mueff + 2) / (n + mueff + 5)
    c1 = 2 / ((n + 1.3) ** 2 + mueff)
    cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
    damps = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (n + 1)) - 1) + cs
    chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n**2))

    if config.mean is not None:
        m = np.array(config.mean, dtype=float)
    elif config.lower is not None and config.upper is not None:
        m = 0.5 * (np.array(config.lower) + np.array(config.upper))
    else:
        m = np.zeros(n)
    sigma = config.sigma if config.sigma is not None else 0.3
    pc = np.zeros(n)
    ps = np.zeros(n)
    C = np.eye(n)
    B = np.eye(n)
    diag = np.ones(n)

    best_x, best_score = m.copy(), -math.inf
    history = []
    for gen in range(config.generations):
        z = rng.standard_normal((lam, n))
        y = (z * diag) @ B.T
        x = m + sigma * y
        scores = np.empty(lam)
        for i in range(lam):
            s = objective(x[i])
            scores[i] = s if np.isfinite(s) else NONFINITE_PENALTY

        order = np.argsort(-scores, kind="stable")
        if scores[order[0]] > best_score:
            best_score = float(scores[order[0]])
            best_x = x[order[0]].copy()

        y_sel = y[order[:mu]]
        y_w = w @ y_sel
        m = m + sigma * y_w

        inv_sqrt_C_yw = B @ ((B.T @ y_w) / diag)
        ps = (1 - cs) * ps + math.sqrt(cs * (2 - cs) * mueff) * inv_sqrt_C_yw
        h_sigma = np.linalg.norm(ps) / math.sqrt(1 - (1 - cs) ** (2 * (gen + 1))) / chi_n < 1.4 + 2 / (n + 1)
        pc = (1 - cc) * pc + h_sigma * math.sqrt(cc * (2 - cc) * mueff) * y_w

        rank_mu = (y_sel.T * w) @ y_sel
        C = (
            (1 - c1 - cmu) * C
            + c1 * (np.outer(pc, pc) + (1 - h_sigma) * cc * (2 - cc) * C)
            + cmu * rank_mu
        )
        sigma *= math.exp((cs / damps) * (np.linalg.norm(ps) / chi_n - 1))

        C = np.triu(C) + np.triu(C, 1).T
        eigvals, B = np.linalg.eigh(C)
        diag = np.sqrt(np.maximum(eigvals, 1e-30))

        history.append(
            {
                "generation": gen,
                "best_score": best_score,
                "generation_best": float(scores[order[0]]),
                "generation_mean": float(scores.mean()),
                "sigma": float(sigma),
            }
        )
    return CmaResult(best_x=best_x, best_score=best_score, history=history)


def decode_vector(
    vector,
    config: EnvConfig,
    share_bounds: tuple[float, float] = (0.15, 0.80),
    effort_bounds: tuple[float, float] = (0.05, 1.00),
) -> tuple[np.ndarray, np.ndarray]:
    """Per-year ``(shares, efforts)`` arrays of shape (H, k) from an interleaved vector."""
    v = np.asarray(vector, dtype=float)
    H, k = config.horizon, config.k
    if v.shape != (2 * H,):
        raise ValueError(f"expected a vector of length {2 * H}, got shape {v.shape}")
    s = np.clip(v[0::2], *share_bounds)
    e = np.clip(v[1::2], *effort_bounds)
    dom = config.role.dominant_index
    shares = np.repeat(((1.0 - s) / (k - 1))[:, None], k, axis=1)
    shares[:, dom] = s
    efforts = np.full((H, k), NONDOMINANT_EFFORT)
    efforts[:, dom] = e
    return shares, efforts


def schedule_rollout(config: EnvConfig, shares: np.ndarray, efforts: np.ndarray) -> dict:
    """Deterministic rollout of an open-loop schedule with every exit enforced."""
    return rollout(config.with_updates(no_exit=False), lambda state: (shares[state.t], efforts[state.t]))


def relaxation_objective(config: EnvConfig, vector) -> dict:
    shares, efforts = decode_vector(vector, config)
    result = schedule_rollout(config, shares, efforts)
    return {
        "return": result["return"],
        "M_final": result["M_final"],
        "D_final": result["D_final"],
        "completed": result["completed"],
        "exit_age": result["exit_age"],
    }


def optimize_schedule(config: EnvConfig, cma: CmaConfig | None = None) -> tuple[CmaResult, ShareSchedule, dict]:
    """Run CMA-ES on the schedule relaxation; returns the result, best schedule and its rollout metrics."""
    cma = cma or CmaConfig.for_schedule(config.horizon)
    if cma.dim != 2 * config.horizon:
        raise ValueError(f"CMA dimension {cma.dim} does not match 2 * horizon = {2 * config.horizon}")
    result = cma_optimize(lambda x: relaxation_objective(config, x)["return"], cma)
    shares, efforts = decode_vector(result.best_x, config)
    schedule = ShareSchedule(
        shares=shares,
        dominant_index=config.role.dominant_index,
        dominant_efforts=efforts[:, config.role.dominant_index],
        start_age=config.start_age,
    )
    return result, schedule, relaxation_objective(config, result.best_x)
