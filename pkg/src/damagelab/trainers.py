"""PPO / Dyna training loops, evaluation and the per-seed run driver.

Dyna with a ground-truth model reduces to extra simulator rollouts with the
exits disabled (``no_exit``), interleaved with ordinary rollouts whose exits
are enforced. Evaluation always enforces every exit and never adds the soft
role penalty.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from .env import CareerEnv, EnvConfig, Termination
from .policy import (
    PolicyConfig,
    PolicyNet,
    _dirichlet_sample,
    greedy_action,
    init_policy,
    logprob_entropy,
)

log = logging.getLogger(__name__)

CONDITION_KINDS = ("ppo_real", "ppo_fixed_share", "dyna_unrestricted", "dyna_fixed_share")


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 1.0
    rbar_rate: float = 0.01
    clip: float = 0.2
    c_ent: float = 0.05
    c_v: float = 0.5
    lr: float = 3e-4
    minibatch: int = 64
    epochs: int = 4
    rollout: int = 2048
    total_steps: int = 1_000_000
    eval_episodes: int = 100

    def __post_init__(self):
        if self.gamma != 1.0:
            raise ValueError("only undiscounted returns (gamma = 1) are supported")
        for name in ("rbar_rate", "clip", "c_ent", "c_v", "lr", "minibatch", "epochs", "rollout", "total_steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class Condition:
    """One training condition.

    ``no_exit`` applies to the planning rollouts of the Dyna kinds and to the
    whole stream of the PPO kinds. ``penalty_weight`` defaults to 1.0 for
    unrestricted Dyna and 0 otherwise.
    """

    kind: str = "ppo_real"
    no_exit: bool | None = None
    penalty_weight: float | None = None
    zero_proxy: bool = False
    init_bias: float = 0.0
    planning_ratio: float = 1.0
    train_horizon: int | None = None

    def __post_init__(self):
        if self.kind not in CONDITION_KINDS:
            raise ValueError(f"unknown condition {self.kind!r}; expected one of {CONDITION_KINDS}")

    @property
    def fixed_share(self) -> bool:
        return self.kind.endswith("fixed_share")

    @property
    def dyna(self) -> bool:
        return self.kind.startswith("dyna")

    @property
    def planning_no_exit(self) -> bool:
        return True if self.no_exit is None else self.no_exit

    @property
    def weight(self) -> float:
        if self.penalty_weight is not None:
            return self.penalty_weight
        return 1.0 if self.kind == "dyna_unrestricted" else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["penalty_weight"] = self.weight
        d["no_exit"] = self.planning_no_exit if self.dyna else bool(self.no_exit)
        return d


@dataclass
class TrajectoryBatch:
    obs: np.ndarray
    t: np.ndarray
    shares: np.ndarray
    raw_efforts: np.ndarray
    reward: np.ndarray
    penalty: np.ndarray
    done: np.ndarray
    cut: np.ndarray  # done, or the last step of a collection segment
    bootstrap: np.ndarray  # value of the next observation at cut-but-not-done steps
    logp: np.ndarray
    value: np.ndarray
    episode_lengths: list[int] = field(default_factory=list)
    terminations: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.reward)

    @classmethod
    def concat(cls, parts: Sequence["TrajectoryBatch"]) -> "TrajectoryBatch":
        arrays = {
            name: np.concatenate([getattr(p, name) for p in parts])
            for name in ("obs", "t", "shares", "raw_efforts", "reward", "penalty",
                         "done", "cut", "bootstrap", "logp", "value")
        }
        return cls(
            **arrays,
            episode_lengths=[n for p in parts for n in p.episode_lengths],
            terminations=[x for p in parts for x in p.terminations],
        )


class RolloutWorker:
    """Owns one environment and carries episodes across collection calls."""

    def __init__(self, config: EnvConfig, fixed_share=None):
        self.env = CareerEnv(config)
        self.fixed_share = fixed_share
        self.obs = self.env.reset()
        self.ep_len = 0

    def collect(self, policy: PolicyNet, n_steps: int, rng: np.random.Generator) -> TrajectoryBatch:
        k = policy.config.k
        obs_buf = np.zeros((n_steps, policy.config.obs_dim))
        t_buf = np.zeros(n_steps, dtype=np.int64)
        shares_buf = np.zeros((n_steps, k))
        raw_buf = np.zeros((n_steps, k))
        reward = np.zeros(n_steps)
        penalty = np.zeros(n_steps)
        done = np.zeros(n_steps, dtype=bool)
        lengths, terms = [], []
        std = np.exp(policy.effort_log_std.detach().double().numpy())
        with torch.no_grad():
            for i in range(n_steps):
                t = self.env.state.t
                obs_t = torch.as_tensor(self.obs, dtype=torch.float32)
                feats = policy.features(obs_t)
                if self.fixed_share is None:
                    shares = _dirichlet_sample(rng, policy.concentration(feats).double().numpy())
                else:
                    shares = np.asarray(self.fixed_share.at(t), dtype=float)
                mean = policy.effort_mean(feats, torch.as_tensor(shares, dtype=torch.float32)).double().numpy()
                raw = mean + std * rng.standard_normal(k)
                outcome = self.env.step(shares, np.clip(raw, 0.0, 1.0))

                obs_buf[i] = self.obs
                t_buf[i] = t
                shares_buf[i] = shares
                raw_buf[i] = raw
                reward[i] = outcome.reward
                penalty[i] = outcome.penalty
                self.ep_len += 1
                if outcome.termination is not Termination.NONE:
                    done[i] = True
                    lengths.append(self.ep_len)
                    terms.append(outcome.termination.value)
                    self.obs = self.env.reset()
                    self.ep_len = 0
                else:
                    self.obs = outcome.observation
            obs_all = torch.as_tensor(obs_buf, dtype=torch.float32)
            logp, _ = logprob_entropy(policy, obs_all, shares_buf, raw_buf, self.fixed_share is not None)
            value = policy.value(policy.features(obs_all)).double().numpy()
            next_value = float(policy.value(policy.features(torch.as_tensor(self.obs, dtype=torch.float32))))
        cut = done.copy()
        cut[-1] = True
        bootstrap = np.zeros(n_steps)
        if not done[-1]:
            bootstrap[-1] = next_value
        return TrajectoryBatch(
            obs=obs_buf, t=t_buf, shares=shares_buf, raw_efforts=raw_buf,
            reward=reward, penalty=penalty, done=done, cut=cut, bootstrap=bootstrap,
            logp=logp.double().numpy(), value=value,
            episode_lengths=lengths, terminations=terms,
        )


def collect_rollouts(
    config: EnvConfig,
    policy: PolicyNet,
    n_steps: int,
    condition: Condition,
    rng: np.random.Generator,
    schedule=None,
) -> TrajectoryBatch:
    """One-shot collection from fresh environments. Training keeps its workers
    alive between calls so episodes carry over rollout boundaries."""
    workers = _make_workers(config, condition, schedule)
    return _collect(workers, policy, n_steps, condition, rng)


def _make_workers(config: EnvConfig, condition: Condition, schedule) -> list[RolloutWorker]:
    if condition.fixed_share and schedule is None:
        raise ValueError("fixed-share conditions require a share schedule")
    base = config.with_updates(zero_proxy=condition.zero_proxy, penalty_weight=condition.weight)
    fixed = schedule if condition.fixed_share else None
    if condition.dyna:
        real = RolloutWorker(base.with_updates(no_exit=False), fixed)
        planning = RolloutWorker(base.with_updates(no_exit=condition.planning_no_exit), fixed)
        return [real, planning]
    return [RolloutWorker(base.with_updates(no_exit=bool(condition.no_exit)), fixed)]


def _collect(workers, policy, n_steps, condition, rng) -> TrajectoryBatch:
    if len(workers) == 1:
        return workers[0].collect(policy, n_steps, rng)
    n_real = max(1, int(round(n_steps / (1.0 + condition.planning_ratio))))
    real = workers[0].collect(policy, n_real, rng)
    planning = workers[1].collect(policy, n_steps - n_real, rng)
    return TrajectoryBatch.concat([real, planning])


def compute_advantages(batch: TrajectoryBatch, rbar: float, rate: float = 0.01) -> tuple[np.ndarray, np.ndarray, float]:
    """Average-reward adjusted returns-to-go and normalised advantages.

    Each training reward (reward + penalty) is reduced by the running average
    ``rbar`` before it is folded into the average, in collection order.
    Returns ``(advantages, returns, rbar)``.
    """
    train_r = batch.reward + batch.penalty
    adjusted = np.empty_like(train_r)
    for i, r in enumerate(train_r):
        adjusted[i] = r - rbar
        rbar = (1.0 - rate) * rbar + rate * r
    returns = np.empty_like(adjusted)
    running = 0.0
    for i in range(len(adjusted) - 1, -1, -1):
        if batch.done[i]:
            running = 0.0
        elif batch.cut[i]:
            running = batch.bootstrap[i]
        running = adjusted[i] + running
        returns[i] = running
    adv = returns - batch.value
    std = adv.std()
    adv = (adv - adv.mean()) / (std + 1e-8)
    return adv, returns, rbar


def ppo_loss(
    policy: PolicyNet,
    obs: torch.Tensor,
    shares: torch.Tensor,
    raw: torch.Tensor,
    logp_old: torch.Tensor,
    adv: torch.Tensor,
    returns: torch.Tensor,
    cfg: PpoConfig,
    fixed_share: bool,
) -> tuple[torch.Tensor, dict]:
    logp, entropy = logprob_entropy(policy, obs, shares, raw, fixed_share)
    ratio = torch.exp(logp - logp_old)
    surr = torch.min(ratio * adv, torch.clamp(ratio, 1 - cfg.clip, 1 + cfg.clip) * adv)
    value = policy.value(policy.features(obs))
    v_loss = ((value - returns) ** 2).mean()
    loss = -surr.mean() + cfg.c_v * v_loss - cfg.c_ent * entropy.mean()
    stats = {
        "policy_loss": float(-surr.mean().detach()),
        "value_loss": float(v_loss.detach()),
        "entropy": float(entropy.mean().detach()),
        "clip_frac": float(((ratio - 1).abs() > cfg.clip).float().mean()),
    }
    return loss, stats


def make_optimizer(policy: PolicyNet, cfg: PpoConfig, fixed_share: bool) -> torch.optim.Adam:
    frozen = {id(p) for p in policy.share_head_parameters()} if fixed_share else set()
    params = [p for p in policy.parameters() if id(p) not in frozen]
    return torch.optim.Adam(params, lr=cfg.lr)


def ppo_update(
    policy: PolicyNet,
    optimizer: torch.optim.Optimizer,
    batch: TrajectoryBatch,
    adv: np.ndarray,
    returns: np.ndarray,
    cfg: PpoConfig,
    rng: np.random.Generator,
    fixed_share: bool = False,
) -> dict:
    obs = torch.as_tensor(batch.obs, dtype=torch.float32)
    shares = torch.as_tensor(batch.shares, dtype=torch.float32)
    raw = torch.as_tensor(batch.raw_efforts, dtype=torch.float32)
    logp_old = torch.as_tensor(batch.logp, dtype=torch.float32)
    adv_t = torch.as_tensor(adv, dtype=torch.float32)
    ret_t = torch.as_tensor(returns, dtype=torch.float32)
    n = len(batch)
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            idx = torch.as_tensor(order[start : start + cfg.minibatch])
            loss, stats = ppo_loss(
                policy, obs[idx], shares[idx], raw[idx], logp_old[idx], adv_t[idx], ret_t[idx], cfg, fixed_share
            )
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite PPO loss; last stats {stats}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            history.append(stats)
    return {key: float(np.mean([h[key] for h in history])) for key in history[0]}


# ---------------------------------------------------------------------------
# evaluation


def evaluate_policy(
    policy: PolicyNet,
    config: EnvConfig,
    n_episodes: int,
    rng: np.random.Generator,
    schedule=None,
) -> list[dict]:
    """Stochastic rollouts with every exit enforced and no penalty."""
    eval_config = config.with_updates(no_exit=False, penalty_weight=0.0)
    dom = config.role.dominant_index
    episodes = []
    std = np.exp(policy.effort_log_std.detach().double().numpy())
    with torch.no_grad():
        for _ in range(n_episodes):
            env = CareerEnv(eval_config)
            obs = env.reset()
            total = 0.0
            efforts = []
            outcome = None
            while not env.state.done:
                t = env.state.t
                feats = policy.features(torch.as_tensor(obs, dtype=torch.float32))
                if schedule is None:
                    shares = _dirichlet_sample(rng, policy.concentration(feats).double().numpy())
                else:
                    shares = np.asarray(schedule.at(t), dtype=float)
                mean = policy.effort_mean(feats, torch.as_tensor(shares, dtype=torch.float32)).double().numpy()
                eff = np.clip(mean + std * rng.standard_normal(len(mean)), 0.0, 1.0)
                outcome = env.step(shares, eff)
                total += outcome.reward
                efforts.append(float(eff[dom]))
                obs = outcome.observation
            state = env.state
            episodes.append(
                {
                    "length": state.t,
                    "exit_age": state.age,
                    "completed": state.t >= config.horizon,
                    "termination": outcome.termination.value,
                    "return": total,
                    "M_final": state.M,
                    "D_final": state.D,
                    "dominant_efforts": efforts,
                }
            )
    return episodes


def greedy_profile(policy: PolicyNet, config: EnvConfig, schedule=None) -> dict:
    """Deterministic mean-action rollout: per-age dominant effort, exits enforced."""
    env = CareerEnv(config.with_updates(no_exit=False, penalty_weight=0.0))
    obs = env.reset()
    dom = config.role.dominant_index
    ages, efforts = [], []
    while not env.state.done:
        t = env.state.t
        ages.append(env.state.age)
        action = greedy_action(policy, obs, t, schedule)
        efforts.append(float(action.efforts[dom]))
        obs = env.step(action.shares, action.efforts).observation
    return {
        "ages": ages,
        "dominant_efforts": efforts,
        "completed": env.state.t >= config.horizon,
        "M_final": env.state.M,
        "D_final": env.state.D,
    }


# ---------------------------------------------------------------------------
# run driver


@dataclass
class TrainResult:
    policy: PolicyNet
    episodes: list[dict]
    profile: dict
    history: list[dict]
    steps: int


def train(
    config: EnvConfig,
    condition: Condition,
    seed: int,
    ppo: PpoConfig | None = None,
    schedule=None,
    eval_config: EnvConfig | None = None,
    log_every: int = 0,
) -> TrainResult:
    """Train one seed and evaluate it on ``eval_config`` (default: ``config``).

    ``config`` is the full-horizon environment; a shorter training horizon
    comes from ``condition.train_horizon``.
    """
    ppo = ppo or PpoConfig()
    eval_config = eval_config or config
    train_config = config
    if condition.train_horizon is not None:
        train_config = config.with_updates(horizon=condition.train_horizon)

    torch.set_num_threads(1)
    rng = np.random.default_rng(seed)
    policy = init_policy(PolicyConfig(k=config.k, effort_head_bias=condition.init_bias), seed)
    optimizer = make_optimizer(policy, ppo, condition.fixed_share)
    workers = _make_workers(train_config, condition, schedule)

    rbar = 0.0
    steps = 0
    history = []
    while steps < ppo.total_steps:
        n = min(ppo.rollout, ppo.total_steps - steps)
        batch = _collect(workers, policy, n, condition, rng)
        adv, returns, rbar = compute_advantages(batch, rbar, ppo.rbar_rate)
        stats = ppo_update(policy, optimizer, batch, adv, returns, ppo, rng, condition.fixed_share)
        steps += len(batch)
        stats.update(
            steps=steps,
            rbar=rbar,
            mean_episode_length=float(np.mean(batch.episode_lengths)) if batch.episode_lengths else float("nan"),
        )
        history.append(stats)
        if log_every and len(history) % log_every == 0:
            log.info("step %d  rbar %.4f  ep_len %.1f  entropy %.3f", steps, rbar,
                     stats["mean_episode_length"], stats["entropy"])

    eval_rng = np.random.default_rng([seed, 1])
    episodes = evaluate_policy(policy, eval_config, ppo.eval_episodes, eval_rng, schedule if condition.fixed_share else None)
    profile = greedy_profile(policy, eval_config, schedule if condition.fixed_share else None)
    return TrainResult(policy=policy, episodes=episodes, profile=profile, history=history, steps=steps)
