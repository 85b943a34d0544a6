"""Actor-critic network: shared trunk, Dirichlet share head, Normal effort head.

Efforts are drawn from a Normal around a sigmoid mean and clamped to [0, 1]
before reaching the environment. Log-probabilities use the pre-clamp sample.
In fixed-share mode the shares come from a schedule and contribute neither
log-probability nor entropy, so the share head receives no gradient.
"""

from __future__ import annotations

import io
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn
from torch.distributions import Dirichlet, Normal
from torch.nn import functional as F

CONCENTRATION_FLOOR = 1e-3
SHARE_FLOOR = 1e-8
INTERVENTION_EFFORT_BIAS = -1.386  # sigmoid(-1.386) ~= 0.20


@dataclass(frozen=True)
class PolicyConfig:
    obs_dim: int = 2
    k: int = 7
    hidden: int = 128
    log_std_init: float = -0.5
    effort_head_bias: float = 0.0


@dataclass
class PolicyOutput:
    concentration: torch.Tensor
    effort_mean: torch.Tensor
    effort_log_std: torch.Tensor
    value: torch.Tensor
    features: torch.Tensor


@dataclass
class SampledAction:
    shares: np.ndarray
    efforts: np.ndarray  # clamped, sent to the environment
    raw_efforts: np.ndarray  # pre-clamp Normal sample, used for log-prob


class PolicyNet(nn.Module):
    def __init__(self, config: PolicyConfig):
        super().__init__()
        self.config = config
        h, k = config.hidden, config.k
        self.trunk = nn.Sequential(
            nn.Linear(config.obs_dim, h),
            nn.ReLU(),
            nn.Linear(h, h),
            nn.ReLU(),
        )
        self.share_head = nn.Linear(h, k)
        self.effort_head = nn.Linear(h + k, k)
        self.value_head = nn.Linear(h, 1)
        self.effort_log_std = nn.Parameter(torch.full((k,), config.log_std_init))

    def features(self, obs: torch.Tensor) -> torch.Tensor:
        return self.trunk(obs)

    def concentration(self, feats: torch.Tensor) -> torch.Tensor:
        return F.softplus(self.share_head(feats)) + CONCENTRATION_FLOOR

    def effort_mean(self, feats: torch.Tensor, shares: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.effort_head(torch.cat([feats, shares], dim=-1)))

    def value(self, feats: torch.Tensor) -> torch.Tensor:
        return self.value_head(feats).squeeze(-1)

    def share_head_parameters(self) -> list[nn.Parameter]:
        return list(self.share_head.parameters())


def init_policy(config: PolicyConfig, seed: int) -> PolicyNet:
    """Seeded default (Kaiming-uniform) init, then the effort-bias override."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = PolicyNet(config)
    with torch.no_grad():
        net.effort_head.bias.fill_(config.effort_head_bias)
    return net


def _as_obs(policy: PolicyNet, observation) -> torch.Tensor:
    obs = torch.as_tensor(np.asarray(observation), dtype=next(policy.parameters()).dtype)
    if obs.shape[-1] != policy.config.obs_dim:
        raise ValueError(f"observation has {obs.shape[-1]} features, expected {policy.config.obs_dim}")
    if not torch.isfinite(obs).all():
        raise ValueError("non-finite observation")
    return obs


def policy_forward(policy: PolicyNet, observation, shares=None) -> PolicyOutput:
    """Evaluate all heads. Effort means are conditioned on ``shares`` when given,
    otherwise on the Dirichlet mean allocation."""
    obs = _as_obs(policy, observation)
    feats = policy.features(obs)
    conc = policy.concentration(feats)
    if shares is None:
        shares_t = conc / conc.sum(-1, keepdim=True)
    else:
        shares_t = torch.as_tensor(np.asarray(shares), dtype=feats.dtype)
    mean = policy.effort_mean(feats, shares_t)
    return PolicyOutput(conc, mean, policy.effort_log_std.expand_as(mean), policy.value(feats), feats)


def _dirichlet_sample(rng: np.random.Generator, conc: np.ndarray) -> np.ndarray:
    shares = rng.dirichlet(conc)
    if not np.all(np.isfinite(shares)):
        # numpy can fail for very small concentrations; fall back to the mean
        shares = conc / conc.sum()
    shares = np.maximum(shares, SHARE_FLOOR)
    return shares / shares.sum()


@torch.no_grad()
def sample_action(
    policy: PolicyNet,
    observation,
    t: int,
    rng: np.random.Generator,
    fixed_share=None,
) -> tuple[SampledAction, float, float]:
    """Draw one action. Returns ``(action, log_prob, value)``.

    ``fixed_share`` is a schedule with an ``at(t)`` method; when given, the
    shares are taken from it and the Dirichlet term is left out of the log-prob.
    """
    obs = _as_obs(policy, observation)
    feats = policy.features(obs)
    if fixed_share is None:
        conc = policy.concentration(feats).double().numpy()
        shares = _dirichlet_sample(rng, conc)
    else:
        shares = np.asarray(fixed_share.at(t), dtype=float)
    shares_t = torch.as_tensor(shares, dtype=feats.dtype)
    mean = policy.effort_mean(feats, shares_t).double().numpy()
    std = np.exp(policy.effort_log_std.detach().double().numpy())
    raw = mean + std * rng.standard_normal(mean.shape)
    action = SampledAction(shares=shares, efforts=np.clip(raw, 0.0, 1.0), raw_efforts=raw)
    logp, _ = logprob_entropy(policy, observation, action.shares, action.raw_efforts, fixed_share is not None)
    return action, float(logp), float(policy.value(feats))


def _check_simplex(shares: torch.Tensor) -> None:
    if (shares < 0).any() or not torch.allclose(shares.sum(-1), torch.ones((), dtype=shares.dtype), atol=1e-5):
        raise ValueError("shares outside the probability simplex")


def logprob_entropy(
    policy: PolicyNet,
    observation,
    shares,
    raw_efforts,
    fixed_share: bool = False,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Log-probability of a stored action under the current parameters, plus entropy."""
    obs = _as_obs(policy, observation)
    dtype = obs.dtype
    shares_t = torch.as_tensor(np.asarray(shares), dtype=dtype)
    raw_t = torch.as_tensor(np.asarray(raw_efforts), dtype=dtype)
    _check_simplex(shares_t)
    feats = policy.features(obs)
    mean = policy.effort_mean(feats, shares_t)
    effort_dist = Normal(mean, policy.effort_log_std.exp().expand_as(mean))
    logp = effort_dist.log_prob(raw_t).sum(-1)
    entropy = effort_dist.entropy().sum(-1)
    if not fixed_share:
        share_dist = Dirichlet(policy.concentration(feats))
        logp = logp + share_dist.log_prob(shares_t)
        entropy = entropy + share_dist.entropy()
    return logp, entropy


def greedy_action(policy: PolicyNet, observation, t: int, fixed_share=None) -> SampledAction:
    """Mean action: Dirichlet mean (or schedule) shares and clamped effort means."""
    with torch.no_grad():
        out = policy_forward(policy, observation, None if fixed_share is None else fixed_share.at(t))
        if fixed_share is None:
            shares = out.concentration.double().numpy()
            shares = shares / shares.sum()
        else:
            shares = np.asarray(fixed_share.at(t), dtype=float)
        mean = out.effort_mean.double().numpy()
    return SampledAction(shares=shares, efforts=np.clip(mean, 0.0, 1.0), raw_efforts=mean)


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    n_checks: int = 100,
    eps: float = 1e-6,
    seed: int = 0,
    analytic: Callable[[], Sequence[torch.Tensor]] | None = None,
) -> float:
    """Max relative error between an analytic gradient and central differences.

    Checks ``n_checks`` randomly chosen scalar entries across ``params``.
    ``analytic`` defaults to autograd of ``loss_fn``; pass a custom one to
    test a hand-written gradient. Run in float64.
    """
    params = list(params)
    if analytic is None:
        for p in params:
            p.grad = None
        loss_fn().backward()
        grads = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    else:
        grads = [g.detach().clone() for g in analytic()]
    sizes = np.array([p.numel() for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_checks, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    with torch.no_grad():
        for flat in picks:
            which = int(np.searchsorted(offsets, flat, side="right") - 1)
            idx = int(flat - offsets[which])
            p = params[which].view(-1)
            orig = p[idx].item()
            p[idx] = orig + eps
            up = float(loss_fn())
            p[idx] = orig - eps
            down = float(loss_fn())
            p[idx] = orig
            numeric = (up - down) / (2 * eps)
            a = float(grads[which].view(-1)[idx])
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst


def effort_bias_for(mean_effort: float) -> float:
    """Logit of a target initial effort mean, e.g. 0.20 -> -1.386."""
    return math.log(mean_effort / (1.0 - mean_effort))


def checkpoint_bytes(policy: PolicyNet, **meta) -> bytes:
    buf = io.BytesIO()
    torch.save({"state_dict": policy.state_dict(), "config": asdict(policy.config), "meta": meta}, buf)
    return buf.getvalue()


def save_checkpoint(policy: PolicyNet, path, **meta) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(policy, **meta))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[PolicyNet, dict]:
    blob = torch.load(path, weights_only=False)
    net = PolicyNet(PolicyConfig(**blob["config"]))
    net.load_state_dict(blob["state_dict"])
    return net, blob["meta"]
