import numpy as np
import pytest
import torch
from scipy.stats import norm

from damagelab.dp import ShareSchedule
from damagelab.policy import PolicyConfig, init_policy, logprob_entropy
from damagelab.presets import bricklayer_config
from damagelab.trainers import (
    Condition,
    PpoConfig,
    TrajectoryBatch,
    collect_rollouts,
    compute_advantages,
    evaluate_policy,
    make_optimizer,
    ppo_loss,
    ppo_update,
    train,
)

BRICK = bricklayer_config()


def batch_of(rewards, done, cut=None, bootstrap=None, value=None, penalty=None):
    n = len(rewards)
    done = np.asarray(done, dtype=bool)
    cut = done.copy() if cut is None else np.asarray(cut, dtype=bool)
    return TrajectoryBatch(
        obs=np.zeros((n, 2)),
        t=np.zeros(n, dtype=int),
        shares=np.full((n, 7), 1 / 7),
        raw_efforts=np.full((n, 7), 0.5),
        reward=np.asarray(rewards, dtype=float),
        penalty=np.zeros(n) if penalty is None else np.asarray(penalty, dtype=float),
        done=done,
        cut=cut,
        bootstrap=np.zeros(n) if bootstrap is None else np.asarray(bootstrap, dtype=float),
        logp=np.zeros(n),
        value=np.zeros(n) if value is None else np.asarray(value, dtype=float),
    )


def flat_schedule(dom=0.8, H=49, k=7):
    shares = np.tile(np.r_[dom, np.full(k - 1, (1 - dom) / (k - 1))], (H, 1))
    return ShareSchedule(shares, 0, np.full(H, 0.5), 16.0)


# --- configuration ----------------------------------------------------------


def test_ppo_defaults():
    c = PpoConfig()
    assert (c.gamma, c.rbar_rate, c.clip, c.c_ent, c.c_v, c.lr) == (1.0, 0.01, 0.2, 0.05, 0.5, 3e-4)
    assert (c.minibatch, c.epochs, c.rollout, c.total_steps, c.eval_episodes) == (64, 4, 2048, 1_000_000, 100)


def test_discount_must_be_one():
    with pytest.raises(ValueError):
        PpoConfig(gamma=0.99)
    with pytest.raises(ValueError):
        PpoConfig(clip=0.0)


def test_condition_defaults():
    assert Condition("dyna_unrestricted").weight == 1.0
    assert Condition("ppo_real").weight == 0.0
    assert Condition("dyna_fixed_share").fixed_share
    with pytest.raises(ValueError):
        Condition("sac")


# --- advantages -------------------------------------------------------------


def test_rbar_first_step():
    _, _, rbar = compute_advantages(batch_of([1.0], [True]), 0.0, 0.01)
    assert rbar == pytest.approx(0.01)


def test_converged_rbar_zeroes_adjusted_rewards():
    n = 50
    _, returns, rbar = compute_advantages(batch_of([0.7] * n, [False] * (n - 1) + [True]), 0.7, 0.01)
    assert rbar == pytest.approx(0.7)
    assert np.allclose(returns, 0.0)


def test_single_step_episode_return_is_adjusted_reward():
    _, returns, _ = compute_advantages(batch_of([0.4, 0.9], [True, True]), 0.5, 0.01)
    assert returns[0] == pytest.approx(0.4 - 0.5)
    assert returns[1] == pytest.approx(0.9 - (0.99 * 0.5 + 0.01 * 0.4))


def test_returns_do_not_cross_episode_end_and_bootstrap_at_cut():
    b = batch_of([1.0, 1.0, 1.0, 1.0], [False, True, False, False], cut=[False, True, False, True],
                 bootstrap=[0, 0, 0, 10.0])
    _, returns, _ = compute_advantages(b, 0.0, 1e-12)
    assert returns.tolist() == pytest.approx([2.0, 1.0, 12.0, 11.0])


def test_penalty_enters_training_reward():
    _, returns, _ = compute_advantages(batch_of([1.0], [True], penalty=[-1.0]), 0.0, 0.01)
    assert returns[0] == pytest.approx(0.0)


def test_advantages_normalised():
    rng = np.random.default_rng(0)
    b = batch_of(rng.random(100), rng.random(100) < 0.1, value=rng.random(100))
    adv, _, _ = compute_advantages(b, 0.3, 0.01)
    assert adv.mean() == pytest.approx(0.0, abs=1e-9)
    assert adv.std() == pytest.approx(1.0, abs=1e-6)


def test_rbar_is_order_deterministic():
    b = batch_of([0.1, 0.5, 0.9, 0.3], [False, True, False, True])
    a1 = compute_advantages(b, 0.2, 0.01)
    a2 = compute_advantages(b, 0.2, 0.01)
    assert np.array_equal(a1[0], a2[0]) and a1[2] == a2[2]


# --- collection -------------------------------------------------------------


def test_batch_size_matches_request():
    net = init_policy(PolicyConfig(), 0)
    batch = collect_rollouts(BRICK, net, 2048, Condition("ppo_real"), np.random.default_rng(0))
    assert len(batch) == 2048
    assert batch.done.sum() == len(batch.episode_lengths)


def test_early_policy_exits_before_horizon():
    net = init_policy(PolicyConfig(), 0)
    batch = collect_rollouts(BRICK, net, 2048, Condition("ppo_real"), np.random.default_rng(0))
    assert batch.episode_lengths and max(batch.episode_lengths) < BRICK.horizon
    assert set(batch.terminations) <= {"role_exit", "capacity_exit"}


def test_no_exit_episodes_have_full_length():
    net = init_policy(PolicyConfig(), 0)
    batch = collect_rollouts(BRICK, net, 49 * 6, Condition("ppo_real", no_exit=True), np.random.default_rng(0))
    assert batch.episode_lengths == [49] * 6
    assert set(batch.terminations) == {"age_limit"}


def test_penalty_applied_only_below_alpha():
    net = init_policy(PolicyConfig(), 0)
    batch = collect_rollouts(BRICK, net, 512, Condition("dyna_unrestricted"), np.random.default_rng(0))
    below = batch.shares[:, 0] < BRICK.role.alpha
    assert below.any()
    assert np.all(batch.penalty[below] == -1.0)
    assert np.all(batch.penalty[~below] == 0.0)


def test_dyna_planning_half_runs_without_exits():
    net = init_policy(PolicyConfig(), 0)
    batch = collect_rollouts(BRICK, net, 2 * 49 * 3, Condition("dyna_unrestricted"), np.random.default_rng(0))
    assert len(batch) == 2 * 49 * 3
    planning_lengths = [n for n, term in zip(batch.episode_lengths, batch.terminations) if term == "age_limit"]
    assert planning_lengths.count(49) == 3


def test_fixed_share_requires_schedule():
    net = init_policy(PolicyConfig(), 0)
    with pytest.raises(ValueError):
        collect_rollouts(BRICK, net, 64, Condition("dyna_fixed_share"), np.random.default_rng(0))


def test_fixed_share_rollouts_use_schedule():
    net = init_policy(PolicyConfig(), 0)
    sched = flat_schedule()
    batch = collect_rollouts(BRICK, net, 128, Condition("dyna_fixed_share"), np.random.default_rng(0), sched)
    assert np.allclose(batch.shares, sched.shares[0])


# --- update -----------------------------------------------------------------


def _loss_batch(net, n=64, seed=0):
    rng = np.random.default_rng(seed)
    obs = np.c_[rng.random(n), 1 + rng.random(n)]
    shares = rng.dirichlet(np.ones(7), size=n)
    raw = rng.random((n, 7))
    with torch.no_grad():
        logp, _ = logprob_entropy(net, obs, shares, raw)
    t = lambda a: torch.as_tensor(a, dtype=torch.float32)
    return t(obs), t(shares), t(raw), logp.float(), t(rng.standard_normal(n))


def _grads(net, loss):
    net.zero_grad()
    loss.backward()
    return [p.grad.clone() if p.grad is not None else torch.zeros_like(p) for p in net.parameters()]


def test_zero_advantages_give_no_surrogate_gradient():
    net = init_policy(PolicyConfig(), 0)
    obs, shares, raw, logp_old, ret = _loss_batch(net)
    cfg = PpoConfig()
    loss, _ = ppo_loss(net, obs, shares, raw, logp_old, torch.zeros(len(obs)), ret, cfg, False)
    _, ent = logprob_entropy(net, obs, shares, raw)
    value = net.value(net.features(obs))
    rest = cfg.c_v * ((value - ret) ** 2).mean() - cfg.c_ent * ent.mean()
    for a, b in zip(_grads(net, loss), _grads(net, rest)):
        assert torch.allclose(a, b, atol=1e-6)


def test_clipped_ratio_with_positive_advantage_has_no_gradient():
    net = init_policy(PolicyConfig(), 0)
    obs, shares, raw, logp_old, ret = _loss_batch(net, n=1)
    cfg = PpoConfig()
    shifted = logp_old - 1.0  # ratio = e > 1 + eps
    adv = torch.ones(1)
    with_adv = _grads(net, ppo_loss(net, obs, shares, raw, shifted, adv, ret, cfg, False)[0])
    without = _grads(net, ppo_loss(net, obs, shares, raw, shifted, torch.zeros(1), ret, cfg, False)[0])
    for a, b in zip(with_adv, without):
        assert torch.allclose(a, b, atol=1e-7)


def test_non_finite_loss_aborts():
    net = init_policy(PolicyConfig(), 0)
    cfg = PpoConfig()
    b = batch_of([1.0] * 64, [True] * 64)
    opt = make_optimizer(net, cfg, False)
    adv = np.full(64, np.nan)
    with pytest.raises(FloatingPointError):
        ppo_update(net, opt, b, adv, np.zeros(64), cfg, np.random.default_rng(0))


def test_fixed_share_update_leaves_share_head_untouched():
    net = init_policy(PolicyConfig(), 0)
    before = [p.clone() for p in net.share_head.parameters()]
    cfg = PpoConfig()
    sched = flat_schedule()
    batch = collect_rollouts(BRICK, net, 256, Condition("dyna_fixed_share"), np.random.default_rng(0), sched)
    adv, ret, _ = compute_advantages(batch, 0.0)
    opt = make_optimizer(net, cfg, True)
    ppo_update(net, opt, batch, adv, ret, cfg, np.random.default_rng(0), fixed_share=True)
    for a, b in zip(before, net.share_head.parameters()):
        assert torch.equal(a, b)
    assert not torch.equal(net.effort_log_std, torch.full((7,), -0.5))


def test_two_armed_bandit_moves_mass_to_better_arm():
    cfg = PpoConfig(rollout=64, minibatch=64)
    net = init_policy(PolicyConfig(k=2, log_std_init=-1.0), 0)
    opt = make_optimizer(net, cfg, True)
    rng = np.random.default_rng(0)
    obs = np.tile([0.0, 1.0], (64, 1))
    shares = np.tile([0.5, 0.5], (64, 1))
    rbar = 0.0
    for _ in range(200):
        with torch.no_grad():
            feats = net.features(torch.as_tensor(obs, dtype=torch.float32))
            mean = net.effort_mean(feats, torch.as_tensor(shares, dtype=torch.float32)).double().numpy()
            std = np.exp(net.effort_log_std.double().numpy())
            raw = mean + std * rng.standard_normal(mean.shape)
            logp, _ = logprob_entropy(net, obs, shares, raw, True)
            value = net.value(feats).double().numpy()
        reward = np.where(raw[:, 0] > 0.5, 1.0, 0.2)  # arm "high" pays more
        b = batch_of(reward, [True] * 64)
        b.obs, b.shares, b.raw_efforts, b.logp, b.value = obs, shares, raw, logp.double().numpy(), value
        adv, ret, rbar = compute_advantages(b, rbar, cfg.rbar_rate)
        ppo_update(net, opt, b, adv, ret, cfg, rng, True)
    p_high = 1 - norm.cdf(0.5, mean[0, 0], std[0])
    assert p_high > 0.9


# --- runs -------------------------------------------------------------------


def test_evaluation_ignores_penalty():
    net = init_policy(PolicyConfig(), 0)
    plain = evaluate_policy(net, BRICK, 5, np.random.default_rng(0))
    penalised = evaluate_policy(net, BRICK.with_updates(penalty_weight=2.0, no_exit=True), 5, np.random.default_rng(0))
    assert [e["return"] for e in plain] == [e["return"] for e in penalised]
    assert [e["termination"] for e in plain] == [e["termination"] for e in penalised]


def test_training_is_reproducible():
    cfg = PpoConfig(total_steps=1024, rollout=512, eval_episodes=3)
    a = train(BRICK, Condition("ppo_real"), 7, cfg)
    b = train(BRICK, Condition("ppo_real"), 7, cfg)
    for pa, pb in zip(a.policy.parameters(), b.policy.parameters()):
        assert torch.equal(pa, pb)
    assert a.episodes == b.episodes


def test_short_horizon_training_evaluates_on_full_career():
    cfg = PpoConfig(total_steps=1024, rollout=512, eval_episodes=5)
    sched = flat_schedule()
    res = train(BRICK, Condition("dyna_fixed_share", train_horizon=5), 0, cfg, schedule=sched)
    assert all(e["exit_age"] > 21 for e in res.episodes)
    assert max(e["length"] for e in res.episodes) > 5
    assert res.profile["ages"][-1] == 64.0 or not res.profile["completed"]


def test_fixed_share_evaluation_never_role_exits():
    cfg = PpoConfig(total_steps=1024, rollout=512, eval_episodes=20)
    res = train(BRICK, Condition("dyna_fixed_share"), 1, cfg, schedule=flat_schedule())
    assert all(e["termination"] != "role_exit" for e in res.episodes)
