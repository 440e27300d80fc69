from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trafficpref.ppo import (
    MLP,
    N_ACTIONS,
    OBS_DIM,
    Adam,
    Batch,
    PPOConfig,
    PPOLearner,
    ReplayBuffer,
    entropy,
    gae,
    load_checkpoint,
    normalize_advantages,
    policy_features,
    policy_forward,
    ppo_update,
    save_checkpoint,
    surrogate_loss_and_grad,
    train_policy,
    write_curve,
)
from trafficpref.shaping import variant_config
from trafficpref.sim import SimConfig

from helpers import random_observation


def brute_force_gae(r, v, bootstrap, gamma, lam, dones):
    n = len(r)
    nxt = list(v[1:]) + [bootstrap]
    delta = [r[t] + gamma * nxt[t] * (0.0 if dones[t] else 1.0) - v[t] for t in range(n)]
    adv = []
    for t in range(n):
        s, disc = 0.0, 1.0
        for l in range(t, n):
            s += disc * delta[l]
            if dones[l]:
                break
            disc *= gamma * lam
        adv.append(s)
    return np.array(adv)


def tiny_cfg(**kw) -> PPOConfig:
    base = dict(iterations=2, episodes=1, horizon=120.0, sample=64, batch=32, minibatches=2,
                eval_seeds=(9001,))
    base.update(kw)
    return PPOConfig(**base)


# -- policy ---------------------------------------------------------------------------

def test_zero_weights_give_uniform_policy():
    rng = np.random.default_rng(0)
    pol = MLP.init(OBS_DIM, 20, N_ACTIONS, rng)
    pol.W2[:] = 0.0
    p = policy_forward(pol, rng.normal(size=OBS_DIM))
    assert np.allclose(p, 0.25)


def test_logit_example_matches_softmax_arithmetic():
    pol = MLP(np.zeros((1, 3)), np.zeros(1), np.zeros((4, 1)), np.array([1.0, 0, 0, 0]))
    p = policy_forward(pol, np.zeros(3))
    assert p[0] == pytest.approx(math.e / (math.e + 3), abs=1e-12)
    assert p[0] == pytest.approx(0.4754, abs=1e-4)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_probabilities_form_a_distribution(seed):
    rng = np.random.default_rng(seed)
    pol = MLP.init(OBS_DIM, 20, N_ACTIONS, rng, out_scale=rng.uniform(0.01, 20))
    p = policy_forward(pol, rng.normal(size=(7, OBS_DIM)) * 5)
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(np.isfinite(entropy(p)))


def test_dimension_mismatch_is_rejected():
    pol = MLP.init(OBS_DIM, 20, N_ACTIONS, np.random.default_rng(0))
    with pytest.raises(ValueError):
        policy_forward(pol, np.zeros(OBS_DIM + 1))


def test_policy_features_layout():
    obs = random_observation(np.random.default_rng(3), 0, 10.0)
    x = policy_features(obs)
    assert x.shape == (OBS_DIM,)
    assert x[8:12].sum() == 1.0 and x[8 + int(obs.phase.phase)] == 1.0
    assert x[12] == pytest.approx(obs.phase.elapsed / 30.0)


# -- advantages -------------------------------------------------------------------

def test_gae_single_terminal_step():
    adv, ret = gae([1.0], [0.0], 0.0, 0.99, 0.95, [True])
    assert adv[0] == pytest.approx(1.0)
    assert ret[0] == pytest.approx(1.0)


def test_gae_hand_recursion_example():
    adv, ret = gae([1.0, 0.0], [0.5, 0.2], 0.0, 1.0, 1.0, [False, True])
    assert np.allclose(adv, [0.5, -0.2], atol=1e-12)
    assert np.allclose(ret, [1.0, 0.0], atol=1e-12)


def test_gae_lambda_zero_is_one_step_td():
    rng = np.random.default_rng(1)
    r, v = rng.normal(size=6), rng.normal(size=6)
    adv, _ = gae(r, v, 0.3, 0.9, 0.0)
    nxt = np.append(v[1:], 0.3)
    assert np.allclose(adv, r + 0.9 * nxt - v, atol=1e-12)


def test_gae_rejects_length_mismatch():
    with pytest.raises(ValueError):
        gae([1.0, 2.0], [0.0], 0.0, 0.99, 0.95)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_gae_matches_brute_force_double_sum(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 11))
    r, v = rng.normal(size=n), rng.normal(size=n)
    dones = rng.random(n) < 0.2
    boot, gamma, lam = rng.normal(), rng.uniform(0.5, 1.0), rng.uniform(0, 1)
    adv, ret = gae(r, v, boot, gamma, lam, dones)
    assert np.max(np.abs(adv - brute_force_gae(r, v, boot, gamma, lam, dones))) < 1e-10
    assert np.allclose(ret, adv + v)


# -- update ---------------------------------------------------------------------------

def test_clipped_surrogate_uses_the_clipped_ratio():
    # one row, one hidden unit; pick a bias so that the ratio is 1.5
    pol = MLP(np.zeros((1, 1)), np.zeros(1), np.zeros((4, 1)), np.zeros(4))
    old_logp = np.array([math.log(0.25) - math.log(1.5)])
    loss, grad, stats = surrogate_loss_and_grad(pol, np.zeros((1, 1)), np.array([0]), old_logp,
                                                np.array([2.0]), 0.2, 0.0)
    assert loss == pytest.approx(-1.2 * 2.0)
    assert np.allclose(grad, 0.0)
    assert stats["clip_frac"] == 1.0


def fd_gradient(fn, theta, h=1e-6):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (fn(theta + e) - fn(theta - e)) / (2 * h)
    return g


@pytest.mark.parametrize("entropy_coef", [0.0, 1e-3])
def test_surrogate_gradient_matches_finite_differences_at_ratio_one(entropy_coef):
    rng = np.random.default_rng(5)
    pol = MLP.init(OBS_DIM, 20, N_ACTIONS, rng, out_scale=1.0)
    X = rng.normal(size=(3, OBS_DIM))
    actions = np.array([0, 2, 3])
    probs = policy_forward(pol, X)
    old_logp = np.log(probs[np.arange(3), actions])
    adv = np.array([1.0, -0.5, 2.0])
    _, grad, _ = surrogate_loss_and_grad(pol, X, actions, old_logp, adv, 0.2, entropy_coef)

    def loss_at(theta):
        p = pol.copy()
        p.set_flat(theta)
        return surrogate_loss_and_grad(p, X, actions, old_logp, adv, 0.2, entropy_coef)[0]

    fd = fd_gradient(loss_at, pol.flat())
    rel = np.max(np.abs(grad - fd)) / max(np.max(np.abs(fd)), 1e-12)
    assert rel < 1e-4


def test_vanilla_policy_gradient_identity():
    # at ratio one the clipped surrogate gradient equals -mean(A * grad log pi)
    rng = np.random.default_rng(6)
    pol = MLP.init(OBS_DIM, 8, N_ACTIONS, rng, out_scale=1.0)
    X = rng.normal(size=(3, OBS_DIM))
    actions = np.array([1, 1, 0])
    adv = np.array([0.3, -1.0, 0.7])
    old_logp = np.log(policy_forward(pol, X)[np.arange(3), actions])
    _, grad, _ = surrogate_loss_and_grad(pol, X, actions, old_logp, adv, 0.2, 0.0)

    def weighted_logp(theta):
        p = pol.copy()
        p.set_flat(theta)
        lp = np.log(policy_forward(p, X)[np.arange(3), actions])
        return -np.mean(adv * lp)

    fd = fd_gradient(weighted_logp, pol.flat())
    assert np.max(np.abs(grad - fd)) / np.max(np.abs(fd)) < 1e-4


def random_batch(rng, n):
    X = rng.normal(size=(n, OBS_DIM))
    return Batch(X, rng.integers(0, N_ACTIONS, n), np.full(n, math.log(0.25)),
                 rng.normal(size=n) * 3 + 1, rng.normal(size=n))


def test_zero_learning_rate_leaves_parameters_unchanged():
    rng = np.random.default_rng(0)
    learner = PPOLearner(PPOConfig(lr=1e-3), rng)
    learner.opt_pi.lr = learner.opt_v.lr = 0.0
    before = learner.policy.flat(), learner.value.flat()
    ppo_update(learner, random_batch(rng, 3000), rng)
    assert np.array_equal(before[0], learner.policy.flat())
    assert np.array_equal(before[1], learner.value.flat())


def test_update_runs_sixteen_minibatches_and_reports_stats():
    rng = np.random.default_rng(0)
    learner = PPOLearner(PPOConfig(), rng)
    stats = ppo_update(learner, random_batch(rng, 3000), rng)
    assert learner.opt_pi.t == 16 and learner.opt_v.t == 16
    assert {"clip_frac", "approx_kl", "entropy", "policy_loss", "value_loss"} <= set(stats)


def test_non_finite_loss_aborts_update():
    rng = np.random.default_rng(0)
    learner = PPOLearner(PPOConfig(), rng)
    b = random_batch(rng, 256)
    b.returns[3] = np.nan
    before = learner.policy.flat()
    with pytest.raises(FloatingPointError):
        ppo_update(learner, b, rng)
    assert np.array_equal(before, learner.policy.flat())


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 300))
def test_advantage_normalization(seed, n):
    a = np.random.default_rng(seed).normal(size=n) * 50 + 7
    z = normalize_advantages(a)
    assert abs(z.mean()) < 1e-6
    assert abs(z.std() - 1) < 1e-6


def test_adam_first_step_moves_by_lr():
    opt = Adam(3, 0.01)
    theta = opt.step(np.zeros(3), np.array([1.0, -2.0, 0.0]))
    assert np.allclose(theta, [-0.01, 0.01, 0.0], atol=1e-8)


def test_policy_remains_valid_after_updates():
    rng = np.random.default_rng(2)
    learner = PPOLearner(PPOConfig(lr=0.05), rng)
    for _ in range(5):
        ppo_update(learner, random_batch(rng, 3000), rng)
    p = policy_forward(learner.policy, rng.normal(size=(50, OBS_DIM)) * 3)
    assert np.all(np.isfinite(p)) and np.allclose(p.sum(axis=1), 1.0, atol=1e-9)


# -- buffer ---------------------------------------------------------------------------

def test_buffer_is_fifo_and_samples_exactly():
    buf = ReplayBuffer(12000)
    rows = [{"x": np.full(OBS_DIM, i, float), "a": i % 4, "logp": 0.0, "adv": float(i), "ret": 0.0}
            for i in range(15000)]
    buf.extend(rows[:7000])
    buf.extend(rows[7000:])
    assert len(buf) == 12000
    assert buf.items[0]["adv"] == 3000.0 and buf.items[-1]["adv"] == 14999.0
    b = buf.sample(3000, np.random.default_rng(0))
    assert len(b) == 3000
    assert b.adv.min() >= 3000


def test_small_buffer_samples_with_replacement():
    buf = ReplayBuffer(10)
    buf.extend([{"x": np.zeros(OBS_DIM), "a": 0, "logp": 0.0, "adv": 0.0, "ret": 0.0}] * 5)
    assert len(buf.sample(3000, np.random.default_rng(0))) == 3000


# -- training -------------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        PPOConfig(clip=1.5)
    with pytest.raises(ValueError):
        PPOConfig(gamma_discount=0.0)
    with pytest.raises(ValueError):
        PPOConfig(lr=0.0)


def test_zero_iterations_returns_initial_policy():
    cfg = tiny_cfg(iterations=0)
    res = train_policy(SimConfig(), None, variant_config("external_only"), cfg, seed=4)
    init = PPOLearner(cfg, np.random.default_rng(np.random.SeedSequence([4, 7919]).spawn(3)[0]))
    assert np.array_equal(res.policy.flat(), init.policy.flat())
    assert res.curve == []


def test_intrinsic_variant_needs_a_scorer():
    with pytest.raises(ValueError):
        train_policy(SimConfig(), None, variant_config("full"), tiny_cfg(), seed=0)


def test_training_is_deterministic(tmp_path):
    sim = SimConfig()
    paths = []
    for i in range(2):
        res = train_policy(sim, lambda o: -o.mean_delay / 10, variant_config("full"), tiny_cfg(), seed=11)
        p = tmp_path / f"curve{i}.csv"
        write_curve(res.curve, p)
        paths.append(p)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    header = paths[0].read_text().splitlines()[0]
    assert header == "iter,att,aql,awt,ttc_p10,brakes_per_km,oscillation,mask_rate,mean_r1,mean_r2,mean_r3"


def test_external_only_has_no_intrinsic_or_penalty_stream():
    res = train_policy(SimConfig(), None, variant_config("external_only"), tiny_cfg(), seed=1)
    assert all(row["mean_r2"] == 0.0 and row["mean_r3"] == 0.0 for row in res.curve)
    assert res.eval_metrics["att"] > 0


def test_checkpoint_round_trip(tmp_path):
    res = train_policy(SimConfig(), None, variant_config("external_only"), tiny_cfg(iterations=1), seed=2)
    save_checkpoint(res, tmp_path / "ckpt.json", {"seed": 2})
    pol, val, scaler, meta = load_checkpoint(tmp_path / "ckpt.json")
    assert np.array_equal(scaler.stats.mean, res.scaler.stats.mean)
    assert np.array_equal(pol.flat(), res.policy.flat())
    assert np.array_equal(val.flat(), res.value.flat())
    assert meta == {"seed": 2}
