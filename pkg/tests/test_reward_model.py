from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import random_observation
from trafficpref.captioner import render_text, unstructured_caption
from trafficpref.judge import LabeledPair
from trafficpref.reward_model import (
    D_NUM,
    D_ONEHOT,
    MODES,
    EncoderSpec,
    EncodingError,
    FeatureMode,
    Hyper,
    PairBatch,
    RewardModelParams,
    TrainConfig,
    _ONEHOT,
    bt_probability,
    encode,
    evaluate_offline,
    fuse_scorers,
    load_params,
    loss_and_gradient,
    score,
    train_reward_model,
    write_curve,
)


def observations(n, seed=0):
    rng = np.random.default_rng(seed)
    return [random_observation(rng) for _ in range(n)]


def spec(kind="structured_fusion", mask=(), n=200):
    return EncoderSpec.fit(FeatureMode(kind, frozenset(mask)), observations(n, 99))


def linear_params(w, b=0.0, hyper=None):
    w = np.asarray(w, float)
    enc = EncoderSpec(FeatureMode("numeric_only"), np.zeros(D_NUM), np.ones(D_NUM))
    return RewardModelParams(enc, np.zeros((0, w.size)), np.zeros(0), w, b, hyper or Hyper(1.0, 0.0, 0.0))


def test_dimensions():
    assert FeatureMode("numeric_only").dim == 8
    assert FeatureMode("structured_fusion").dim == 8 + D_ONEHOT == 52
    assert FeatureMode("unstructured").dim == 8 + 256
    with pytest.raises(ValueError):
        FeatureMode("numeric_only", frozenset({"weather"}))


def test_risk_mask_zeroes_positions():
    s = spec(mask={"risk"})
    for o in observations(20, 1):
        f = encode(o, None, s)
        for i in (5, 6, 7):  # ttc_p10, ttc_p50, h_brake
            assert f[i] == 0.0
        for name in ("ttc_p10", "ttc_p50", "red", "brakes"):
            off, w = _ONEHOT[name]
            assert np.all(f[D_NUM + off:D_NUM + off + w] == 0.0)
        assert np.any(f[:5] != 0.0)


def test_congestion_mask_in_text_modes_drops_facts():
    o = observations(1, 2)[0]
    full = spec("shuffled")
    masked = spec("shuffled", {"congestion"})
    assert not np.allclose(encode(o, None, full)[D_NUM:], encode(o, None, masked)[D_NUM:])
    assert np.all(encode(o, None, masked)[:5] == 0.0)
    prose = spec("unstructured", {"risk"})
    assert np.all(encode(o, None, prose)[5:8] == 0.0)


@pytest.mark.parametrize("kind", MODES)
def test_identical_observations_identical_features(kind):
    s = spec(kind)
    o = observations(1, 3)[0]
    assert np.array_equal(encode(o, None, s), encode(o, None, s))


def test_structured_mode_rejects_prose():
    o = observations(1, 4)[0]
    with pytest.raises(EncodingError):
        encode(o, unstructured_caption(o, 0), spec())
    assert encode(o, render_text(o), spec()).shape == (52,)


# -- scorer and probability ------------------------------------------------------

def test_score_examples():
    s = spec()
    p = RewardModelParams.init(s, 32, seed=0)
    zero = p.with_flat(np.zeros_like(p.flat()))
    f = encode(observations(1)[0], None, s)
    assert score(zero, f) == 0.0
    assert score(p, f) == score(p, f)
    assert score(linear_params([1.0, -1.0]), np.array([2.0, 3.0])) == pytest.approx(-1.0)
    with pytest.raises(ValueError):
        score(p, np.zeros(3))


def test_bt_probability_examples():
    assert bt_probability(0.3, 0.3, 1.0) == 0.5
    assert bt_probability(1.0, 0.0, 1.0) == pytest.approx(0.731059, abs=1e-6)
    with pytest.raises(ValueError):
        bt_probability(1.0, 0.0, 0.0)


@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(0.05, 10), st.floats(0.1, 10))
def test_bt_scale_invariance_and_antisymmetry(r1, r2, tau, k):
    assert bt_probability(r1, r2, tau) + bt_probability(r2, r1, tau) == pytest.approx(1.0, abs=1e-12)
    assert bt_probability(k * r1, k * r2, k * tau) == pytest.approx(bt_probability(r1, r2, tau), rel=1e-9, abs=1e-12)


# -- loss and gradient ------------------------------------------------------------

def test_loss_hand_example():
    p = linear_params([0.0, 0.0])
    b = PairBatch(np.array([[1.0, 0.0]]), np.zeros((1, 2)), np.array([1]), np.array([1.0]))
    loss, grad = loss_and_gradient(p, b)
    assert loss == pytest.approx(math.log(2))
    assert grad[0] == pytest.approx(-0.5)
    assert grad[1] == 0.0


def test_regularizer_linear_in_eta():
    rng = np.random.default_rng(0)
    w = rng.normal(size=2)
    b = PairBatch(rng.normal(size=(4, 2)), rng.normal(size=(4, 2)), np.array([1, 2, 1, 2]), np.ones(4))
    base, _ = loss_and_gradient(linear_params(w, 0.3, Hyper(1, 0.0, 0)), b)
    l1, _ = loss_and_gradient(linear_params(w, 0.3, Hyper(1, 0.1, 0)), b)
    l2, _ = loss_and_gradient(linear_params(w, 0.3, Hyper(1, 0.2, 0)), b)
    assert (l2 - base) == pytest.approx(2 * (l1 - base), rel=1e-12)


def random_batch(rng, s, n):
    obs = observations(2 * n, int(rng.integers(1 << 30)))
    F = np.stack([encode(o, None, s) for o in obs])
    return PairBatch(F[:n], F[n:], rng.integers(1, 3, n), rng.uniform(0.2, 2.0, n))


def fd_check(p, batch, ref, h=1e-5):
    theta = p.flat()
    loss, grad = loss_and_gradient(p, batch, ref)
    num = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        lp, _ = loss_and_gradient(p.with_flat(theta + e), batch, ref)
        lm, _ = loss_and_gradient(p.with_flat(theta - e), batch, ref)
        num[i] = (lp - lm) / (2 * h)
    return np.linalg.norm(grad - num) / max(np.linalg.norm(grad) + np.linalg.norm(num), 1e-12)


@pytest.mark.parametrize("kind", MODES)
def test_gradient_matches_finite_differences(kind):
    rng = np.random.default_rng(7)
    s = spec(kind)
    p = RewardModelParams.init(s, 6, seed=1, hyper=Hyper(0.7, 1e-2, 0.5))
    p = p.with_flat(p.flat() + rng.normal(scale=0.3, size=p.flat().size))
    batch = random_batch(rng, s, 5)
    ref = np.stack([encode(o, None, s) for o in observations(7, 5)])
    assert fd_check(p, batch, ref) < 1e-4


def test_centering_term_shift():
    rng = np.random.default_rng(3)
    s = spec("numeric_only")
    p = RewardModelParams.init(s, 8, seed=2, hyper=Hyper(1.0, 0.0, 0.3))
    batch = random_batch(rng, s, 4)
    ref = np.stack([encode(o, None, s) for o in observations(10, 8)])
    mu = float(score(p, ref).mean())
    base, _ = loss_and_gradient(p, batch, ref)
    b = 0.75
    shifted = p.copy()
    shifted.b2 += b
    # the pairwise term is shift invariant, so only the centering term moves
    got, _ = loss_and_gradient(shifted, batch, ref)
    eta_change = p.hyper.eta * ((p.b2 + b) ** 2 - p.b2 ** 2)
    assert got - base == pytest.approx(0.3 * (2 * b * mu + b * b) + eta_change, rel=1e-9, abs=1e-12)


# -- training ------------------------------------------------------------------------

def utility(o):
    return -3.0 * o.rho_red + o.ttc_p10 - 0.2 * o.mean_queue - 0.05 * o.mean_delay


def make_pairs(n, seed, label=None):
    rng = np.random.default_rng(seed)
    obs = observations(2 * n, seed)
    pairs = []
    for a, b in zip(obs[:n], obs[n:]):
        y = 1 if utility(a) > utility(b) else 2
        if label is not None:
            y = label(rng, y)
        pairs.append(LabeledPair(render_text(a), render_text(b), a, b, y, 1.0, "k"))
    return pairs


def test_linear_utility_oracle():
    train, held = make_pairs(1500, 1), make_pairs(400, 2)
    s = EncoderSpec.fit("structured_fusion", [p.o1 for p in train])
    res = train_reward_model(train, s, cfg=TrainConfig(epochs=30), seed=0, heldout_pairs=held)
    ev = evaluate_offline(res.params, held, utility)
    assert ev["pairwise_accuracy"] >= 0.9
    assert ev["auc"] >= 0.95 and ev["spearman"] > 0.8


def test_zero_epochs_and_determinism(tmp_path):
    train = make_pairs(100, 3)
    s = EncoderSpec.fit("numeric_only", [p.o1 for p in train])
    init = RewardModelParams.init(s, 32, seed=4)
    res = train_reward_model(train, s, cfg=TrainConfig(epochs=0), init=init)
    assert np.array_equal(res.params.flat(), init.flat()) and res.curve == []
    a = train_reward_model(train, s, cfg=TrainConfig(epochs=3), seed=9)
    b = train_reward_model(train, s, cfg=TrainConfig(epochs=3), seed=9)
    assert np.array_equal(a.params.flat(), b.params.flat())
    path = tmp_path / "rm.json"
    from trafficpref.reward_model import save_params

    save_params(a.params, path)
    back = load_params(path)
    assert np.array_equal(back.flat(), a.params.flat()) and back.encoder.compatible(a.params.encoder)
    write_curve(a.curve, tmp_path / "curve.csv")
    assert (tmp_path / "curve.csv").read_text().splitlines()[0] == "epoch,train_loss,heldout_accuracy"


def test_full_batch_loss_non_increasing():
    train = make_pairs(200, 5)
    s = EncoderSpec.fit("structured_fusion", [p.o1 for p in train])
    res = train_reward_model(train, s, cfg=TrainConfig(epochs=25, batch_size=10_000, momentum=0.0, lr=0.05), seed=1)
    losses = [r["train_loss"] for r in res.curve]
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_label_permutation_null():
    # permute y across the whole labelled set, then split: features carry no label signal
    pairs = make_pairs(2500, 6)
    ys = np.random.default_rng(0).permutation([p.y for p in pairs])
    for p, y in zip(pairs, ys):
        p.y = int(y)
    train, held = pairs[:1000], pairs[1000:]
    s = EncoderSpec.fit("structured_fusion", [p.o1 for p in train])
    res = train_reward_model(train, s, cfg=TrainConfig(epochs=10), seed=0)
    acc = evaluate_offline(res.params, held)["pairwise_accuracy"]
    assert abs(acc - 0.5) < 0.05


def test_offline_metric_examples():
    held = make_pairs(2000, 8)
    perfect = evaluate_offline(None, held, utility, scorer=lambda obs: [utility(o) for o in obs])
    assert perfect["pairwise_accuracy"] == 1.0 and perfect["auc"] == 1.0 and perfect["spearman"] == pytest.approx(1.0)
    rng = np.random.default_rng(0)
    rand = evaluate_offline(None, held, scorer=lambda obs: rng.normal(size=len(obs)))
    assert abs(rand["auc"] - 0.5) < 0.05


def test_fusion():
    s = spec("numeric_only")
    a, b = RewardModelParams.init(s, 8, seed=1), RewardModelParams.init(s, 8, seed=2)
    f = encode(observations(1)[0], None, s)
    assert fuse_scorers(a, b, 1.0).score(f) == pytest.approx(score(a, f))
    assert fuse_scorers(a, b, 0.0).score(f) == pytest.approx(score(b, f))
    src, tgt = linear_params([2.0]), linear_params([-1.0])
    assert fuse_scorers(src, tgt, 0.5).score(np.array([1.0])) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        fuse_scorers(a, RewardModelParams.init(spec("structured_fusion"), 8), 0.5)
