"""Shared-parameter PPO for the signal controllers.

Every intersection is an agent; all agents share one policy and one value network
and their transitions are pooled. A transition runs from one decision point of an
intersection to its next one, and its reward is computed from the observation
reached there.
"""
from __future__ import annotations

import csv
import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .sim import Observation, SimConfig, episode_metrics, init_network
from .sim.engine import SimState
from .shaping import (
    ShapingConfig,
    StreamNormalizer,
    lambda_schedule,
    shaped_streams,
    update_and_normalize,
)

N_ACTIONS = 4
# fixed feature scales: pressures, mean delay, ttc_p10, ttc_p50, harsh brakes
_SCALES = np.array([10.0, 10.0, 10.0, 10.0, 60.0, 10.0, 10.0, 5.0])
OBS_DIM = 8 + 4 + 1


def policy_features(obs: Observation, green_s: float = 30.0) -> np.ndarray:
    x = np.empty(OBS_DIM)
    x[:4] = obs.p
    x[4:8] = (obs.mean_delay, obs.ttc_p10, obs.ttc_p50, obs.h_brake)
    x[:8] /= _SCALES
    x[8:12] = 0.0
    x[8 + int(obs.phase.phase)] = 1.0
    x[12] = obs.phase.elapsed / green_s
    return x


class FeatureScaler:
    """Running standardization of the numeric part of the policy features.

    Statistics are frozen while an episode is rolled out and refreshed from the raw
    features collected in each iteration, so actions and stored log-probabilities
    always see the same scaling.
    """

    def __init__(self, n: int = 8):
        self.stats = StreamNormalizer(n_streams=n)

    def update(self, X: np.ndarray) -> None:
        for row in np.atleast_2d(X)[:, :self.stats.n_streams]:
            self.stats.update(row)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        if self.stats.count < 2:
            return X
        n = self.stats.n_streams
        Z = np.array(X, dtype=float, copy=True)
        Z[..., :n] = np.clip(self.stats.normalize(Z[..., :n]), -5.0, 5.0)
        return Z

    def to_dict(self) -> dict:
        return self.stats.state_dict()

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureScaler":
        sc = cls(len(d["mean"]))
        sc.stats.count, sc.stats.mean, sc.stats.m2 = int(d["count"]), np.array(d["mean"]), np.array(d["m2"])
        return sc


@dataclass
class PPOConfig:
    lr: float = 1e-3
    buffer: int = 12000
    sample: int = 3000
    hidden: int = 20
    clip: float = 0.2
    batch: int = 128
    minibatches: int = 16
    entropy_coef: float = 1e-3
    value_coef: float = 0.5
    gae_lambda: float = 0.95
    gamma_discount: float = 0.99
    iterations: int = 40
    episodes: int = 2
    horizon: float = 600.0
    eval_seeds: tuple = (9001, 9002)

    def __post_init__(self):
        for name in ("lr", "buffer", "sample", "hidden", "batch", "minibatches", "episodes", "horizon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.clip < 1:
            raise ValueError("clip must lie in (0, 1)")
        if not 0 < self.gamma_discount <= 1:
            raise ValueError("gamma_discount must lie in (0, 1]")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


# -- networks ------------------------------------------------------------------------

@dataclass
class MLP:
    """x -> tanh(W1 x + b1) -> W2 h + b2."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, n_in: int, n_hidden: int, n_out: int, rng: np.random.Generator,
             out_scale: float = 1.0) -> "MLP":
        W1 = rng.uniform(-1, 1, (n_hidden, n_in)) / math.sqrt(n_in)
        W2 = out_scale * rng.uniform(-1, 1, (n_out, n_hidden)) / math.sqrt(n_hidden)
        return cls(W1, np.zeros(n_hidden), W2, np.zeros(n_out))

    def forward(self, X: np.ndarray):
        h = np.tanh(X @ self.W1.T + self.b1)
        return h @ self.W2.T + self.b2, h

    def backward(self, X: np.ndarray, h: np.ndarray, dout: np.ndarray) -> np.ndarray:
        """Flat gradient given dLoss/dOutput."""
        gW2 = dout.T @ h
        gb2 = dout.sum(axis=0)
        dh = (dout @ self.W2) * (1 - h * h)
        gW1 = dh.T @ X
        gb1 = dh.sum(axis=0)
        return np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])

    def flat(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.b1, self.W2.ravel(), self.b2])

    def set_flat(self, theta: np.ndarray) -> None:
        i = 0
        for name in ("W1", "b1", "W2", "b2"):
            arr = getattr(self, name)
            setattr(self, name, theta[i:i + arr.size].reshape(arr.shape).copy())
            i += arr.size

    def copy(self) -> "MLP":
        return MLP(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy())

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("W1", "b1", "W2", "b2")}

    @classmethod
    def from_dict(cls, d: dict) -> "MLP":
        return cls(*(np.asarray(d[k], float) for k in ("W1", "b1", "W2", "b2")))


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def policy_forward(policy: MLP, X: np.ndarray) -> np.ndarray:
    """Action probabilities for feature rows ``X`` (or a single feature vector)."""
    X = np.asarray(X, float)
    if X.shape[-1] != policy.W1.shape[1]:
        raise ValueError(f"feature dimension {X.shape[-1]} != policy input {policy.W1.shape[1]}")
    logits, _ = policy.forward(np.atleast_2d(X))
    p = np.exp(log_softmax(logits))
    return p[0] if X.ndim == 1 else p


def entropy(probs: np.ndarray) -> np.ndarray:
    return -(probs * np.log(np.maximum(probs, 1e-300))).sum(axis=-1)


# -- advantages -----------------------------------------------------------------------

def gae(rewards, values, bootstrap_value: float, gamma: float, lam: float, dones=None):
    """Generalized advantage estimates and returns for one trajectory.

    ``dones[t]`` marks a terminal transition (no bootstrapping past it).
    """
    r = np.asarray(rewards, float)
    v = np.asarray(values, float)
    n = len(r)
    if len(v) != n:
        raise ValueError("rewards and values must have equal length")
    d = np.zeros(n, bool) if dones is None else np.asarray(dones, bool)
    adv = np.zeros(n)
    nxt_v, run = float(bootstrap_value), 0.0
    for t in range(n - 1, -1, -1):
        nonterm = 0.0 if d[t] else 1.0
        delta = r[t] + gamma * nxt_v * nonterm - v[t]
        run = delta + gamma * lam * nonterm * run
        adv[t] = run
        nxt_v = v[t]
    return adv, adv + v


# -- update --------------------------------------------------------------------------

class Adam:
    def __init__(self, size: int, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.m, self.v = np.zeros(size), np.zeros(size)
        self.lr, self.b1, self.b2, self.eps, self.t = lr, b1, b2, eps, 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mh = self.m / (1 - self.b1 ** self.t)
        vh = self.v / (1 - self.b2 ** self.t)
        return theta - self.lr * mh / (np.sqrt(vh) + self.eps)

    def state_dict(self) -> dict:
        return {"m": self.m.tolist(), "v": self.v.tolist(), "t": self.t}


def surrogate_loss_and_grad(policy: MLP, X, actions, old_logp, adv, clip: float, entropy_coef: float):
    """Clipped-surrogate policy loss (minus entropy bonus), mean over rows, with its gradient."""
    logits, h = policy.forward(X)
    logp_all = log_softmax(logits)
    pi = np.exp(logp_all)
    n = len(actions)
    idx = np.arange(n)
    logp = logp_all[idx, actions]
    ratio = np.exp(logp - old_logp)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1 - clip, 1 + clip) * adv
    surr = np.minimum(unclipped, clipped)
    ent = entropy(pi)
    loss = float(-surr.mean() - entropy_coef * ent.mean())
    active = unclipped <= clipped
    g_logp = np.where(active, -adv * ratio, 0.0) / n
    onehot = np.zeros_like(pi)
    onehot[idx, actions] = 1.0
    dz = g_logp[:, None] * (onehot - pi)
    # dH/dz_j = -pi_j (log pi_j + H)
    dH = -pi * (logp_all + ent[:, None])
    dz -= entropy_coef * dH / n
    grad = policy.backward(X, h, dz)
    stats = {"clip_frac": float(np.mean(np.abs(ratio - 1) > clip)),
             "approx_kl": float(np.mean(old_logp - logp)), "entropy": float(ent.mean()),
             "policy_loss": float(-surr.mean())}
    return loss, grad, stats


def value_loss_and_grad(value: MLP, X, returns, coef: float = 0.5):
    out, h = value.forward(X)
    v = out[:, 0]
    err = v - returns
    loss = float(coef * np.mean(err * err))
    dout = (2 * coef * err / len(err))[:, None]
    return loss, value.backward(X, h, dout)


@dataclass
class Batch:
    X: np.ndarray
    actions: np.ndarray
    old_logp: np.ndarray
    adv: np.ndarray
    returns: np.ndarray

    def __len__(self):
        return len(self.actions)

    def take(self, idx) -> "Batch":
        return Batch(self.X[idx], self.actions[idx], self.old_logp[idx], self.adv[idx], self.returns[idx])


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    if len(adv) < 2:
        return adv - adv.mean()
    return (adv - adv.mean()) / (adv.std() + 1e-8)


class PPOLearner:
    def __init__(self, cfg: PPOConfig, rng: np.random.Generator, obs_dim: int = OBS_DIM):
        self.cfg = cfg
        self.policy = MLP.init(obs_dim, cfg.hidden, N_ACTIONS, rng, out_scale=0.01)
        self.value = MLP.init(obs_dim, cfg.hidden, 1, rng)
        self.opt_pi = Adam(self.policy.flat().size, cfg.lr)
        self.opt_v = Adam(self.value.flat().size, cfg.lr)


def ppo_update(learner: PPOLearner, batch: Batch, rng: np.random.Generator) -> dict:
    """One pass of ``minibatches`` clipped-surrogate steps of size ``batch`` each.

    Advantages are normalized per minibatch. A non-finite loss aborts the update and
    leaves the parameters unchanged.
    """
    cfg = learner.cfg
    order = rng.permutation(len(batch))
    n_mb = min(cfg.minibatches, max(1, len(batch) // cfg.batch)) if len(batch) >= cfg.batch else 1
    theta_pi, theta_v = learner.policy.flat(), learner.value.flat()
    stats = []
    for j in range(n_mb):
        idx = order[j * cfg.batch:(j + 1) * cfg.batch]
        mb = batch.take(idx)
        adv = normalize_advantages(mb.adv)
        lp, gp, st = surrogate_loss_and_grad(learner.policy, mb.X, mb.actions, mb.old_logp, adv,
                                             cfg.clip, cfg.entropy_coef)
        lv, gv = value_loss_and_grad(learner.value, mb.X, mb.returns, cfg.value_coef)
        if not (np.isfinite(lp) and np.isfinite(lv) and np.all(np.isfinite(gp)) and np.all(np.isfinite(gv))):
            learner.policy.set_flat(theta_pi)
            learner.value.set_flat(theta_v)
            raise FloatingPointError(f"non-finite PPO loss in minibatch {j}: policy={lp}, value={lv}")
        learner.policy.set_flat(learner.opt_pi.step(learner.policy.flat(), gp))
        learner.value.set_flat(learner.opt_v.step(learner.value.flat(), gv))
        st["value_loss"] = lv
        stats.append(st)
    return {k: float(np.mean([s[k] for s in stats])) for k in stats[0]} if stats else {}


class ReplayBuffer:
    """FIFO store of the most recent ``capacity`` transitions."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.items: deque = deque(maxlen=capacity)

    def extend(self, rows) -> None:
        self.items.extend(rows)

    def __len__(self):
        return len(self.items)

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        m = len(self.items)
        idx = rng.choice(m, size=n, replace=m < n)
        rows = [self.items[i] for i in idx]
        return Batch(np.stack([r["x"] for r in rows]), np.array([r["a"] for r in rows]),
                     np.array([r["logp"] for r in rows]), np.array([r["adv"] for r in rows]),
                     np.array([r["ret"] for r in rows]))


# -- rollouts -------------------------------------------------------------------------

@dataclass
class Transition:
    x: np.ndarray
    a: int
    logp: float
    value: float
    reward: float = 0.0
    done: bool = False
    streams: tuple = (0.0, 0.0, 0.0)
    mask: int = 1
    raw: Optional[np.ndarray] = None


class Scorer:
    """Adapter turning a reward model (or fused scorer) into ``obs -> float``."""

    def __init__(self, model):
        from .reward_model import FusedScorer, encode, score

        self.model = model
        self._encode, self._score = encode, score
        self._fused = isinstance(model, FusedScorer)

    def __call__(self, obs: Observation) -> float:
        f = self._encode(obs, None, self.model.encoder)
        return float(self.model.score(f) if self._fused else self._score(self.model, f))


def run_policy_episode(policy: MLP, value: Optional[MLP], sim_cfg: SimConfig, rng: np.random.Generator,
                       greedy: bool = False, shaping: Optional[ShapingConfig] = None,
                       scorer: Optional[Callable[[Observation], float]] = None, lam: float = 0.0,
                       norm: Optional[StreamNormalizer] = None,
                       scaler: Optional[FeatureScaler] = None):
    """Roll one episode. Returns ``(metrics, trajectories, mask_log)`` where trajectories
    map intersection -> list of Transition. ``value`` may be None for evaluation
    roll-outs (stored values are then zero)."""
    state: SimState = init_network(sim_cfg)
    n = state.net.n_int
    green = sim_cfg.green_s
    pending: dict[int, Transition] = {}
    traj: dict[int, list[Transition]] = {k: [] for k in range(n)}
    mask_log: list[int] = []
    shaping = shaping or ShapingConfig()

    def close(k: int, obs: Observation, done: bool):
        tr = pending.pop(k, None)
        if tr is None:
            return
        r_phi = scorer(obs) if (scorer is not None and shaping.use_intrinsic) else 0.0
        streams, m = shaped_streams(obs, r_phi, lam, shaping)
        mask_log.append(m)
        tr.streams, tr.mask, tr.done = streams, m, done
        if norm is not None:
            tr.reward = update_and_normalize(norm, streams, shaping)[3]
        else:
            tr.reward = float(sum(streams))
        traj[k].append(tr)

    while not state.done:
        dps = state.decision_points()
        actions = [None] * n
        if dps:
            obs = [state.observe(k) for k in dps]
            raw = np.stack([policy_features(o, green) for o in obs])
            X = scaler(raw) if scaler is not None else raw
            probs = policy_forward(policy, X)
            vals = value.forward(X)[0][:, 0] if value is not None else np.zeros(len(dps))
            for j, k in enumerate(dps):
                close(k, obs[j], False)
                if greedy:
                    a = int(np.argmax(probs[j]))
                else:
                    a = int(rng.choice(N_ACTIONS, p=probs[j]))
                actions[k] = a
                pending[k] = Transition(X[j], a, float(np.log(probs[j][a])), float(vals[j]), raw=raw[j])
        state.step(actions, observe=False)
    for k in list(pending):
        close(k, state.observe(k), True)
    metrics = episode_metrics(state, mask_log)
    return metrics, traj, mask_log


CURVE_FIELDS = ("iter", "att", "aql", "awt", "ttc_p10", "brakes_per_km", "oscillation", "mask_rate",
                "mean_r1", "mean_r2", "mean_r3")


@dataclass
class TrainPolicyResult:
    policy: MLP
    value: MLP
    curve: list[dict]
    eval_metrics: dict = field(default_factory=dict)
    update_stats: list[dict] = field(default_factory=list)
    scaler: Optional[FeatureScaler] = None


def _mean_or_nan(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else float("nan")


def train_policy(sim_cfg: SimConfig, scorer=None, shaping: Optional[ShapingConfig] = None,
                 cfg: Optional[PPOConfig] = None, seed: int = 0,
                 log: Optional[Callable[[dict], None]] = None) -> TrainPolicyResult:
    """Shared-policy PPO with shaped rewards; fully deterministic for a fixed seed.

    Each iteration rolls ``cfg.episodes`` episodes (each with its own demand seed),
    computes GAE per intersection trajectory, appends to the FIFO buffer and runs one
    update on a ``cfg.sample``-transition draw. The final policy is evaluated greedily
    on ``cfg.eval_seeds``.
    """
    cfg = cfg or PPOConfig()
    shaping = shaping or ShapingConfig()
    if shaping.use_intrinsic and scorer is None:
        raise ValueError("a frozen scorer is required unless use_intrinsic is False")
    score_fn = None
    if scorer is not None:
        score_fn = scorer if callable(scorer) and not hasattr(scorer, "encoder") else Scorer(scorer)
    ss = np.random.SeedSequence([seed, 7919])
    init_rng, act_rng, upd_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    learner = PPOLearner(cfg, init_rng)
    scaler = FeatureScaler()
    buf = ReplayBuffer(cfg.buffer)
    norm = StreamNormalizer()
    sim_cfg = sim_cfg.replace(horizon_s=cfg.horizon)
    curve, upd_stats = [], []
    for it in range(cfg.iterations):
        lam = lambda_schedule(it, shaping)
        rows, mets, streams, masks, raw_rows = [], [], [], [], []
        for e in range(cfg.episodes):
            ep_seed = int(np.random.SeedSequence([seed, it, e]).generate_state(1)[0])
            m, traj, mlog = run_policy_episode(learner.policy, learner.value, sim_cfg.replace(seed=ep_seed),
                                               act_rng, False, shaping, score_fn, lam, norm, scaler)
            mets.append(m)
            raw_rows.extend(t.raw for k in sorted(traj) for t in traj[k])
            masks.extend(mlog)
            for k in sorted(traj):
                trs = traj[k]
                if not trs:
                    continue
                adv, ret = gae([t.reward for t in trs], [t.value for t in trs], 0.0,
                               cfg.gamma_discount, cfg.gae_lambda, [t.done for t in trs])
                for t, a_, r_ in zip(trs, adv, ret):
                    rows.append({"x": t.x, "a": t.a, "logp": t.logp, "adv": a_, "ret": r_})
                    streams.append(t.streams)
        buf.extend(rows)
        if raw_rows:
            scaler.update(np.stack(raw_rows))
        if len(buf):
            upd_stats.append(ppo_update(learner, buf.sample(cfg.sample, upd_rng), upd_rng))
        s = np.array(streams) if streams else np.zeros((0, 3))
        row = {"iter": it, "att": _mean_or_nan([m.att for m in mets]),
               "aql": _mean_or_nan([m.aql for m in mets]), "awt": _mean_or_nan([m.awt for m in mets]),
               "ttc_p10": _mean_or_nan([m.ttc_p10 for m in mets]),
               "brakes_per_km": _mean_or_nan([m.brakes_per_km for m in mets]),
               "oscillation": _mean_or_nan([m.oscillation for m in mets]),
               "mask_rate": float(np.mean([1 - x for x in masks])) if masks else 0.0,
               "mean_r1": float(s[:, 0].mean()) if len(s) else 0.0,
               "mean_r2": float(s[:, 1].mean()) if len(s) else 0.0,
               "mean_r3": float(s[:, 2].mean()) if len(s) else 0.0}
        curve.append(row)
        if log:
            log(row)
    result = TrainPolicyResult(learner.policy, learner.value, curve, update_stats=upd_stats, scaler=scaler)
    result.eval_metrics = evaluate_policy(learner.policy, sim_cfg, cfg.eval_seeds, shaping, scaler)
    return result


def evaluate_policy(policy: MLP, sim_cfg: SimConfig, seeds: Sequence[int],
                    shaping: Optional[ShapingConfig] = None,
                    scaler: Optional[FeatureScaler] = None) -> dict:
    """Greedy roll-outs on fixed demand seeds; returns metrics averaged over seeds."""
    shaping = shaping or ShapingConfig()
    rows = []
    for s in seeds:
        m, _, mlog = run_policy_episode(policy, None, sim_cfg.replace(seed=int(s)),
                                        np.random.default_rng(0), greedy=True, shaping=shaping,
                                        scaler=scaler)
        rows.append(m.to_dict())
    keys = rows[0].keys()
    return {k: _mean_or_nan([r[k] for r in rows]) for k in keys}


def write_curve(curve: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(CURVE_FIELDS))
        w.writeheader()
        for row in curve:
            w.writerow({k: (f"{row[k]:.10g}" if isinstance(row[k], float) else row[k]) for k in CURVE_FIELDS})


def save_checkpoint(result: TrainPolicyResult, path: str | Path, meta: Optional[dict] = None) -> None:
    doc = {"version": 1, "policy": result.policy.to_dict(), "value": result.value.to_dict(),
           "scaler": result.scaler.to_dict() if result.scaler is not None else None,
           "meta": meta or {}}
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[MLP, MLP, Optional[FeatureScaler], dict]:
    """Returns ``(policy, value, scaler, meta)``."""
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != 1:
        raise ValueError("unsupported checkpoint version")
    scaler = FeatureScaler.from_dict(doc["scaler"]) if doc.get("scaler") else None
    return MLP.from_dict(doc["policy"]), MLP.from_dict(doc["value"]), scaler, doc.get("meta", {})
