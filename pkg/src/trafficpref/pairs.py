"""Observation pool and contrast-weighted pair sampling.

A pair's unnormalized weight is::

    alpha * congestion_contrast + beta * safety_contrast
        + gamma * [same episode and intersection, delta1 <= |t_a - t_b| <= delta2]

Rather than enumerating all O(n^2) pairs, every anchor draws ``slate_k`` random
partners; pairs are then drawn without replacement from the union of the slates
with probability proportional to weight (Efraimidis-Spirakis keys).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .captioner import SCHEMA_VERSION, render_caption
from .sim import Observation, SimConfig, init_network

log = logging.getLogger(__name__)

EPS = 1e-8


@dataclass(frozen=True)
class PoolEntry:
    obs: Observation
    caption: str
    template_id: str
    episode: int = 0

    def to_dict(self) -> dict:
        return {"episode": self.episode, "observation": self.obs.to_dict(), "caption": self.caption,
                "template_id": self.template_id, "schema_version": SCHEMA_VERSION}

    @classmethod
    def from_dict(cls, d: dict) -> "PoolEntry":
        return cls(Observation.from_dict(d["observation"]), d["caption"], d["template_id"],
                   int(d.get("episode", 0)))


def make_entry(obs: Observation, episode: int = 0) -> PoolEntry:
    cap = render_caption(obs)
    return PoolEntry(obs, cap.text, cap.template_id, episode)


@dataclass(frozen=True)
class PoolStats:
    """Means and standard deviations of the contrast fields over the whole pool."""

    mean: dict
    std: dict

    FIELDS = ("mean_queue", "mean_delay", "ttc_p10", "ttc_p50", "h_brake")

    @classmethod
    def from_observations(cls, observations: Sequence[Observation]) -> "PoolStats":
        X = np.array([[_field(o, f) for f in cls.FIELDS] for o in observations], dtype=float)
        if X.size == 0:
            raise ValueError("cannot compute statistics of an empty pool")
        return cls(dict(zip(cls.FIELDS, X.mean(axis=0).tolist())),
                   dict(zip(cls.FIELDS, X.std(axis=0).tolist())))

    def z(self, name: str, value):
        return (np.asarray(value, dtype=float) - self.mean[name]) / max(self.std[name], EPS)

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std}

    @classmethod
    def from_dict(cls, d: dict) -> "PoolStats":
        return cls(dict(d["mean"]), dict(d["std"]))


def _field(o: Observation, name: str) -> float:
    return o.mean_queue if name == "mean_queue" else float(getattr(o, name))


@dataclass
class PairingConfig:
    alpha: float = 1.0
    beta: float = 1.0
    gamma_pair: float = 1.0
    delta1: float = 10.0
    delta2: float = 120.0
    slate_k: int = 64
    stats: Optional[PoolStats] = None

    def validate(self) -> "PairingConfig":
        if min(self.alpha, self.beta, self.gamma_pair) < 0:
            raise ValueError("pair weights must be nonnegative")
        if self.alpha == self.beta == self.gamma_pair == 0:
            raise ValueError("at least one pair weight must be positive")
        if not self.delta1 < self.delta2:
            raise ValueError("delta1 must be smaller than delta2")
        if self.slate_k < 1:
            raise ValueError("slate_k must be >= 1")
        return self


def congestion_contrast(oa: Observation, ob: Observation, stats: PoolStats) -> float:
    return float(abs(stats.z("mean_queue", oa.mean_queue) - stats.z("mean_queue", ob.mean_queue))
                 + abs(stats.z("mean_delay", oa.mean_delay) - stats.z("mean_delay", ob.mean_delay)))


def safety_contrast(oa: Observation, ob: Observation, stats: PoolStats) -> float:
    return float(sum(abs(stats.z(f, getattr(oa, f)) - stats.z(f, getattr(ob, f)))
                     for f in ("ttc_p10", "ttc_p50", "h_brake")))


def time_shift_indicator(a: PoolEntry | Observation, b: PoolEntry | Observation,
                         cfg: PairingConfig) -> float:
    ea = a.episode if isinstance(a, PoolEntry) else 0
    eb = b.episode if isinstance(b, PoolEntry) else 0
    oa = a.obs if isinstance(a, PoolEntry) else a
    ob = b.obs if isinstance(b, PoolEntry) else b
    same = ea == eb and oa.intersection_id == ob.intersection_id
    dt = abs(oa.time - ob.time)
    return float(same and cfg.delta1 <= dt <= cfg.delta2)


def pair_weight_unnorm(a, b, cfg: PairingConfig) -> float:
    """Weight of an (unordered) pair; accepts Observations or PoolEntries."""
    if cfg.stats is None:
        raise ValueError("PairingConfig.stats must be set (see PoolStats.from_observations)")
    oa = a.obs if isinstance(a, PoolEntry) else a
    ob = b.obs if isinstance(b, PoolEntry) else b
    return (cfg.alpha * congestion_contrast(oa, ob, cfg.stats)
            + cfg.beta * safety_contrast(oa, ob, cfg.stats)
            + cfg.gamma_pair * time_shift_indicator(a, b, cfg))


@dataclass(frozen=True)
class CandidatePair:
    a: int
    b: int
    weight: float


@dataclass
class SampleResult:
    pairs: list[CandidatePair]
    exhausted: bool = False
    n_candidates: int = 0

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)


def weighted_sample_without_replacement(weights: np.ndarray, m: int,
                                        rng: np.random.Generator) -> np.ndarray:
    """Indices of ``m`` items drawn sequentially without replacement, P proportional to weight.

    Uses exponential keys ``E_i / w_i`` (smallest first), which is equivalent to
    successive weighted draws. Zero-weight items are never chosen.
    """
    w = np.asarray(weights, dtype=float)
    pos = np.flatnonzero(w > 0)
    m = min(m, pos.size)
    if m == 0:
        return np.zeros(0, dtype=np.int64)
    keys = rng.exponential(size=pos.size) / w[pos]
    part = np.argpartition(keys, m - 1)[:m]
    return pos[part[np.argsort(keys[part], kind="stable")]]


class _PoolArrays:
    def __init__(self, pool: Sequence[PoolEntry], stats: PoolStats):
        obs = [e.obs for e in pool]
        self.zq = stats.z("mean_queue", [o.mean_queue for o in obs])
        self.zd = stats.z("mean_delay", [o.mean_delay for o in obs])
        self.zs = np.stack([stats.z(f, [getattr(o, f) for o in obs])
                            for f in ("ttc_p10", "ttc_p50", "h_brake")], axis=1)
        self.key = np.array([e.episode for e in pool], dtype=np.int64) * 1_000_003 \
            + np.array([o.intersection_id for o in obs], dtype=np.int64)
        self.t = np.array([o.time for o in obs], dtype=float)

    def weights(self, a: np.ndarray, b: np.ndarray, cfg: PairingConfig) -> np.ndarray:
        cong = np.abs(self.zq[a] - self.zq[b]) + np.abs(self.zd[a] - self.zd[b])
        safe = np.abs(self.zs[a] - self.zs[b]).sum(axis=1)
        dt = np.abs(self.t[a] - self.t[b])
        ind = (self.key[a] == self.key[b]) & (dt >= cfg.delta1) & (dt <= cfg.delta2)
        return cfg.alpha * cong + cfg.beta * safe + cfg.gamma_pair * ind


def candidate_slates(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Unordered candidate pairs (a < b) from ``k`` random partners per anchor."""
    k = min(k, n - 1)
    rows = []
    for i in range(n):
        partners = rng.choice(n - 1, size=k, replace=False)
        partners = partners + (partners >= i)
        rows.append(np.stack([np.full(k, i), partners], axis=1))
    pairs = np.sort(np.concatenate(rows), axis=1)
    return np.unique(pairs, axis=0)


def sample_pairs(pool: Sequence[PoolEntry], M: int, cfg: PairingConfig,
                 rng: np.random.Generator) -> SampleResult:
    """Draw ``M`` distinct pairs proportionally to their weight over the slate candidates."""
    cfg.validate()
    if len(pool) < 2:
        raise ValueError("pool needs at least two observations")
    if M < 1:
        raise ValueError("M must be >= 1")
    stats = cfg.stats or PoolStats.from_observations([e.obs for e in pool])
    cfg_s = replace(cfg, stats=stats)
    arr = _PoolArrays(pool, stats)
    cand = candidate_slates(len(pool), cfg.slate_k, rng)
    w = arr.weights(cand[:, 0], cand[:, 1], cfg_s)
    pick = weighted_sample_without_replacement(w, M, rng)
    pairs = [CandidatePair(int(cand[i, 0]), int(cand[i, 1]), float(w[i])) for i in pick]
    exhausted = len(pairs) < M
    if exhausted:
        log.warning("pair pool exhausted: %d positive-weight candidates for M=%d", len(pairs), M)
    return SampleResult(pairs, exhausted, int(cand.shape[0]))


# -- pool collection and persistence --------------------------------------------

def collect_pool(cfg: SimConfig, controllers: Sequence, episodes_per_controller: int = 1,
                 sample_every: float = 7.0, seed: int = 0) -> list[PoolEntry]:
    """Roll out behaviour controllers and keep every intersection's observation each
    ``sample_every`` seconds. The default 7 s stride does not divide the 35 s signal
    cycle unit, so yellow and all-red stages are visited too.
    """
    pool: list[PoolEntry] = []
    ep = 0
    stride = max(1, int(round(sample_every / cfg.dt)))
    for ci, make in enumerate(controllers):
        for e in range(episodes_per_controller):
            ep_seed = int(np.random.SeedSequence([seed, ci, e]).generate_state(1)[0])
            state = init_network(cfg.replace(seed=ep_seed))
            ctl = make(ep_seed)
            while not state.done:
                acts = [ctl(state, k) if state.at_decision_point(k) else None
                        for k in range(state.net.n_int)]
                want = (state.steps + 1) % stride == 0
                obs, _ = state.step(acts, observe=want)
                if want:
                    pool.extend(make_entry(o, ep) for o in obs)
            ep += 1
    return pool


def save_pool(pool: Iterable[PoolEntry], path: str | Path) -> None:
    with open(path, "w") as fh:
        for e in pool:
            fh.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")


def load_pool(path: str | Path) -> list[PoolEntry]:
    with open(path) as fh:
        return [PoolEntry.from_dict(json.loads(line)) for line in fh if line.strip()]
