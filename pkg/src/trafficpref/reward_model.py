"""Bradley-Terry preference scorer over caption features.

Feature layout (``D_num = 8`` standardized numerics first)::

    numerics  p_N p_E p_S p_W  mean_delay  ttc_p10  ttc_p50  h_brake
    structured_fusion adds one-hot slots (44 dims):
        phase(4) | queue bin per approach(4 x 4) | delay 5 s bin, last open(12)
        | ttc_p10 bin(3) | ttc_p50 bin(3) | red_risk(2) | brakes 0/1/2/3+(4)
    unstructured and shuffled add 256 hashed character-trigram frequencies of the
    prose caption or of the shuffled, unit-free caption.

The scorer is ``r(f) = w2 . tanh(W1 f + b1) + b2`` (32 hidden units) or, with
``hidden=0``, the linear ``r(f) = w2 . f + b2``. The loss over a batch is::

    -sum_i w_i log sigma(s_i (r(f1_i) - r(f2_i)) / tau) + eta ||params||^2
        + zeta * (mean of r over a fixed reference sample)^2

with ``s_i = +1`` for y=1 and ``-1`` for y=2.
"""
from __future__ import annotations

import json
import math
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata, spearmanr

from .captioner import (
    SCHEMA_VERSION,
    CaptionParseError,
    delay_bin,
    parse_caption,
    queue_bin,
    render_text,
    shuffled_caption,
    ttc_bin,
    unstructured_caption,
)
from .sim import Observation

MODES = ("numeric_only", "structured_fusion", "unstructured", "shuffled")
GROUPS = ("risk", "congestion")
NUMERIC_NAMES = ("p_N", "p_E", "p_S", "p_W", "mean_delay", "ttc_p10", "ttc_p50", "h_brake")
D_NUM = len(NUMERIC_NAMES)
N_DELAY_BINS = 12
N_TRIGRAM = 256
MODEL_VERSION = 1

# one-hot block layout: name -> (offset within the block, width)
_ONEHOT = {}
_off = 0
for _name, _w in (("phase", 4), ("queue", 16), ("delay", N_DELAY_BINS), ("ttc_p10", 3),
                  ("ttc_p50", 3), ("red", 2), ("brakes", 4)):
    _ONEHOT[_name] = (_off, _w)
    _off += _w
D_ONEHOT = _off

_GROUP_NUMERIC = {"risk": ("ttc_p10", "ttc_p50", "h_brake"),
                  "congestion": ("p_N", "p_E", "p_S", "p_W", "mean_delay")}
_GROUP_ONEHOT = {"risk": ("ttc_p10", "ttc_p50", "red", "brakes"),
                 "congestion": ("queue", "delay")}
# caption keys (shuffled grammar) and prose facts dropped by each group
_GROUP_SLOTS = {"risk": ("ttc_p10", "ttc_p50", "brakes", "red_risk"),
                "congestion": ("q", "p", "delay", "thru")}
_GROUP_FACTS = {"risk": ("ttc", "brakes", "red"), "congestion": ("queue", "pressure", "delay", "thru")}


class EncodingError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class FeatureMode:
    kind: str = "structured_fusion"
    field_mask: frozenset = frozenset()

    def __post_init__(self):
        if self.kind not in MODES:
            raise ValueError(f"unknown feature mode {self.kind!r}")
        object.__setattr__(self, "field_mask", frozenset(self.field_mask))
        if not self.field_mask <= set(GROUPS):
            raise ValueError(f"field_mask must be a subset of {GROUPS}")

    @property
    def dim(self) -> int:
        extra = {"numeric_only": 0, "structured_fusion": D_ONEHOT}.get(self.kind, N_TRIGRAM)
        return D_NUM + extra


@dataclass
class EncoderSpec:
    mode: FeatureMode
    x_mean: np.ndarray
    x_std: np.ndarray
    style_seed: int = 0

    @property
    def dim(self) -> int:
        return self.mode.dim

    @classmethod
    def fit(cls, mode: FeatureMode | str, observations: Sequence[Observation],
            style_seed: int = 0) -> "EncoderSpec":
        mode = FeatureMode(mode) if isinstance(mode, str) else mode
        X = np.array([raw_numeric(o) for o in observations], dtype=float)
        if X.size == 0:
            return cls(mode, np.zeros(D_NUM), np.ones(D_NUM), style_seed)
        return cls(mode, X.mean(axis=0), np.maximum(X.std(axis=0), 1e-6), style_seed)

    def compatible(self, other: "EncoderSpec") -> bool:
        return (self.mode == other.mode and np.array_equal(self.x_mean, other.x_mean)
                and np.array_equal(self.x_std, other.x_std) and self.style_seed == other.style_seed)

    def to_dict(self) -> dict:
        return {"kind": self.mode.kind, "field_mask": sorted(self.mode.field_mask),
                "x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist(),
                "style_seed": self.style_seed, "dim": self.dim,
                "onehot_layout": {k: list(v) for k, v in _ONEHOT.items()},
                "schema_version": SCHEMA_VERSION}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderSpec":
        return cls(FeatureMode(d["kind"], frozenset(d["field_mask"])), np.asarray(d["x_mean"], float),
                   np.asarray(d["x_std"], float), int(d["style_seed"]))


def raw_numeric(o: Observation) -> list[float]:
    return [*map(float, o.p), o.mean_delay, o.ttc_p10, o.ttc_p50, float(o.h_brake)]


def caption_for_mode(obs: Observation, spec: EncoderSpec) -> str:
    kind = spec.mode.kind
    if kind == "unstructured":
        return unstructured_caption(obs, spec.style_seed)
    if kind == "shuffled":
        return shuffled_caption(obs, spec.style_seed)
    return render_text(obs)


def _onehot(fields: dict) -> np.ndarray:
    v = np.zeros(D_ONEHOT)

    def put(name, idx):
        off, w = _ONEHOT[name]
        v[off + min(idx, w - 1)] = 1.0

    put("phase", fields["phase"])
    off, _ = _ONEHOT["queue"]
    for a, q in enumerate(fields["q"]):
        v[off + 4 * a + queue_bin(q)] = 1.0
    put("delay", delay_bin(fields["mean_delay"]))
    put("ttc_p10", ttc_bin(fields["ttc_p10"]))
    put("ttc_p50", ttc_bin(fields["ttc_p50"]))
    put("red", int(fields["rho_red"]))
    put("brakes", int(fields["h_brake"]))
    return v


_TRI_CACHE: dict = {}


def trigram_features(text: str) -> np.ndarray:
    """Hashed character-trigram frequencies, L2-normalized."""
    v = np.zeros(N_TRIGRAM)
    t = text.lower()
    for i in range(len(t) - 2):
        g = t[i:i + 3]
        b = _TRI_CACHE.get(g)
        if b is None:
            b = _TRI_CACHE[g] = zlib.crc32(g.encode()) % N_TRIGRAM
        v[b] += 1.0
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


_SENT_SPLIT = re.compile(r"(?<=\.)\s+")


def _drop_groups(text: str, kind: str, groups: frozenset) -> str:
    if not groups:
        return text
    if kind == "shuffled":
        drop = {k for g in groups for k in _GROUP_SLOTS[g]}
        return "; ".join(s for s in text.split("; ") if s.split("=")[0] not in drop)
    from .captioner import _FACT_RES, _RED_NO, _RED_YES

    drop = {f for g in groups for f in _GROUP_FACTS[g]}
    kept = []
    for sent in _SENT_SPLIT.split(text):
        fact = "red" if sent in _RED_YES or sent in _RED_NO else next(
            (f for f, rx in _FACT_RES if rx.match(sent)), None)
        if fact not in drop:
            kept.append(sent)
    return " ".join(kept)


def encode(obs: Observation, caption: Optional[str], spec: EncoderSpec) -> np.ndarray:
    """Feature vector for one observation; ``caption`` must match the mode's rendering
    (``None`` renders it)."""
    mode = spec.mode
    if caption is None:
        caption = caption_for_mode(obs, spec)
    x = (np.asarray(raw_numeric(obs)) - spec.x_mean) / spec.x_std
    for g in mode.field_mask:
        for name in _GROUP_NUMERIC[g]:
            x[NUMERIC_NAMES.index(name)] = 0.0
    if mode.kind == "numeric_only":
        return x
    if mode.kind == "structured_fusion":
        try:
            oh = _onehot(parse_caption(caption))
        except CaptionParseError as err:
            raise EncodingError(f"structured_fusion needs a structured caption: {err}") from err
        for g in mode.field_mask:
            for name in _GROUP_ONEHOT[g]:
                off, w = _ONEHOT[name]
                oh[off:off + w] = 0.0
        return np.concatenate([x, oh])
    return np.concatenate([x, trigram_features(_drop_groups(caption, mode.kind, mode.field_mask))])


def encode_many(observations: Sequence[Observation], spec: EncoderSpec,
                captions: Optional[Sequence[Optional[str]]] = None) -> np.ndarray:
    if captions is None:
        captions = [None] * len(observations)
    if not observations:
        return np.zeros((0, spec.dim))
    return np.stack([encode(o, c, spec) for o, c in zip(observations, captions)])


# -- scorer --------------------------------------------------------------------------

@dataclass
class Hyper:
    tau_bt: float = 1.0
    eta: float = 1e-4
    zeta: float = 1e-2

    def __post_init__(self):
        if not self.tau_bt > 0:
            raise ValueError("tau_bt must be positive")


@dataclass
class RewardModelParams:
    encoder: EncoderSpec
    W1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float
    hyper: Hyper = field(default_factory=Hyper)

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def linear(self) -> bool:
        return self.hidden == 0

    @classmethod
    def init(cls, encoder: EncoderSpec, hidden: int = 32, seed: int = 0,
             hyper: Optional[Hyper] = None) -> "RewardModelParams":
        rng = np.random.default_rng(seed)
        D = encoder.dim
        hyper = hyper or Hyper()
        if hidden == 0:
            return cls(encoder, np.zeros((0, D)), np.zeros(0), np.zeros(D), 0.0, hyper)
        W1 = rng.uniform(-1, 1, (hidden, D)) / math.sqrt(D)
        w2 = rng.uniform(-1, 1, hidden) / math.sqrt(hidden)
        return cls(encoder, W1, np.zeros(hidden), w2, 0.0, hyper)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.b1, self.w2, [self.b2]])

    def with_flat(self, theta: np.ndarray) -> "RewardModelParams":
        H, D = self.W1.shape
        i = 0
        W1 = theta[i:i + H * D].reshape(H, D)
        i += H * D
        b1 = theta[i:i + H]
        i += H
        n2 = D if H == 0 else H
        w2 = theta[i:i + n2]
        i += n2
        return RewardModelParams(self.encoder, W1.copy(), b1.copy(), w2.copy(), float(theta[i]),
                                 self.hyper)

    def copy(self) -> "RewardModelParams":
        return self.with_flat(self.flat())


def score(params: RewardModelParams, features: np.ndarray) -> np.ndarray | float:
    """Scorer output for one feature vector (scalar) or a batch (1-D array)."""
    F = np.asarray(features, dtype=float)
    single = F.ndim == 1
    F2 = F[None, :] if single else F
    if F2.shape[1] != params.encoder.dim and not (params.linear and F2.shape[1] == params.w2.size):
        raise ValueError(f"feature dimension {F2.shape[1]} != encoder dimension {params.encoder.dim}")
    if params.linear:
        r = F2 @ params.w2 + params.b2
    else:
        r = np.tanh(F2 @ params.W1.T + params.b1) @ params.w2 + params.b2
    return float(r[0]) if single else r


def bt_probability(r1, r2, tau: float = 1.0):
    """P(y=1) = sigma((r1 - r2) / tau)."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    z = (np.asarray(r1, dtype=float) - np.asarray(r2, dtype=float)) / tau
    p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    return float(p) if np.ndim(p) == 0 else p


@dataclass
class PairBatch:
    F1: np.ndarray
    F2: np.ndarray
    y: np.ndarray  # 1 or 2
    w: np.ndarray

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "PairBatch":
        return PairBatch(self.F1[idx], self.F2[idx], self.y[idx], self.w[idx])


def _forward_backward(params: RewardModelParams, F: np.ndarray, g: np.ndarray):
    """Return (r, grads for flat params) where grads = sum_i g_i * d r_i / d params."""
    if params.linear:
        r = F @ params.w2 + params.b2
        return r, np.concatenate([np.zeros(0), np.zeros(0), F.T @ g, [g.sum()]])
    pre = F @ params.W1.T + params.b1
    h = np.tanh(pre)
    r = h @ params.w2 + params.b2
    gw2 = h.T @ g
    gb2 = g.sum()
    dh = np.outer(g, params.w2) * (1 - h * h)
    gW1 = dh.T @ F
    gb1 = dh.sum(axis=0)
    return r, np.concatenate([gW1.ravel(), gb1, gw2, [gb2]])


def _forward(params: RewardModelParams, F: np.ndarray) -> np.ndarray:
    if F.shape[0] == 0:
        return np.zeros(0)
    return score(params, F)


def loss_and_gradient(params: RewardModelParams, batch: PairBatch,
                      ref_features: Optional[np.ndarray] = None,
                      reduction: str = "sum") -> tuple[float, np.ndarray]:
    """Weighted BT negative log-likelihood plus the L2 and centering terms, with the exact
    gradient with respect to ``params.flat()``.

    ``reduction="mean"`` divides the likelihood term by the batch size.
    """
    if len(batch) == 0:
        raise ValueError("batch must be nonempty")
    hp = params.hyper
    s = np.where(batch.y == 1, 1.0, -1.0)
    r1 = _forward(params, batch.F1)
    r2 = _forward(params, batch.F2)
    z = s * (r1 - r2) / hp.tau_bt
    scale = 1.0 / len(batch) if reduction == "mean" else 1.0
    nll = scale * float(np.sum(batch.w * np.logaddexp(0.0, -z)))
    # d(-log sigma(z))/dz = -(1 - sigma(z)) = -sigma(-z)
    dz = -scale * batch.w * _sigmoid(-z)
    dr1 = dz * s / hp.tau_bt
    _, g1 = _forward_backward(params, batch.F1, dr1)
    _, g2 = _forward_backward(params, batch.F2, -dr1)
    grad = g1 + g2
    theta = params.flat()
    loss = nll + hp.eta * float(theta @ theta)
    grad = grad + 2 * hp.eta * theta
    if ref_features is not None and len(ref_features) and hp.zeta > 0:
        rr = _forward(params, ref_features)
        mu = float(rr.mean())
        loss += hp.zeta * mu * mu
        gref = np.full(len(rr), 2 * hp.zeta * mu / len(rr))
        _, g3 = _forward_backward(params, ref_features, gref)
        grad = grad + g3
    if not np.isfinite(loss):
        raise FloatingPointError(
            f"non-finite loss (batch={len(batch)}, max|r1|={np.max(np.abs(r1)):.3g}, "
            f"max|r2|={np.max(np.abs(r2)):.3g})")
    return loss, grad


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# -- datasets -> batches -------------------------------------------------------------

def pair_batch(pairs, spec: EncoderSpec, cache: Optional[dict] = None) -> PairBatch:
    """Encode LabeledPairs; features are rendered per the encoder mode from the observations."""
    cache = {} if cache is None else cache

    def enc(o: Observation):
        key = json.dumps(o.to_dict(), sort_keys=True)
        v = cache.get(key)
        if v is None:
            v = cache[key] = encode(o, None, spec)
        return v

    pairs = list(pairs)
    if not pairs:
        return PairBatch(np.zeros((0, spec.dim)), np.zeros((0, spec.dim)), np.zeros(0, int), np.zeros(0))
    F1 = np.stack([enc(p.o1) for p in pairs])
    F2 = np.stack([enc(p.o2) for p in pairs])
    y = np.array([p.y for p in pairs], dtype=int)
    w = np.array([p.w for p in pairs], dtype=float)
    return PairBatch(F1, F2, y, w)


@dataclass
class TrainConfig:
    lr: float = 1e-2
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 50
    hidden: int = 32
    reduction: str = "mean"
    n_ref: int = 1024


@dataclass
class TrainResult:
    params: RewardModelParams
    curve: list[dict]


def train_reward_model(train_pairs, encoder: EncoderSpec, hyper: Optional[Hyper] = None,
                       cfg: Optional[TrainConfig] = None, seed: int = 0,
                       ref_observations: Optional[Sequence[Observation]] = None,
                       heldout_pairs=None, init: Optional[RewardModelParams] = None) -> TrainResult:
    """Momentum SGD over shuffled minibatches; deterministic for a fixed seed."""
    cfg = cfg or TrainConfig()
    hyper = hyper or Hyper()
    train_pairs = list(train_pairs)
    if not train_pairs:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(seed)
    params = init.copy() if init is not None else RewardModelParams.init(
        encoder, cfg.hidden, int(rng.integers(2**31)), hyper)
    cache: dict = {}
    data = pair_batch(train_pairs, encoder, cache)
    held = pair_batch(heldout_pairs, encoder, cache) if heldout_pairs else None
    if ref_observations is None:
        ref_observations = [p.o1 for p in train_pairs] + [p.o2 for p in train_pairs]
    ref_observations = list(ref_observations)
    if len(ref_observations) > cfg.n_ref:
        pick = rng.choice(len(ref_observations), cfg.n_ref, replace=False)
        ref_observations = [ref_observations[i] for i in sorted(pick)]
    ref = encode_many(ref_observations, encoder)

    theta = params.flat()
    vel = np.zeros_like(theta)
    curve = []
    n = len(data)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            mb = data.subset(order[start:start + cfg.batch_size])
            _, grad = loss_and_gradient(params.with_flat(theta), mb, ref, cfg.reduction)
            vel = cfg.momentum * vel - cfg.lr * grad
            theta = theta + vel
        params = params.with_flat(theta)
        full, _ = loss_and_gradient(params, data, ref, cfg.reduction)
        if not np.isfinite(full) or full > 1e6:
            raise TrainingError(f"training diverged at epoch {epoch}: loss={full:.3g}")
        row = {"epoch": epoch, "train_loss": full,
               "heldout_accuracy": pairwise_accuracy(params, held) if held is not None and len(held) else float("nan")}
        curve.append(row)
    return TrainResult(params.with_flat(theta), curve)


# -- evaluation ---------------------------------------------------------------------

def pairwise_accuracy(params: RewardModelParams, batch: PairBatch) -> float:
    d = score(params, batch.F1) - score(params, batch.F2)
    s = np.where(batch.y == 1, 1.0, -1.0)
    hit = np.where(d == 0, 0.5, (np.sign(d) == s).astype(float))
    return float(hit.mean())


def auc_score(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC with ties counted one half."""
    scores = np.asarray(scores, float)
    labels = np.asarray(labels, bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def evaluate_offline(params, heldout_pairs, utility: Optional[Callable[[Observation], float]] = None,
                     scorer: Optional[Callable] = None) -> dict:
    """Pairwise accuracy, AUC of the score difference for y=1, and Spearman against a
    known utility over the distinct held-out observations."""
    pairs = list(heldout_pairs)
    if not pairs:
        raise ValueError("held-out set is empty")
    fn = scorer or (lambda obs: score(params, encode_many(obs, params.encoder)))
    r1 = np.asarray(fn([p.o1 for p in pairs]), float)
    r2 = np.asarray(fn([p.o2 for p in pairs]), float)
    y = np.array([p.y for p in pairs])
    d = r1 - r2
    s = np.where(y == 1, 1.0, -1.0)
    acc = float(np.where(d == 0, 0.5, (np.sign(d) == s)).mean())
    out = {"pairwise_accuracy": acc, "auc": auc_score(d, y == 1), "spearman": float("nan"), "n": len(pairs)}
    if utility is not None:
        seen = {}
        for p in pairs:
            for o in (p.o1, p.o2):
                seen.setdefault(json.dumps(o.to_dict(), sort_keys=True), o)
        obs = list(seen.values())
        rr = np.asarray(fn(obs), float)
        uu = np.array([utility(o) for o in obs])
        out["spearman"] = float(spearmanr(rr, uu).statistic)
    return out


class FusedScorer:
    """Convex combination ``lam * source + (1 - lam) * target`` of two scorers."""

    def __init__(self, source: RewardModelParams, target: RewardModelParams, lam: float):
        if not 0 <= lam <= 1:
            raise ValueError("fusion weight must lie in [0, 1]")
        if not source.encoder.compatible(target.encoder):
            raise ValueError("scorers use different encoders")
        self.source, self.target, self.lam = source, target, lam
        self.encoder = source.encoder

    def score(self, features):
        return self.lam * score(self.source, features) + (1 - self.lam) * score(self.target, features)


def fuse_scorers(source: RewardModelParams, target: RewardModelParams, lam: float) -> FusedScorer:
    return FusedScorer(source, target, lam)


def score_observation(scorer, obs: Observation) -> float:
    feats = encode(obs, None, scorer.encoder)
    return float(scorer.score(feats)) if isinstance(scorer, FusedScorer) else float(score(scorer, feats))


# -- persistence ---------------------------------------------------------------------

def save_params(params: RewardModelParams, path: str | Path) -> None:
    doc = {"version": MODEL_VERSION, "encoder": params.encoder.to_dict(),
           "hyper": {"tau_bt": params.hyper.tau_bt, "eta": params.hyper.eta, "zeta": params.hyper.zeta},
           "weights": {"W1": params.W1.tolist(), "b1": params.b1.tolist(), "w2": params.w2.tolist(),
                       "b2": params.b2}}
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_params(path: str | Path) -> RewardModelParams:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model file version {doc.get('version')!r}")
    enc = EncoderSpec.from_dict(doc["encoder"])
    w = doc["weights"]
    W1 = np.asarray(w["W1"], float).reshape(-1, enc.dim)
    return RewardModelParams(enc, W1, np.asarray(w["b1"], float), np.asarray(w["w2"], float),
                             float(w["b2"]), Hyper(**doc["hyper"]))


def write_curve(curve: list[dict], path: str | Path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "heldout_accuracy"])
        wr.writeheader()
        for row in curve:
            wr.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})
