"""Preference labelling of caption pairs.

Verdicts are ``1`` (first caption preferred), ``2`` (second preferred) or ``None``
(abstain). The synthetic judge walks a profile-specific rule table and returns the
verdict of the first rule whose margin is exceeded.

Rule tables (``eps_ttc`` and ``eps_cong`` are the profile margins)::

    balanced            red_risk -> ttc_p10 (eps_ttc)   -> congestion (eps_cong) -> brakes
    safety_focused      ttc_p10 (eps_ttc/2) -> red_risk -> brakes -> congestion (eps_cong)
    efficiency_focused  congestion (eps_cong) -> ttc_p10 (2*eps_ttc) -> red_risk -> brakes

* red_risk: fires when exactly one side has red_risk=0 and prefers that side.
* ttc_p10: fires when |difference| > margin and prefers the higher value.
* congestion: score z(mean queue) + z(mean delay) with pool statistics; fires when
  |difference| > margin and prefers the lower score.
* brakes: fires when the harsh-brake counts differ and prefers fewer.
"""
from __future__ import annotations

import hashlib
import json
import logging
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .captioner import SCHEMA_VERSION, CaptionParseError, fields_of, parse_any
from .pairs import PairingConfig, PoolEntry, PoolStats, sample_pairs
from .sim import Observation

log = logging.getLogger(__name__)

PROFILES = ("balanced", "safety_focused", "efficiency_focused")


class LabelingError(ValueError):
    """A caption could not be parsed; the pair is skipped and counted."""


@dataclass(frozen=True)
class JudgeProfile:
    kind: str = "balanced"
    eps_ttc: float = 0.2
    eps_cong: float = 0.3

    def __post_init__(self):
        if self.kind not in PROFILES:
            raise ValueError(f"unknown judge profile {self.kind!r}")
        if not (self.eps_ttc > 0 and self.eps_cong > 0):
            raise ValueError("judge margins must be positive")

    @property
    def rules(self) -> tuple[tuple[str, float], ...]:
        e_t, e_c = self.eps_ttc, self.eps_cong
        if self.kind == "balanced":
            return (("red", 0.0), ("ttc", e_t), ("cong", e_c), ("brakes", 0.0))
        if self.kind == "safety_focused":
            return (("ttc", e_t / 2), ("red", 0.0), ("brakes", 0.0), ("cong", e_c))
        return (("cong", e_c), ("ttc", 2 * e_t), ("red", 0.0), ("brakes", 0.0))


_UNIT_STATS = PoolStats({f: 0.0 for f in PoolStats.FIELDS}, {f: 1.0 for f in PoolStats.FIELDS})


def _congestion_score(f: dict, stats: PoolStats) -> float:
    mean_q = sum(f["q"]) / 4.0
    return float(stats.z("mean_queue", mean_q) + stats.z("mean_delay", f["mean_delay"]))


def _apply_rule(rule: str, margin: float, a: dict, b: dict, stats: PoolStats) -> Optional[int]:
    if rule == "red":
        if a["rho_red"] != b["rho_red"]:
            return 1 if a["rho_red"] == 0 else 2
    elif rule == "ttc":
        d = a["ttc_p10"] - b["ttc_p10"]
        if abs(d) > margin:
            return 1 if d > 0 else 2
    elif rule == "cong":
        d = _congestion_score(a, stats) - _congestion_score(b, stats)
        if abs(d) > margin:
            return 1 if d < 0 else 2
    elif rule == "brakes":
        if a["h_brake"] != b["h_brake"]:
            return 1 if a["h_brake"] < b["h_brake"] else 2
    else:
        raise ValueError(f"unknown rule {rule!r}")
    return None


class Judge:
    """Interface: ``judge(c1, c2) -> 1 | 2 | None`` plus a metadata id."""

    id: str = "judge"

    def __call__(self, c1: str, c2: str) -> Optional[int]:
        raise NotImplementedError


class SyntheticJudge(Judge):
    def __init__(self, profile: JudgeProfile | str = "balanced", stats: Optional[PoolStats] = None):
        self.profile = JudgeProfile(profile) if isinstance(profile, str) else profile
        self.stats = stats or _UNIT_STATS
        self.id = f"synthetic:{self.profile.kind}"

    def decide_fields(self, a: dict, b: dict) -> Optional[int]:
        for rule, margin in self.profile.rules:
            y = _apply_rule(rule, margin, a, b, self.stats)
            if y is not None:
                return y
        return None

    def __call__(self, c1: str, c2: str) -> Optional[int]:
        try:
            a, b = parse_any(_text(c1)), parse_any(_text(c2))
        except CaptionParseError as err:
            raise LabelingError(str(err)) from err
        return self.decide_fields(a, b)


class NoisyJudge(Judge):
    """Flip decisive verdicts with probability ``p_flip``; abstain with ``p_abstain``.

    Exactly one uniform draw is consumed per call, so the noise sequence does not
    depend on the inner verdicts.
    """

    def __init__(self, inner: Judge, p_flip: float = 0.0, p_abstain: float = 0.0, seed: int = 0):
        if p_flip < 0 or p_abstain < 0 or p_flip + p_abstain > 1:
            raise ValueError("need p_flip, p_abstain >= 0 and p_flip + p_abstain <= 1")
        self.inner, self.p_flip, self.p_abstain = inner, p_flip, p_abstain
        self.rng = np.random.default_rng(seed)
        self.id = f"noisy({inner.id},flip={p_flip},abstain={p_abstain})"

    def __call__(self, c1: str, c2: str) -> Optional[int]:
        y = self.inner(c1, c2)
        u = self.rng.random()
        if u < self.p_abstain:
            return None
        if u < self.p_abstain + self.p_flip and y is not None:
            return 3 - y
        return y


class HttpJudge(Judge):
    """Client for an external judge service.

    Request body ``{prompt_template_id, c1, c2, temperature: 0}``; the response is
    ``{"verdict": "1" | "2" | "abstain"}``. Verdicts are cached on disk under a hash
    of ``(prompt_template_id, c1, c2)`` so repeated runs never re-query.
    """

    def __init__(self, url: str, prompt_template_id: str = "default",
                 cache_dir: Optional[str | Path] = None, timeout: float = 30.0,
                 max_in_flight: int = 4, opener: Optional[Callable] = None):
        self.url, self.prompt_template_id = url, prompt_template_id
        self.cache_dir = Path(cache_dir) if cache_dir else None
        if self.cache_dir:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.timeout = timeout
        self.max_in_flight = max_in_flight
        self._open = opener or urllib.request.urlopen
        self.requests_sent = 0
        self.id = f"http:{url}#{prompt_template_id}"

    def cache_key(self, c1: str, c2: str) -> str:
        blob = json.dumps([self.prompt_template_id, c1, c2], ensure_ascii=False)
        return hashlib.sha256(blob.encode()).hexdigest()

    def __call__(self, c1: str, c2: str) -> Optional[int]:
        c1, c2 = _text(c1), _text(c2)
        key = self.cache_key(c1, c2)
        path = self.cache_dir / f"{key}.json" if self.cache_dir else None
        if path is not None and path.exists():
            verdict = json.loads(path.read_text())["verdict"]
        else:
            body = json.dumps({"prompt_template_id": self.prompt_template_id, "c1": c1, "c2": c2,
                               "temperature": 0}).encode()
            req = urllib.request.Request(self.url, data=body,
                                         headers={"Content-Type": "application/json"})
            with self._open(req, timeout=self.timeout) as resp:
                verdict = json.loads(resp.read().decode())["verdict"]
            self.requests_sent += 1
            if path is not None:
                path.write_text(json.dumps({"verdict": verdict}))
        if verdict not in ("1", "2", "abstain"):
            raise LabelingError(f"unexpected verdict {verdict!r}")
        return None if verdict == "abstain" else int(verdict)

    def judge_many(self, pairs: Sequence[tuple[str, str]]) -> list[Optional[int]]:
        """Judge many pairs with at most ``max_in_flight`` concurrent requests."""
        with ThreadPoolExecutor(self.max_in_flight) as ex:
            return list(ex.map(lambda p: self(*p), pairs))


def make_judge(spec: str, stats: Optional[PoolStats] = None, seed: int = 0,
               cache_dir: Optional[str | Path] = None) -> Judge:
    """Build a judge from ``synthetic:<profile>``, ``noisy:<p_flip>[,<p_abstain>]`` or
    ``http:<url>``."""
    kind, _, arg = spec.partition(":")
    if kind == "synthetic":
        return SyntheticJudge(arg or "balanced", stats)
    if kind == "noisy":
        parts = [float(x) for x in arg.split(",")] if arg else [0.0]
        p_abstain = parts[1] if len(parts) > 1 else 0.0
        return NoisyJudge(SyntheticJudge("balanced", stats), parts[0], p_abstain, seed)
    if kind == "http":
        return HttpJudge(arg, cache_dir=cache_dir)
    raise ValueError(f"unknown judge spec {spec!r}")


# teacher-quality analogs: (p_flip, p_abstain)
TEACHER_NOISE = {"strong": (0.0, 0.0), "large_open": (0.05, 0.0), "small_open": (0.15, 0.05)}


def _text(c) -> str:
    return c if isinstance(c, str) else c.text


# -- frequency weights and dataset --------------------------------------------------

def template_key(tid1: str, tid2: str) -> str:
    a, b = sorted((tid1, tid2))
    return f"{a}|{b}"


def frequency_weights(nu: Sequence[float]) -> np.ndarray:
    """``1/nu`` per pair, rescaled to mean 1."""
    nu = np.asarray(nu, dtype=float)
    if nu.size == 0:
        return nu
    if np.any(nu < 1):
        raise ValueError("template counts must be >= 1")
    w = 1.0 / nu
    return w / w.mean()


def frequency_weight(key: str, counts: dict) -> float:
    """Pre-rescale weight ``1/nu`` of one template key."""
    return 1.0 / counts[key]


@dataclass
class LabeledPair:
    c1: str
    c2: str
    o1: Observation
    o2: Observation
    y: int
    w: float
    template_key: str
    judge_meta: dict = field(default_factory=dict)
    schema_version: str = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version, "c1": self.c1, "c2": self.c2,
                "o1": self.o1.to_dict(), "o2": self.o2.to_dict(), "y": self.y, "w": self.w,
                "template_key": self.template_key, "judge_meta": self.judge_meta}

    @classmethod
    def from_dict(cls, d: dict) -> "LabeledPair":
        return cls(d["c1"], d["c2"], Observation.from_dict(d["o1"]), Observation.from_dict(d["o2"]),
                   int(d["y"]), float(d["w"]), d["template_key"], dict(d.get("judge_meta", {})),
                   d.get("schema_version", SCHEMA_VERSION))


@dataclass
class PrefDataset:
    pairs: list[LabeledPair]
    n_queried: int = 0
    n_abstained: int = 0
    n_errors: int = 0
    judge_id: str = ""
    warning: Optional[str] = None

    def __len__(self):
        return len(self.pairs)

    @property
    def abstention_rate(self) -> float:
        return self.n_abstained / self.n_queried if self.n_queried else 0.0

    def meta(self) -> dict:
        return {"n_queried": self.n_queried, "n_abstained": self.n_abstained,
                "n_errors": self.n_errors, "judge_id": self.judge_id, "warning": self.warning,
                "abstention_rate": self.abstention_rate, "size": len(self.pairs),
                "schema_version": SCHEMA_VERSION}

    def split(self, frac_heldout: float, rng: np.random.Generator) -> tuple["PrefDataset", "PrefDataset"]:
        if not 0 < frac_heldout < 1:
            raise ValueError("held-out fraction must lie in (0, 1)")
        idx = rng.permutation(len(self.pairs))
        n_h = max(1, int(round(frac_heldout * len(idx))))
        held = [self.pairs[i] for i in sorted(idx[:n_h])]
        train = [self.pairs[i] for i in sorted(idx[n_h:])]
        return PrefDataset(train, judge_id=self.judge_id), PrefDataset(held, judge_id=self.judge_id)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        with open(path, "w") as fh:
            for p in self.pairs:
                fh.write(json.dumps(p.to_dict(), sort_keys=True) + "\n")
        path.with_suffix(".meta.json").write_text(json.dumps(self.meta(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "PrefDataset":
        path = Path(path)
        with open(path) as fh:
            pairs = [LabeledPair.from_dict(json.loads(line)) for line in fh if line.strip()]
        ds = cls(pairs)
        meta_path = path.with_suffix(".meta.json")
        if meta_path.exists():
            m = json.loads(meta_path.read_text())
            ds.n_queried, ds.n_abstained = m["n_queried"], m["n_abstained"]
            ds.n_errors, ds.judge_id, ds.warning = m["n_errors"], m["judge_id"], m["warning"]
        return ds


def build_pref_dataset(pool: Sequence[PoolEntry], sampler_cfg: PairingConfig, judge: Judge, M: int,
                       rng: np.random.Generator,
                       caption_fn: Optional[Callable[[PoolEntry], str]] = None) -> PrefDataset:
    """Sample ``M`` pairs, label them and keep decisive verdicts with frequency weights.

    Caption order inside each pair is randomized so that verdicts are balanced between
    1 and 2. ``caption_fn`` lets the judge see an alternative rendering.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    sample = sample_pairs(pool, M, sampler_cfg, rng)
    swaps = rng.random(len(sample.pairs)) < 0.5
    kept, n_abstain, n_err = [], 0, 0
    for cp, swap in zip(sample.pairs, swaps):
        a, b = (pool[cp.b], pool[cp.a]) if swap else (pool[cp.a], pool[cp.b])
        t1 = caption_fn(a) if caption_fn else a.caption
        t2 = caption_fn(b) if caption_fn else b.caption
        try:
            y = judge(t1, t2)
        except LabelingError:
            n_err += 1
            continue
        if y is None:
            n_abstain += 1
            continue
        kept.append(LabeledPair(a.caption, b.caption, a.obs, b.obs, int(y), 1.0,
                                template_key(a.template_id, b.template_id),
                                {"judge": judge.id, "pair_weight": cp.weight}))
    counts: dict = {}
    for p in kept:
        counts[p.template_key] = counts.get(p.template_key, 0) + 1
    for p, w in zip(kept, frequency_weights([counts[p.template_key] for p in kept])):
        p.w = float(w)
    ds = PrefDataset(kept, n_queried=len(sample.pairs), n_abstained=n_abstain, n_errors=n_err,
                     judge_id=judge.id)
    if len(kept) < 0.1 * M:
        ds.warning = f"decisive yield {len(kept)}/{M} below 10%; judge margins may be too wide"
        log.warning(ds.warning)
    elif sample.exhausted:
        ds.warning = f"pair pool exhausted: {len(sample.pairs)} candidates for M={M}"
    return ds


def obs_fields(o: Observation) -> dict:
    """Judge-ready field dict for an observation (rendered precision)."""
    return fields_of(o)


__all__ = [
    "HttpJudge", "JudgeProfile", "LabeledPair", "LabelingError", "NoisyJudge", "PROFILES",
    "PrefDataset", "SyntheticJudge", "TEACHER_NOISE", "build_pref_dataset", "frequency_weight",
    "frequency_weights", "make_judge", "obs_fields", "template_key",
]
