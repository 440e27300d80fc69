"""Experiment orchestration: scenarios, the three-stage pipeline, ablation matrices and reports.

Stage outputs are cached under a cache directory keyed by a hash of the configuration
that produced them, so re-running a spec (or sharing stages between ablation cells)
recomputes nothing::

    cache/pool-<key>/pool.jsonl            behaviour roll-outs (stage 1)
    cache/data-<key>/dataset.jsonl         labelled pairs and the evaluation pairs (stage 2)
    cache/model-<key>/model.json           reward model and offline metrics (stage 2)
    cache/policy-<key>/curve.csv           training curve, checkpoint, evaluation (stage 3)

A pipeline run directory holds one ``seed_<s>/`` folder per seed plus ``aggregate.csv``
and ``summary.json``.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import yaml
from scipy.stats import binomtest

from .controllers import make_controller
from .judge import (
    TEACHER_NOISE,
    NoisyJudge,
    PrefDataset,
    build_pref_dataset,
    make_judge,
)
from .pairs import PairingConfig, PoolStats, collect_pool, load_pool, save_pool
from .ppo import PPOConfig, TrainPolicyResult, save_checkpoint, train_policy, write_curve
from .reward_model import (
    EncoderSpec,
    FeatureMode,
    TrainConfig,
    encode_many,
    evaluate_offline,
    fuse_scorers,
    load_params,
    save_params,
    train_reward_model,
)
from .reward_model import write_curve as write_reward_curve
from .shaping import VARIANTS, variant_config
from .sim import SimConfig, Surge

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("att", "aql", "awt", "throughput", "ttc_p10", "ttc_p25", "brakes_per_km",
                  "oscillation", "mask_activation_rate", "completed", "spawned")
TABLE_METRICS = ("att", "throughput", "ttc_p10", "brakes_per_km")


class StageError(RuntimeError):
    """A stage input is missing; the message names the stage to run first."""


# -- scenarios ----------------------------------------------------------------------

SCENARIOS = ("steady", "surge", "diurnal")


def scenario_config(name: str, rows: int = 2, cols: int = 2, rate: float = 0.1,
                    horizon_s: float = 600.0, seed: int = 0, **overrides) -> SimConfig:
    """Demand profiles: constant rate, a four-fold surge a third of the way in, or a
    two-peak day compressed into the horizon."""
    base = dict(grid_rows=rows, grid_cols=cols, arrival_rate_per_entry=rate, horizon_s=horizon_s, seed=seed)
    if name == "steady":
        pass
    elif name == "surge":
        base["surge"] = Surge(factor=4.0, start_s=horizon_s / 3, ramp_s=horizon_s / 10)
    elif name == "diurnal":
        h = horizon_s
        base["diurnal"] = ((0.0, 0.3), (0.2 * h, 0.6), (0.33 * h, 1.5), (0.5 * h, 0.8),
                           (0.7 * h, 1.6), (0.85 * h, 0.7), (h, 0.3))
    else:
        raise ValueError(f"unknown scenario {name!r}; choose from {SCENARIOS}")
    cfg = SimConfig(**base)
    if overrides:
        cfg = cfg.replace(**overrides)
    return cfg.validate()


# -- experiment spec ------------------------------------------------------------------

@dataclass
class ExperimentSpec:
    label: str = "run"
    scenario: str = "steady"
    grid: tuple = (2, 2)
    arrival_rate: float = 0.1
    horizon_s: float = 600.0
    sim_overrides: dict = field(default_factory=dict)
    seeds: tuple = (0, 1, 2, 3, 4)
    data_seed: int = 0
    # stage 1: behaviour pool
    pool_controllers: tuple = ("random", "max_pressure", "fixed")
    pool_episodes: int = 3
    pool_rate_scale: float = 1.2
    sample_every: float = 7.0
    # stage 2: labels and reward model
    judge: str = "synthetic:balanced"
    pair_budget: int = 2000
    eval_pairs: int = 1000
    feature_mode: str = "structured_fusion"
    field_mask: tuple = ()
    hidden: int = 32
    epochs: int = 50
    # stage 3: policy
    variant: str = "full"
    lambda_max: float = 0.5
    tau_ttc: float = 1.5
    iterations: int = 40
    episodes: int = 2
    eval_seeds: tuple = (9001, 9002)

    def __post_init__(self):
        self.grid = tuple(int(x) for x in self.grid)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.pool_controllers = tuple(self.pool_controllers)
        self.field_mask = tuple(sorted(self.field_mask))
        self.eval_seeds = tuple(int(s) for s in self.eval_seeds)

    def validate(self) -> "ExperimentSpec":
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown shaping variant {self.variant!r}")
        if self.pair_budget < 1 or self.eval_pairs < 1:
            raise ValueError("pair_budget and eval_pairs must be >= 1")
        FeatureMode(self.feature_mode, frozenset(self.field_mask))
        self.sim_config()
        self.shaping_config()
        self.ppo_config()
        return self

    @property
    def needs_scorer(self) -> bool:
        return self.shaping_config().use_intrinsic

    def sim_config(self, seed: int = 0) -> SimConfig:
        return scenario_config(self.scenario, self.grid[0], self.grid[1], self.arrival_rate,
                               self.horizon_s, seed, **self.sim_overrides)

    def shaping_config(self):
        return variant_config(self.variant, lambda_max=self.lambda_max, tau_ttc=self.tau_ttc)

    def ppo_config(self) -> PPOConfig:
        return PPOConfig(iterations=self.iterations, episodes=self.episodes, horizon=self.horizon_s,
                         eval_seeds=self.eval_seeds)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown experiment keys: {sorted(unknown)}")
        return cls(**d)

    def with_(self, **changes) -> "ExperimentSpec":
        return replace(self, **changes)


def load_spec(path: str | Path) -> ExperimentSpec:
    """Read an experiment file (YAML or JSON) whose keys are ExperimentSpec fields."""
    data = yaml.safe_load(Path(path).read_text()) or {}
    return ExperimentSpec.from_dict(data).validate()


def config_hash(obj) -> str:
    """Stable across runs and machines: sha256 of canonical JSON."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (tuple, frozenset, set)):
        return sorted(o) if isinstance(o, (frozenset, set)) else list(o)
    if hasattr(o, "to_dict"):
        return o.to_dict()
    raise TypeError(f"cannot hash {type(o).__name__}")


# stage keys: each includes the key of the stage it consumes

def pool_key(spec: ExperimentSpec) -> str:
    sim = spec.sim_config().replace(arrival_rate_per_entry=spec.arrival_rate * spec.pool_rate_scale)
    return config_hash({"stage": "pool", "sim": sim.to_dict(), "controllers": spec.pool_controllers,
                        "episodes": spec.pool_episodes, "every": spec.sample_every, "seed": spec.data_seed})


def data_key(spec: ExperimentSpec) -> str:
    return config_hash({"stage": "data", "pool": pool_key(spec), "judge": spec.judge,
                        "M": spec.pair_budget, "eval_pairs": spec.eval_pairs, "seed": spec.data_seed})


def model_key(spec: ExperimentSpec) -> str:
    return config_hash({"stage": "model", "data": data_key(spec), "mode": spec.feature_mode,
                        "mask": spec.field_mask, "hidden": spec.hidden, "epochs": spec.epochs,
                        "seed": spec.data_seed})


def policy_key(spec: ExperimentSpec, seed: int) -> str:
    return config_hash({"stage": "policy", "model": model_key(spec) if spec.needs_scorer else None,
                        "sim": spec.sim_config().to_dict(), "shaping": asdict(spec.shaping_config()),
                        "ppo": asdict(spec.ppo_config()), "seed": seed})


# -- file helpers --------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.10g}"
    return str(v)


def write_rows(path: str | Path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    tmp = Path(f"{path}.tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])
    os.replace(tmp, path)


def _write_json(path: Path, obj) -> None:
    tmp = Path(f"{path}.tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))
    os.replace(tmp, path)


def _done(d: Path) -> bool:
    return (d / "DONE").exists()


def _mark_done(d: Path) -> None:
    (d / "DONE").write_text("")


# -- stages ---------------------------------------------------------------------------

def stage_pool(spec: ExperimentSpec, cache: Path) -> Path:
    d = cache / f"pool-{pool_key(spec)}"
    if _done(d):
        log.info("cache hit: pool %s", d.name)
        return d
    d.mkdir(parents=True, exist_ok=True)
    sim = spec.sim_config().replace(arrival_rate_per_entry=spec.arrival_rate * spec.pool_rate_scale)
    makers = [_controller_factory(name) for name in spec.pool_controllers]
    pool = collect_pool(sim, makers, spec.pool_episodes, spec.sample_every, spec.data_seed)
    save_pool(pool, d / "pool.jsonl")
    stats = PoolStats.from_observations([e.obs for e in pool])
    _write_json(d / "stats.json", stats.to_dict())
    _mark_done(d)
    return d


def _controller_factory(name: str) -> Callable:
    return lambda seed: make_controller(name, seed)


def _judge_for(spec: ExperimentSpec, stats: PoolStats, seed: int, cache: Path):
    return make_judge(spec.judge, stats, seed=seed, cache_dir=cache / "http-judge")


def stage_data(spec: ExperimentSpec, cache: Path) -> Path:
    d = cache / f"data-{data_key(spec)}"
    if _done(d):
        log.info("cache hit: dataset %s", d.name)
        return d
    pdir = cache / f"pool-{pool_key(spec)}"
    if not _done(pdir):
        raise StageError("no behaviour pool for this spec; run the collect stage first")
    d.mkdir(parents=True, exist_ok=True)
    pool = load_pool(pdir / "pool.jsonl")
    stats = PoolStats.from_dict(json.loads((pdir / "stats.json").read_text()))
    ss = np.random.SeedSequence([spec.data_seed, 2])
    train_rng, eval_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    judge = _judge_for(spec, stats, spec.data_seed, cache)
    ds = build_pref_dataset(pool, PairingConfig(stats=stats), judge, spec.pair_budget, train_rng)
    # evaluation pairs are labelled by the noiseless version of the judge
    clean = judge.inner if isinstance(judge, NoisyJudge) else judge
    ev = build_pref_dataset(pool, PairingConfig(stats=stats), clean, spec.eval_pairs, eval_rng)
    held = {frozenset((p.c1, p.c2)) for p in ev.pairs}
    kept = [p for p in ds.pairs if frozenset((p.c1, p.c2)) not in held]
    ds.pairs = kept
    ds.save(d / "dataset.jsonl")
    ev.save(d / "eval.jsonl")
    _mark_done(d)
    return d


def stage_model(spec: ExperimentSpec, cache: Path) -> Path:
    d = cache / f"model-{model_key(spec)}"
    if _done(d):
        log.info("cache hit: reward model %s", d.name)
        return d
    ddir = cache / f"data-{data_key(spec)}"
    if not _done(ddir):
        raise StageError("no preference dataset for this spec; run the label stage first")
    d.mkdir(parents=True, exist_ok=True)
    ds = PrefDataset.load(ddir / "dataset.jsonl")
    ev = PrefDataset.load(ddir / "eval.jsonl")
    pool = load_pool(cache / f"pool-{pool_key(spec)}" / "pool.jsonl")
    obs = [e.obs for e in pool]
    enc = EncoderSpec.fit(FeatureMode(spec.feature_mode, frozenset(spec.field_mask)), obs)
    cfg = TrainConfig(hidden=spec.hidden, epochs=spec.epochs)
    res = train_reward_model(ds.pairs, enc, cfg=cfg, seed=spec.data_seed, ref_observations=obs,
                             heldout_pairs=ev.pairs)
    save_params(res.params, d / "model.json")
    write_reward_curve(res.curve, d / "reward_curve.csv")
    off = evaluate_offline(res.params, ev.pairs)
    off.update(train_size=len(ds), abstention_rate=ds.abstention_rate, warning=ds.warning)
    _write_json(d / "offline.json", off)
    _mark_done(d)
    return d


def _policy_job(args) -> dict:
    spec_dict, seed, cache = args
    spec = ExperimentSpec.from_dict(spec_dict)
    return _stage_policy(spec, seed, Path(cache))


def _stage_policy(spec: ExperimentSpec, seed: int, cache: Path) -> dict:
    d = cache / f"policy-{policy_key(spec, seed)}"
    if _done(d):
        log.info("cache hit: policy %s (seed %d)", d.name, seed)
        return json.loads((d / "eval.json").read_text())
    scorer = None
    if spec.needs_scorer:
        mdir = cache / f"model-{model_key(spec)}"
        if not _done(mdir):
            raise StageError("no reward model for this spec; run the train-reward stage first")
        scorer = load_params(mdir / "model.json")
    d.mkdir(parents=True, exist_ok=True)
    res: TrainPolicyResult = train_policy(spec.sim_config(), scorer, spec.shaping_config(),
                                          spec.ppo_config(), seed=seed)
    write_curve(res.curve, d / "curve.csv")
    save_checkpoint(res, d / "policy.json", {"seed": seed, "label": spec.label})
    _write_json(d / "eval.json", res.eval_metrics)
    _mark_done(d)
    return res.eval_metrics


# -- pipeline ---------------------------------------------------------------------------

@dataclass
class PipelineResult:
    out: Path
    per_seed: dict
    offline: Optional[dict] = None

    def metric(self, name: str) -> list[float]:
        return [_num(self.per_seed[s].get(name)) for s in sorted(self.per_seed)]


def _num(v) -> float:
    return float("nan") if v is None else float(v)


def run_offline(spec: ExperimentSpec, cache: str | Path) -> dict:
    """Stages 1 and 2 only; returns the offline metrics of the reward model."""
    cache = Path(cache)
    stage_pool(spec, cache)
    stage_data(spec, cache)
    mdir = stage_model(spec, cache)
    return json.loads((mdir / "offline.json").read_text())


def run_pipeline(spec: ExperimentSpec, out: str | Path, cache: Optional[str | Path] = None,
                 workers: int = 1) -> PipelineResult:
    """Run every stage the spec needs and write per-seed artifacts plus an aggregate table.

    External-only specs skip the offline stages entirely.
    """
    spec.validate()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cache = Path(cache) if cache is not None else out / "cache"
    cache.mkdir(parents=True, exist_ok=True)
    offline = run_offline(spec, cache) if spec.needs_scorer else None
    jobs = [(spec.to_dict(), s, str(cache)) for s in spec.seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(min(workers, len(jobs))) as ex:
            metrics = list(ex.map(_policy_job, jobs))
    else:
        metrics = [_policy_job(j) for j in jobs]
    per_seed = dict(zip(spec.seeds, metrics))
    for s in spec.seeds:
        sd = out / f"seed_{s}"
        sd.mkdir(exist_ok=True)
        src = cache / f"policy-{policy_key(spec, s)}"
        for name in ("curve.csv", "eval.json", "policy.json"):
            shutil.copyfile(src / name, sd / name)
    rows = [{"seed": s, **per_seed[s]} for s in spec.seeds]
    rows += [{"seed": "mean", **_agg(rows, np.mean)}, {"seed": "std", **_agg(rows, _std)}]
    write_rows(out / "aggregate.csv", rows, ("seed",) + METRIC_COLUMNS)
    _write_json(out / "summary.json", {"label": spec.label, "spec": spec.to_dict(),
                                        "per_seed": {str(s): per_seed[s] for s in spec.seeds},
                                        "offline": offline})
    return PipelineResult(out, per_seed, offline)


def _std(x) -> float:
    x = np.asarray(x, float)
    return float(np.std(x, ddof=1)) if x.size > 1 else 0.0


def _agg(rows, fn) -> dict:
    out = {}
    for c in METRIC_COLUMNS:
        vals = np.array([_num(r.get(c)) for r in rows if isinstance(r.get("seed"), int)])
        vals = vals[np.isfinite(vals)]
        out[c] = float(fn(vals)) if vals.size else float("nan")
    return out


# -- ablation matrices -----------------------------------------------------------------

def _teacher(name: str) -> str:
    p_flip, p_abstain = TEACHER_NOISE[name]
    return "synthetic:balanced" if p_flip == p_abstain == 0 else f"noisy:{p_flip},{p_abstain}"


D1_BUDGETS = (100, 250, 500, 1000, 2000, 4000)
D2_LAMBDA = (0.3, 0.5, 0.7)
D2_TAU = (1.3, 1.5, 1.8)

MATRICES: dict[str, list[tuple[str, dict]]] = {
    "A1": [(v, {"variant": v}) for v in ("external_only", "no_intrinsic", "no_mask", "full")],
    "A2": [(m, {"feature_mode": m}) for m in ("numeric_only", "unstructured", "shuffled", "structured_fusion")],
    "A3": [(v, {"variant": v}) for v in ("full", "no_norm", "no_schedule")],
    "B1": [(p, {"judge": f"synthetic:{p}"}) for p in ("balanced", "safety_focused", "efficiency_focused")],
    "B2": [(t, {"judge": _teacher(t)}) for t in ("strong", "large_open", "small_open")],
    "C2": [("all_fields", {"field_mask": ()}), ("no_risk", {"field_mask": ("risk",)}),
           ("no_congestion", {"field_mask": ("congestion",)})],
    "D1": [(f"M={m}", {"pair_budget": m}) for m in D1_BUDGETS],
    "D2": [(f"lambda_max={lam},tau_ttc={tau}", {"lambda_max": lam, "tau_ttc": tau})
           for lam in D2_LAMBDA for tau in D2_TAU],
}
# matrices whose cells differ only in the offline stages
OFFLINE_MATRICES = ("A2", "B2", "C2", "D1")


def expand_matrix(matrix: str, base: ExperimentSpec) -> list[ExperimentSpec]:
    if matrix not in MATRICES:
        raise ValueError(f"unknown matrix {matrix!r}; choose from {sorted(MATRICES)}")
    return [base.with_(label=name, **changes).validate() for name, changes in MATRICES[matrix]]


@dataclass
class AblationResult:
    matrix: str
    rows: list[dict]
    failed: list[str]
    table_path: Path
    extra: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failed

    def row(self, variant: str) -> dict:
        return next(r for r in self.rows if r["variant"] == variant)


def _cell_row(label: str, results: dict, offline: list[dict]) -> dict:
    row = {"variant": label, "n_seeds": len(results), "status": "ok"}
    for m in TABLE_METRICS:
        vals = np.array([_num(r.get(m)) for r in results.values()])
        vals = vals[np.isfinite(vals)]
        row[f"{m}_mean"] = float(vals.mean()) if vals.size else float("nan")
        row[f"{m}_std"] = _std(vals) if vals.size else float("nan")
    if offline:
        acc = np.array([o["pairwise_accuracy"] for o in offline])
        row["heldout_accuracy_mean"] = float(acc.mean())
        row["heldout_accuracy_std"] = _std(acc)
    return row


def run_ablation(matrix: str, base: ExperimentSpec, out: str | Path, workers: int = 1,
                 offline_only: bool = False) -> AblationResult:
    """Run every cell of a matrix over the base seeds and write ``<matrix>.csv``.

    With ``offline_only`` only stages 1 and 2 run and each seed gets its own pool,
    labels and reward model, so held-out accuracy is reported as mean and std over
    seeds. A cell that raises is kept in the table with status ``FAILED``.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cache = out / "cache"
    specs = expand_matrix(matrix, base)
    rows, failed = [], []
    for spec in specs:
        try:
            if offline_only:
                offline = [run_offline(spec.with_(data_seed=s), cache) for s in spec.seeds]
                row = _cell_row(spec.label, {}, offline)
            else:
                res = run_pipeline(spec, out / _safe(spec.label), cache=cache, workers=workers)
                row = _cell_row(spec.label, res.per_seed, [res.offline] if res.offline else [])
                for m in TABLE_METRICS:
                    row[f"{m}_per_seed"] = ";".join(_fmt(v) for v in res.metric(m))
        except Exception as err:  # a failed cell is reported, not fatal
            log.error("cell %s failed: %s", spec.label, err)
            failed.append(spec.label)
            row = {"variant": spec.label, "n_seeds": len(spec.seeds), "status": f"FAILED: {err}"}
        if matrix == "D1":
            row["M"] = spec.pair_budget
        if matrix == "D2":
            row["lambda_max"], row["tau_ttc"] = spec.lambda_max, spec.tau_ttc
        rows.append(row)
    cols = ["variant"] + (["M"] if matrix == "D1" else []) \
        + (["lambda_max", "tau_ttc"] if matrix == "D2" else []) + ["n_seeds", "status"]
    if not offline_only:
        for m in TABLE_METRICS:
            cols += [f"{m}_mean", f"{m}_std"]
    if any("heldout_accuracy_mean" in r for r in rows):
        cols += ["heldout_accuracy_mean", "heldout_accuracy_std"]
    if not offline_only:
        cols += [f"{m}_per_seed" for m in TABLE_METRICS]
    path = out / f"{matrix}.csv"
    write_rows(path, rows, cols)
    extra = {}
    if matrix == "D2" and not offline_only:
        extra = {"att_relative_spread": att_spread([r.get("att_mean", float("nan")) for r in rows])}
        _write_json(out / "D2_summary.json", extra)
    return AblationResult(matrix, rows, failed, path, extra)


def att_spread(values: Sequence[float]) -> float:
    """(max - min) / mean over the grid cells."""
    v = np.asarray(values, float)
    if not np.all(np.isfinite(v)) or v.size == 0:
        return float("nan")
    return float((v.max() - v.min()) / v.mean())


def _safe(label: str) -> str:
    return "".join(c if c.isalnum() or c in "-_.=," else "_" for c in label)


# -- directional checks -----------------------------------------------------------------

def sign_test_p(wins: int, n: int) -> float:
    """One-sided sign test: P(at least ``wins`` successes in ``n`` fair coin flips)."""
    if n == 0:
        return 1.0
    return float(binomtest(wins, n, 0.5, alternative="greater").pvalue)


@dataclass
class DirectionalOutcome:
    passed: bool
    wins: int
    n: int
    p_value: Optional[float] = None
    fallback: bool = False

    def describe(self) -> str:
        s = f"{self.wins}/{self.n}"
        if self.fallback:
            s += f", sign test p={self.p_value:.3g}"
        return s


def directional_check(outcomes: Callable[[Sequence[int]], list[bool]], seeds: Sequence[int],
                      need: int, fallback_seeds: Sequence[int], alpha: float = 0.1) -> DirectionalOutcome:
    """Pass when at least ``need`` of the per-seed outcomes hold; otherwise re-run on
    ``fallback_seeds`` and pass when a one-sided sign test rejects chance at ``alpha``."""
    first = outcomes(seeds)
    wins = int(sum(first))
    if wins >= need:
        return DirectionalOutcome(True, wins, len(first))
    more = outcomes(fallback_seeds)
    k = int(sum(more))
    p = sign_test_p(k, len(more))
    return DirectionalOutcome(p < alpha, k, len(more), p, True)


# -- report ----------------------------------------------------------------------------------

def report(dirs: Sequence[str | Path], out: str | Path) -> dict:
    """Aggregate every ``summary.json`` under ``dirs``.

    Writes ``report.csv`` (one row per run label, sorted by mean ATT ascending),
    ``pareto.csv`` (one ATT / TTC p10 point per label and seed) and ``summary.txt``.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    summaries = []
    for d in dirs:
        summaries += [json.loads(p.read_text()) for p in sorted(Path(d).rglob("summary.json"))]
    rows, points = [], []
    for s in summaries:
        per = s["per_seed"]
        row = {"label": s["label"], "n_seeds": len(per)}
        for m in TABLE_METRICS + ("aql", "awt", "oscillation"):
            vals = np.array([_num(v.get(m)) for v in per.values()])
            vals = vals[np.isfinite(vals)]
            row[f"{m}_mean"] = float(vals.mean()) if vals.size else float("nan")
            row[f"{m}_std"] = _std(vals) if vals.size else float("nan")
        if s.get("offline"):
            row["heldout_accuracy"] = s["offline"]["pairwise_accuracy"]
        rows.append(row)
        for seed, v in per.items():
            points.append({"label": s["label"], "seed": seed, "att": v.get("att"), "ttc_p10": v.get("ttc_p10")})
    rows.sort(key=lambda r: (math.inf if math.isnan(r["att_mean"]) else r["att_mean"], r["label"]))
    cols = ["label", "n_seeds"] + [f"{m}_{k}" for m in TABLE_METRICS + ("aql", "awt", "oscillation")
                                   for k in ("mean", "std")] + ["heldout_accuracy"]
    write_rows(out / "report.csv", rows, cols)
    write_rows(out / "pareto.csv", points, ("label", "seed", "att", "ttc_p10"))
    lines = []
    if not rows:
        log.warning("report: no completed runs found under %s", [str(d) for d in dirs])
        lines.append("no completed runs found")
    for r in rows:
        lines.append(f"{r['label']}: ATT {r['att_mean']:.2f} +/- {r['att_std']:.2f} s, "
                     f"TTC p10 {r['ttc_p10_mean']:.2f} s, brakes/km {r['brakes_per_km_mean']:.3f}, "
                     f"throughput {r['throughput_mean']:.0f} veh/h ({r['n_seeds']} seeds)")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    return {"rows": rows, "points": points}


# -- transfer -------------------------------------------------------------------------------

def run_transfer(source: ExperimentSpec, target_scenario: str, out: str | Path,
                 fractions: Sequence[float] = (0.01, 0.05), lambdas: Sequence[float] = (0.0, 0.5, 1.0)) -> list[dict]:
    """Score a source-scenario reward model zero-shot on target-scenario evaluation pairs,
    then retrain with a small share of target pairs appended and sweep the fusion weight."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cache = out / "cache"
    target = source.with_(scenario=target_scenario, label=f"target-{target_scenario}")
    run_offline(source, cache)
    run_offline(target, cache)
    src_model = load_params(cache / f"model-{model_key(source)}" / "model.json")
    src_data = PrefDataset.load(cache / f"data-{data_key(source)}" / "dataset.jsonl")
    tgt_data = PrefDataset.load(cache / f"data-{data_key(target)}" / "dataset.jsonl")
    tgt_eval = PrefDataset.load(cache / f"data-{data_key(target)}" / "eval.jsonl")
    src_pool = load_pool(cache / f"pool-{pool_key(source)}" / "pool.jsonl")
    rows = [{"setting": "zero_shot", "fraction": 0.0, "lambda": 1.0,
             "accuracy": evaluate_offline(src_model, tgt_eval.pairs)["pairwise_accuracy"]}]
    rng = np.random.default_rng(source.data_seed)
    for frac in fractions:
        n = max(1, int(round(frac * len(tgt_data))))
        pick = rng.choice(len(tgt_data), n, replace=False)
        few = [tgt_data.pairs[i] for i in sorted(pick)]
        res = train_reward_model(src_data.pairs + few, src_model.encoder,
                                 cfg=TrainConfig(hidden=source.hidden, epochs=source.epochs),
                                 seed=source.data_seed, ref_observations=[e.obs for e in src_pool])
        for lam in lambdas:
            fused = fuse_scorers(src_model, res.params, lam)
            acc = evaluate_offline(None, tgt_eval.pairs, scorer=lambda obs, f=fused: f.score(
                encode_many(obs, f.encoder)))["pairwise_accuracy"]
            rows.append({"setting": "few_shot_fused", "fraction": frac, "lambda": lam, "accuracy": acc})
    write_rows(out / "transfer.csv", rows, ("setting", "fraction", "lambda", "accuracy"))
    return rows


__all__ = [
    "AblationResult", "D1_BUDGETS", "D2_LAMBDA", "D2_TAU", "DirectionalOutcome", "ExperimentSpec",
    "MATRICES", "OFFLINE_MATRICES", "PipelineResult", "SCENARIOS", "StageError", "att_spread",
    "config_hash", "data_key", "directional_check", "expand_matrix", "load_spec", "model_key",
    "policy_key", "pool_key", "report", "run_ablation", "run_offline", "run_pipeline", "run_transfer",
    "scenario_config", "sign_test_p", "stage_data", "stage_model", "stage_pool",
]
