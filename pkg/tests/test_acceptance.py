"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The reinforcement-learning suites (criteria 11-14) train on a 2x2 grid with a 600 s
horizon, 40 iterations and 5 seeds, sharing trained policies through one stage cache.
Set ``TRAFFICPREF_ACCEPTANCE_DIR`` to keep that cache between sessions; by default a
fresh temporary directory is used so every number is recomputed.
"""
from __future__ import annotations

import dataclasses
import itertools
import os
import time
from pathlib import Path

import numpy as np
import pytest

from helpers import random_observation
from trafficpref.captioner import parse_caption, render_caption, render_text
from trafficpref.controllers import CYCLE, FixedTimeController
from trafficpref.harness import (
    ExperimentSpec,
    att_spread,
    directional_check,
    expand_matrix,
    run_ablation,
    run_offline,
    run_pipeline,
    sign_test_p,
)
from trafficpref.ppo import gae
from trafficpref.reward_model import MODES, EncoderSpec, Hyper, PairBatch, RewardModelParams, encode, \
    loss_and_gradient
from trafficpref.shaping import ShapingConfig, StreamNormalizer, safety_mask
from trafficpref.sim import SimConfig, init_network, pressure_reward
from trafficpref.sim.engine import LEFT, STRAIGHT

RL_SEEDS = (0, 1, 2, 3, 4)
FALLBACK_SEEDS = tuple(range(10))
SIGN_ALPHA = 0.1


@pytest.fixture(scope="module")
def workdir(tmp_path_factory) -> Path:
    env = os.environ.get("TRAFFICPREF_ACCEPTANCE_DIR")
    if env:
        Path(env).mkdir(parents=True, exist_ok=True)
        return Path(env)
    return tmp_path_factory.mktemp("acceptance")


# -- exact and oracle checks ---------------------------------------------------------------

def _fd_relative_error(p: RewardModelParams, batch: PairBatch, ref, h: float = 1e-5) -> float:
    theta = p.flat()
    _, grad = loss_and_gradient(p, batch, ref)
    num = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        lp, _ = loss_and_gradient(p.with_flat(theta + e), batch, ref)
        lm, _ = loss_and_gradient(p.with_flat(theta - e), batch, ref)
        num[i] = (lp - lm) / (2 * h)
    return float(np.linalg.norm(grad - num) / max(np.linalg.norm(grad), np.linalg.norm(num), 1e-12))


def test_c01_preference_gradient_matches_finite_differences(verdict):
    rng = np.random.default_rng(2024)
    fit_obs = [random_observation(rng) for _ in range(64)]
    encoders = {m: EncoderSpec.fit(m, fit_obs) for m in MODES}
    worst, per_mode = 0.0, {m: 0 for m in MODES}
    for draw in range(100):
        mode = MODES[draw % len(MODES)]
        enc = encoders[mode]
        hidden = int(rng.choice([0, 3, 6]))
        hyper = Hyper(tau_bt=float(rng.uniform(0.5, 2.0)), eta=float(rng.uniform(0, 1e-2)),
                      zeta=float(rng.uniform(0, 1.0)))
        p = RewardModelParams.init(enc, hidden, seed=int(rng.integers(1 << 30)), hyper=hyper)
        p = p.with_flat(p.flat() + rng.normal(scale=0.3, size=p.flat().size))
        n = int(rng.integers(1, 7))
        obs = [random_observation(rng) for _ in range(2 * n)]
        F = np.stack([encode(o, None, enc) for o in obs])
        batch = PairBatch(F[:n], F[n:], rng.integers(1, 3, n), rng.uniform(0.2, 2.0, n))
        ref = np.stack([encode(random_observation(rng), None, enc) for _ in range(int(rng.integers(1, 6)))]) \
            if rng.random() < 0.8 else None
        worst = max(worst, _fd_relative_error(p, batch, ref))
        per_mode[mode] += 1
    ok = verdict(1, "preference-loss gradient", worst < 1e-4,
                 f"max relative error {worst:.2e} over 100 draws {per_mode} (< 1e-4)")
    assert ok


def _gae_oracle(r, v, boot, gamma, lam, dones):
    n = len(r)
    adv = np.zeros(n)
    for t in range(n):
        total, decay = 0.0, 1.0
        for k in range(t, n):
            nxt = 0.0 if dones[k] else (v[k + 1] if k + 1 < n else boot)
            total += decay * (r[k] + gamma * nxt - v[k])
            if dones[k]:
                break
            decay *= gamma * lam
        adv[t] = total
    return adv


def test_c02_gae_matches_double_sum(verdict):
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 11))
        r, v = rng.normal(size=n) * 5, rng.normal(size=n) * 5
        boot = float(rng.normal() * 5)
        gamma, lam = float(rng.uniform(0.5, 1.0)), float(rng.uniform(0.0, 1.0))
        dones = rng.random(n) < 0.2
        adv, ret = gae(r, v, boot, gamma, lam, dones)
        want = _gae_oracle(r, v, boot, gamma, lam, dones)
        worst = max(worst, float(np.max(np.abs(adv - want))), float(np.max(np.abs(ret - (want + v)))))
    ok = verdict(2, "advantage estimates", worst < 1e-10,
                 f"max abs error {worst:.2e} over 1000 episodes (< 1e-10)")
    assert ok


def test_c03_safety_mask_truth_table(verdict):
    cfg = ShapingConfig()
    base = random_observation(np.random.default_rng(0))
    rows = []
    for ttc_ok, acc_ok, red_ok in itertools.product((True, False), repeat=3):
        o = dataclasses.replace(base, ttc_p10=2.0 if ttc_ok else 1.0, ttc_p50=5.0,
                                a_near=-1.0 if acc_ok else -4.0, rho_red=0 if red_ok else 1)
        rows.append(safety_mask(o, cfg) == int(ttc_ok and acc_ok and red_ok))
    ok = verdict(3, "safety mask truth table", all(rows), f"{sum(rows)}/8 predicate combinations correct")
    assert ok


def _scene(rows, cols, placed):
    s = init_network(SimConfig(grid_rows=rows, grid_cols=cols, arrival_rate_per_entry=0.0))
    for (k, d, m), n in placed.items():
        for i in range(n):
            s.add_vehicle(s.net.lane_id(k, d, m), 100.0 + 20.0 * i, 0.0)
    return s


# approaches are indexed N, E, S, W; counts were worked out by hand from the lane wiring
PRESSURE_SCENES = [
    ("single", (1, 1), {(0, 0, STRAIGHT): 2, (0, 1, LEFT): 1}, [(2, 1, 0, 0)]),
    ("corridor", (1, 2), {(0, 3, STRAIGHT): 3, (1, 3, STRAIGHT): 1, (0, 1, STRAIGHT): 2},
     [(-1, 2, 0, 2), (0, -2, -2, 1)]),
    ("grid", (2, 2), {(0, 0, STRAIGHT): 2, (2, 0, STRAIGHT): 1, (0, 3, STRAIGHT): 1, (1, 3, LEFT): 3,
                      (3, 2, STRAIGHT): 2},
     [(1, -1, 0, 1), (0, 0, 0, 3), (1, 0, 0, 0), (0, 0, 2, 0)]),
]


def _expected_signal_trace(cycles: int):
    """30 s green, 3 s yellow, 2 s all-red per phase, phases in fixed-time cycle order."""
    trace = []
    for i in range(cycles):
        phase = CYCLE[i % len(CYCLE)]
        trace += [(phase, "green")] * 30 + [(phase, "yellow")] * 3 + [(phase, "allred")] * 2
    return trace


def test_c04_pressure_fixtures_and_signal_timing(verdict):
    scene_ok = []
    for name, (r, c), placed, expected in PRESSURE_SCENES:
        s = _scene(r, c, placed)
        obs = [s.observe(k) for k in range(s.net.n_int)]
        scene_ok.append(all(o.p == e and pressure_reward(o) == -sum(e) for o, e in zip(obs, expected)))
    s = init_network(SimConfig(grid_rows=1, grid_cols=1, arrival_rate_per_entry=0.0, horizon_s=4 * 35))
    ctl = FixedTimeController()
    trace = []
    while not s.done:
        _, ev = s.step([ctl(s, 0) if s.at_decision_point(0) else None])
        trace.append(ev.signals[0])
    want = _expected_signal_trace(4)
    timing_ok = trace == want
    mismatch = next((i for i, (a, b) in enumerate(zip(trace, want)) if a != b), None)
    ok = verdict(4, "pressure reward and signal timing", all(scene_ok) and timing_ok,
                 f"{sum(scene_ok)}/3 scenes match hand counts; 30/3/2 s trace over {len(trace)} steps "
                 + ("matches" if timing_ok else f"differs at step {mismatch}"))
    assert ok


def test_c05_normalizer_moments(verdict):
    rng = np.random.default_rng(5)
    x = rng.normal(7.0, 3.0, 10_000)
    norm = StreamNormalizer(n_streams=1)
    pre = np.empty_like(x)
    for i, xi in enumerate(x):
        norm.update([xi])
        pre[i] = norm.normalize([xi])[0]
    const = StreamNormalizer(n_streams=1)
    outs = []
    for _ in range(100):
        const.update([3.25])
        outs.append(float(const.normalize([3.25])[0]))
    m, v = float(pre.mean()), float(pre.var())
    ok = abs(m) <= 0.05 and abs(v - 1) <= 0.05 and all(o == 0.0 for o in outs)
    verdict(5, "stream normalizer", ok,
            f"mean {m:+.4f} (|.| <= 0.05), variance {v:.4f} (1 +/- 0.05), constant stream -> "
            f"{'all zero' if all(o == 0.0 for o in outs) else 'nonzero'}")
    assert ok


def test_c06_pipeline_determinism(verdict, tmp_path):
    spec = ExperimentSpec(label="det", seeds=(0,), horizon_s=300.0, pool_episodes=1, pair_budget=300,
                          eval_pairs=150, epochs=10, iterations=3, episodes=1, eval_seeds=(9001,))
    names = ("aggregate.csv", "seed_0/curve.csv", "seed_0/eval.json", "seed_0/policy.json")
    outs = []
    for run in ("a", "b"):
        run_pipeline(spec, tmp_path / run, cache=tmp_path / f"cache_{run}")
        outs.append({n: (tmp_path / run / n).read_bytes() for n in names})
    models = [next((tmp_path / f"cache_{r}").glob("model-*")) for r in ("a", "b")]
    same_model = (models[0] / "reward_curve.csv").read_bytes() == (models[1] / "reward_curve.csv").read_bytes()
    same = [n for n in names if outs[0][n] == outs[1][n]]
    ok = len(same) == len(names) and same_model
    verdict(6, "pipeline determinism", ok,
            f"{len(same)}/{len(names)} run artifacts and the reward-model curve byte-identical")
    assert ok


def _rendered(x: float, nd: int) -> float:
    return float(f"{x:.{nd}f}")


def test_c07_caption_determinism_and_round_trip(verdict):
    rng = np.random.default_rng(77)
    bad = 0
    for _ in range(10_000):
        o = random_observation(rng, k=int(rng.integers(0, 9)), t=float(rng.integers(0, 3600)))
        text = render_text(o)
        f = parse_caption(text)
        want = {
            "phase": int(o.phase.phase), "elapsed": float(round(o.phase.elapsed)), "q": o.q, "p": o.p,
            "mean_delay": _rendered(o.mean_delay, 1), "throughput": o.throughput, "window_s": o.window_s,
            "ttc_p10": _rendered(o.ttc_p10, 2), "ttc_p50": _rendered(o.ttc_p50, 2), "h_brake": o.h_brake,
            "rho_red": o.rho_red, "v_near": _rendered(o.v_near, 2), "a_near": _rendered(o.a_near, 2),
            "d_stop": _rendered(o.d_stop, 1),
        }
        back = dataclasses.replace(
            o, phase=dataclasses.replace(o.phase, elapsed=f["elapsed"]),
            **{k: f[k] for k in ("mean_delay", "ttc_p10", "ttc_p50", "v_near", "a_near", "d_stop")})
        if f != want or render_text(o) != text or render_caption(o).text != text or render_text(back) != text:
            bad += 1
    ok = verdict(7, "caption determinism and round trip", bad == 0,
                 f"{10_000 - bad}/10000 observations render identically and parse exactly")
    assert ok


# -- statistical and offline checks ---------------------------------------------------------

OFFLINE_BASE = ExperimentSpec(seeds=(0, 1, 2))


def _accuracies(res) -> dict:
    return {r["variant"]: float(r["heldout_accuracy_mean"]) for r in res.rows}


def test_c08_caption_structure_ablation(verdict, workdir):
    t0 = time.time()
    res = run_ablation("A2", OFFLINE_BASE, workdir / "A2", offline_only=True)
    acc = _accuracies(res)
    fusion = acc["structured_fusion"]
    ok = res.ok and fusion >= 0.9 and fusion - acc["numeric_only"] >= 0.03 \
        and acc["shuffled"] < fusion and acc["unstructured"] < fusion
    verdict(8, "caption-structure ablation", ok,
            f"held-out accuracy fusion {fusion:.3f} (>= 0.9), numeric {acc['numeric_only']:.3f} "
            f"(gap >= 0.03), shuffled {acc['shuffled']:.3f}, unstructured {acc['unstructured']:.3f} "
            f"(both < fusion); mean of 3 data seeds, {time.time() - t0:.0f} s")
    assert ok


def test_c09_pair_budget_saturation(verdict, workdir):
    t0 = time.time()
    res = run_ablation("D1", OFFLINE_BASE, workdir / "D1", offline_only=True)
    acc = _accuracies(res)
    a100, a1000, a4000 = acc["M=100"], acc["M=1000"], acc["M=4000"]
    ok = res.ok and abs(a1000 - a4000) <= 0.02 and a1000 - a100 >= 0.03
    verdict(9, "pair-budget saturation", ok,
            f"accuracy M=100 {a100:.3f}, M=1000 {a1000:.3f}, M=4000 {a4000:.3f}: "
            f"|M1000-M4000| {abs(a1000 - a4000):.3f} (<= 0.02), M1000-M100 {a1000 - a100:.3f} (>= 0.03); "
            f"{time.time() - t0:.0f} s")
    assert ok


def test_c10_teacher_noise_sensitivity(verdict, workdir):
    t0 = time.time()
    res = run_ablation("B2", OFFLINE_BASE, workdir / "B2", offline_only=True)
    # per-seed accuracies come from each seed's cached reward model
    per_seed = {c.label: [run_offline(c.with_(data_seed=s), workdir / "B2" / "cache")["pairwise_accuracy"]
                          for s in OFFLINE_BASE.seeds]
                for c in expand_matrix("B2", OFFLINE_BASE)}
    mono = [per_seed["strong"][i] >= per_seed["large_open"][i] >= per_seed["small_open"][i] for i in range(3)]
    ok = res.ok and all(mono)
    fmt = lambda xs: "/".join(f"{x:.3f}" for x in xs)
    verdict(10, "teacher-noise sensitivity", ok,
            f"noiseless {fmt(per_seed['strong'])} >= flip 0.05 {fmt(per_seed['large_open'])} >= "
            f"flip 0.15 {fmt(per_seed['small_open'])}: monotone in {sum(mono)}/3 seeds; "
            f"{time.time() - t0:.0f} s")
    assert ok


# -- directional reinforcement-learning checks ----------------------------------------------

RL_BASE = ExperimentSpec(seeds=RL_SEEDS)


class Runs:
    """Policy runs on demand, shared through one cache (a cell at a seed trains at most once)."""

    def __init__(self, root: Path):
        self.root = root
        self.cache = root / "cache"

    def metrics(self, label: str, seeds, **changes) -> dict:
        spec = RL_BASE.with_(label=label, seeds=tuple(seeds), **changes).validate()
        return run_pipeline(spec, self.root / f"{label}-{len(seeds)}", cache=self.cache).per_seed


@pytest.fixture(scope="module")
def runs(workdir) -> Runs:
    return Runs(workdir / "rl")


def _outcome_line(o) -> str:
    return o.describe() + (" after 10-seed re-run" if o.fallback else "")


def test_c11_reward_composition(verdict, runs):
    t0 = time.time()

    def att_better(seeds):
        full = runs.metrics("full", seeds, variant="full")
        ext = runs.metrics("external_only", seeds, variant="external_only")
        return [full[s]["att"] < ext[s]["att"] for s in seeds]

    def mask_safer(seeds):
        full = runs.metrics("full", seeds, variant="full")
        nomask = runs.metrics("no_mask", seeds, variant="no_mask")
        return [nomask[s]["ttc_p10"] <= full[s]["ttc_p10"] for s in seeds]

    att = directional_check(att_better, RL_SEEDS, 4, FALLBACK_SEEDS, SIGN_ALPHA)
    ttc = directional_check(mask_safer, RL_SEEDS, 4, FALLBACK_SEEDS, SIGN_ALPHA)
    full = runs.metrics("full", RL_SEEDS, variant="full")
    ext = runs.metrics("external_only", RL_SEEDS, variant="external_only")
    nomask = runs.metrics("no_mask", RL_SEEDS, variant="no_mask")
    mean = lambda d, m: float(np.mean([d[s][m] for s in RL_SEEDS]))
    ok = att.passed and ttc.passed
    verdict(11, "reward composition", ok,
            f"full ATT < external-only in {_outcome_line(att)} (need 4/5; mean ATT full "
            f"{mean(full, 'att'):.2f} s vs external {mean(ext, 'att'):.2f} s); no-mask TTC p10 <= full in "
            f"{_outcome_line(ttc)} (need 4/5; mean {mean(nomask, 'ttc_p10'):.2f} vs "
            f"{mean(full, 'ttc_p10'):.2f} s); {time.time() - t0:.0f} s")
    assert ok


def test_c12_judge_profile(verdict, runs):
    t0 = time.time()

    def safer_and_slower(seeds):
        safe = runs.metrics("safety_focused", seeds, judge="synthetic:safety_focused")
        eff = runs.metrics("efficiency_focused", seeds, judge="synthetic:efficiency_focused")
        return [safe[s]["ttc_p10"] > eff[s]["ttc_p10"] and safe[s]["att"] > eff[s]["att"] for s in seeds]

    out = directional_check(safer_and_slower, RL_SEEDS, 3, FALLBACK_SEEDS, SIGN_ALPHA)
    safe = runs.metrics("safety_focused", RL_SEEDS, judge="synthetic:safety_focused")
    eff = runs.metrics("efficiency_focused", RL_SEEDS, judge="synthetic:efficiency_focused")
    mean = lambda d, m: float(np.mean([d[s][m] for s in RL_SEEDS]))
    ok = out.passed
    verdict(12, "judge profile", ok,
            f"safety-focused has higher TTC p10 and higher ATT than efficiency-focused in "
            f"{_outcome_line(out)} (need majority); mean TTC p10 {mean(safe, 'ttc_p10'):.2f} vs "
            f"{mean(eff, 'ttc_p10'):.2f} s, mean ATT {mean(safe, 'att'):.2f} vs {mean(eff, 'att'):.2f} s; "
            f"{time.time() - t0:.0f} s")
    assert ok


def test_c13_normalization_stabilizes(verdict, runs):
    t0 = time.time()
    full = runs.metrics("full", RL_SEEDS, variant="full")
    raw = runs.metrics("no_norm", RL_SEEDS, variant="no_norm")
    v_full = float(np.var([full[s]["att"] for s in RL_SEEDS], ddof=1))
    v_raw = float(np.var([raw[s]["att"] for s in RL_SEEDS], ddof=1))
    detail = f"ATT variance across 5 seeds: no-norm {v_raw:.2f} vs default {v_full:.2f} s^2"
    ok = v_raw > v_full
    if not ok:
        # dispersion sign test on 10 seeds: is a no-norm run further from its median than the
        # default run on the same seed?
        full = runs.metrics("full", FALLBACK_SEEDS, variant="full")
        raw = runs.metrics("no_norm", FALLBACK_SEEDS, variant="no_norm")
        af = np.array([full[s]["att"] for s in FALLBACK_SEEDS])
        ar = np.array([raw[s]["att"] for s in FALLBACK_SEEDS])
        wins = int(np.sum(np.abs(ar - np.median(ar)) > np.abs(af - np.median(af))))
        p = sign_test_p(wins, len(FALLBACK_SEEDS))
        ok = p < SIGN_ALPHA
        detail += (f"; 10-seed re-run variances {ar.var(ddof=1):.2f} vs {af.var(ddof=1):.2f} s^2, "
                   f"wider in {wins}/10 seeds, sign test p={p:.3g}")
    verdict(13, "normalization stabilizes training", ok, detail + f"; {time.time() - t0:.0f} s")
    assert ok


def test_c14_hyperparameter_robustness(verdict, runs, workdir):
    t0 = time.time()
    atts = {}
    for cell in expand_matrix("D2", RL_BASE):
        per = runs.metrics(f"d2_{cell.lambda_max}_{cell.tau_ttc}", RL_SEEDS,
                           lambda_max=cell.lambda_max, tau_ttc=cell.tau_ttc)
        atts[(cell.lambda_max, cell.tau_ttc)] = float(np.mean([per[s]["att"] for s in RL_SEEDS]))
    spread = att_spread(list(atts.values()))
    lo, hi = min(atts, key=atts.get), max(atts, key=atts.get)
    ok = spread < 0.15
    verdict(14, "shaping hyperparameter robustness", ok,
            f"relative ATT spread {spread:.3f} over 9 cells (< 0.15); best (lambda_max, tau_ttc)={lo} "
            f"{atts[lo]:.2f} s, worst {hi} {atts[hi]:.2f} s; {time.time() - t0:.0f} s")
    assert ok
