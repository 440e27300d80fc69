"""Command-line entry point: ``trafficpref <subcommand> ...``.

Every subcommand accepts ``--config`` (YAML/JSON experiment file), ``--seed`` (one
value or a comma list), ``--out`` and, where relevant, ``--workers`` and ``--judge``.
The exit status is 0 only when everything requested succeeded.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import harness
from .controllers import make_controller
from .harness import ExperimentSpec
from .judge import PrefDataset, build_pref_dataset, make_judge
from .pairs import PairingConfig, PoolStats, collect_pool, load_pool, save_pool
from .ppo import evaluate_policy, load_checkpoint, save_checkpoint, train_policy, write_curve
from .reward_model import EncoderSpec, FeatureMode, TrainConfig, evaluate_offline, load_params, save_params, \
    train_reward_model
from .reward_model import write_curve as write_reward_curve
from .sim import init_network, run_episode

log = logging.getLogger("trafficpref")


def _seeds(text: Optional[str]) -> Optional[tuple[int, ...]]:
    if text is None:
        return None
    return tuple(int(s) for s in text.split(",") if s.strip())


def _spec(args) -> ExperimentSpec:
    spec = harness.load_spec(args.config) if args.config else ExperimentSpec()
    changes = {}
    seeds = _seeds(getattr(args, "seed", None))
    if seeds:
        changes["seeds"] = seeds
    if getattr(args, "judge", None):
        changes["judge"] = args.judge
    return spec.with_(**changes).validate() if changes else spec.validate()


def _out(args) -> Path:
    p = Path(args.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


# -- subcommands ------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    spec, out = _spec(args), _out(args)
    results = {}
    for s in spec.seeds:
        state = init_network(spec.sim_config(seed=s))
        m = run_episode(state, make_controller(args.controller, s), log_path=out / f"episode_seed{s}.jsonl")
        results[str(s)] = m.to_dict()
    _dump(results, out / "metrics.json")
    print(json.dumps(results, sort_keys=True))
    return 0


def cmd_collect(args) -> int:
    spec, out = _spec(args), _out(args)
    sim = spec.sim_config().replace(arrival_rate_per_entry=spec.arrival_rate * spec.pool_rate_scale)
    makers = [(lambda name: (lambda seed: make_controller(name, seed)))(n) for n in spec.pool_controllers]
    pool = collect_pool(sim, makers, spec.pool_episodes, spec.sample_every, spec.seeds[0])
    save_pool(pool, out / "pool.jsonl")
    _dump(PoolStats.from_observations([e.obs for e in pool]).to_dict(), out / "stats.json")
    print(f"collected {len(pool)} observations -> {out / 'pool.jsonl'}")
    return 0


def cmd_label(args) -> int:
    spec, out = _spec(args), _out(args)
    pool = load_pool(args.pool)
    stats = PoolStats.from_observations([e.obs for e in pool])
    judge = make_judge(spec.judge, stats, seed=spec.seeds[0], cache_dir=out / "http-judge")
    M = args.pairs or spec.pair_budget
    ds = build_pref_dataset(pool, PairingConfig(stats=stats), judge, M, np.random.default_rng(spec.seeds[0]))
    ds.save(out / "dataset.jsonl")
    print(json.dumps(ds.meta(), sort_keys=True))
    return 0 if len(ds) and ds.warning is None else 1


def cmd_train_reward(args) -> int:
    spec, out = _spec(args), _out(args)
    ds = PrefDataset.load(args.dataset)
    pool = load_pool(args.pool) if args.pool else None
    obs = [e.obs for e in pool] if pool else [p.o1 for p in ds.pairs] + [p.o2 for p in ds.pairs]
    mode = FeatureMode(args.mode or spec.feature_mode, frozenset(spec.field_mask))
    seed = spec.seeds[0]
    train, held = ds.split(args.heldout, np.random.default_rng(seed))
    res = train_reward_model(train.pairs, EncoderSpec.fit(mode, obs),
                             cfg=TrainConfig(hidden=spec.hidden, epochs=spec.epochs), seed=seed,
                             ref_observations=obs, heldout_pairs=held.pairs)
    save_params(res.params, out / "model.json")
    write_reward_curve(res.curve, out / "reward_curve.csv")
    off = evaluate_offline(res.params, held.pairs)
    _dump(off, out / "offline.json")
    print(json.dumps(off, sort_keys=True))
    return 0


def cmd_train_policy(args) -> int:
    spec, out = _spec(args), _out(args)
    if args.variant:
        spec = spec.with_(variant=args.variant).validate()
    scorer = load_params(args.scorer) if args.scorer else None
    if spec.needs_scorer and scorer is None:
        print(f"variant {spec.variant!r} needs a reward model: run train-reward first and pass --scorer",
              file=sys.stderr)
        return 2
    results = {}
    for s in spec.seeds:
        res = train_policy(spec.sim_config(), scorer, spec.shaping_config(), spec.ppo_config(), seed=s)
        sd = out / f"seed_{s}"
        sd.mkdir(exist_ok=True)
        write_curve(res.curve, sd / "curve.csv")
        save_checkpoint(res, sd / "policy.json", {"seed": s, "variant": spec.variant})
        _dump(res.eval_metrics, sd / "eval.json")
        results[str(s)] = res.eval_metrics
    print(json.dumps(results, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    spec, out = _spec(args), _out(args)
    policy, _, scaler, meta = load_checkpoint(args.checkpoint)
    seeds = _seeds(args.seed) or spec.eval_seeds
    metrics = evaluate_policy(policy, spec.sim_config(), seeds, spec.shaping_config(), scaler)
    _dump({"checkpoint": str(args.checkpoint), "seeds": list(seeds), "metrics": metrics}, out / "evaluation.json")
    print(json.dumps(metrics, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    spec, out = _spec(args), _out(args)
    res = harness.run_ablation(args.matrix, spec, out, workers=args.workers, offline_only=args.offline)
    print(res.table_path.read_text(), end="")
    if res.extra:
        print(json.dumps(res.extra, sort_keys=True))
    if res.failed:
        print(f"failed cells: {', '.join(res.failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_run(args) -> int:
    spec, out = _spec(args), _out(args)
    res = harness.run_pipeline(spec, out, workers=args.workers)
    print((out / "aggregate.csv").read_text(), end="")
    return 0 if res.per_seed else 1


def cmd_transfer(args) -> int:
    spec, out = _spec(args), _out(args)
    fractions = tuple(float(f) for f in args.fractions.split(","))
    rows = harness.run_transfer(spec, args.target, out, fractions=fractions)
    for r in rows:
        print(f"{r['setting']} fraction={r['fraction']:g} lambda={r['lambda']:g} accuracy={r['accuracy']:.3f}")
    return 0


def cmd_report(args) -> int:
    out = _out(args)
    rep = harness.report(args.dirs, out)
    print((out / "summary.txt").read_text(), end="")
    return 0 if rep["rows"] else 1


# -- parser ------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trafficpref", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress and cache hits")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, workers=False, judge=False):
        sp.add_argument("--config", help="experiment file (YAML or JSON)")
        sp.add_argument("--seed", help="seed or comma-separated seed list")
        sp.add_argument("--out", default="out", help="output directory")
        if workers:
            sp.add_argument("--workers", type=int, default=1, help="parallel processes")
        if judge:
            sp.add_argument("--judge", help="synthetic:<profile> | noisy:<p_flip>[,<p_abstain>] | http:<url>")
        return sp

    s = common(sub.add_parser("simulate", help="roll a behaviour controller and log the episode"))
    s.add_argument("--controller", default="fixed", choices=("fixed", "random", "max_pressure"))
    s.set_defaults(fn=cmd_simulate)

    s = common(sub.add_parser("collect", help="collect the observation pool"))
    s.set_defaults(fn=cmd_collect)

    s = common(sub.add_parser("label", help="sample pairs and label them with a judge"), judge=True)
    s.add_argument("--pool", required=True)
    s.add_argument("--pairs", type=int, help="pair budget (default from config)")
    s.set_defaults(fn=cmd_label)

    s = common(sub.add_parser("train-reward", help="fit the reward model on a preference dataset"))
    s.add_argument("--dataset", required=True)
    s.add_argument("--pool", help="pool file used for feature standardization")
    s.add_argument("--mode", choices=("numeric_only", "structured_fusion", "unstructured", "shuffled"))
    s.add_argument("--heldout", type=float, default=0.2)
    s.set_defaults(fn=cmd_train_reward)

    s = common(sub.add_parser("train-policy", help="train the shared signal policy"), workers=True)
    s.add_argument("--scorer", help="reward model file")
    s.add_argument("--variant", help="shaping variant, e.g. full or external_only")
    s.set_defaults(fn=cmd_train_policy)

    s = common(sub.add_parser("evaluate", help="greedy evaluation of a policy checkpoint"))
    s.add_argument("--checkpoint", required=True)
    s.set_defaults(fn=cmd_evaluate)

    s = common(sub.add_parser("run", help="run the whole pipeline for one experiment"), workers=True, judge=True)
    s.set_defaults(fn=cmd_run)

    s = common(sub.add_parser("ablate", help="run an ablation matrix"), workers=True, judge=True)
    s.add_argument("matrix", choices=sorted(harness.MATRICES))
    s.add_argument("--offline", action="store_true", help="stop after the reward model")
    s.set_defaults(fn=cmd_ablate)

    s = common(sub.add_parser("transfer", help="reuse a reward model on another demand scenario"), judge=True)
    s.add_argument("--target", required=True, choices=harness.SCENARIOS)
    s.add_argument("--fractions", default="0.01,0.05", help="shares of target pairs added for fine-tuning")
    s.set_defaults(fn=cmd_transfer)

    s = sub.add_parser("report", help="aggregate finished runs")
    s.add_argument("dirs", nargs="*")
    s.add_argument("--out", default="report")
    s.set_defaults(fn=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return int(args.fn(args))
    except (ValueError, FileNotFoundError, harness.StageError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
