from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .engine import DONE, SimState, percentile_lower
from .types import EpisodeMetrics, Observation


def episode_metrics(state: SimState, mask_log: Optional[Sequence[int]] = None) -> EpisodeMetrics:
    """Aggregate efficiency and safety metrics for a finished (or truncated) episode.

    ATT/AWT are ``None`` when no vehicle completed its route.
    """
    cfg = state.cfg
    done = state.status == DONE
    n_done = int(done.sum())
    if n_done:
        att = float(np.mean(state.finish[done] - state.arrival[done]))
        awt = float(np.mean(state.wait[done]))
    else:
        att = awt = None
    horizon = max(state.t, cfg.dt)
    pool = np.concatenate(state.ttc_pool) if state.ttc_pool else np.zeros(0)
    km = float(state.dist.sum()) / 1000.0
    mask_rate = 0.0
    if mask_log:
        mask_rate = float(np.mean([1.0 - m for m in mask_log]))
    return EpisodeMetrics(
        att=att,
        aql=state.queue_sum / max(state.steps, 1),
        awt=awt,
        throughput=n_done * 3600.0 / horizon,
        ttc_p10=percentile_lower(pool, 0.10, cfg.ttc_cap),
        ttc_p25=percentile_lower(pool, 0.25, cfg.ttc_cap),
        brakes_per_km=state.harsh_total / km if km > 0 else 0.0,
        oscillation=state.switches_total / state.decisions_total if state.decisions_total else 0.0,
        mask_activation_rate=mask_rate,
        completed=n_done,
        spawned=state.counts()["spawned"],
    )


def metrics_from_log(travel_times, waits, queue_totals, n_intersections, ttc_samples, harsh,
                     vehicle_km, switches, decisions, horizon_s, ttc_cap=10.0,
                     mask_log=None) -> EpisodeMetrics:
    """Same aggregation as :func:`episode_metrics`, from plain episode-log quantities."""
    tt = np.asarray(travel_times, dtype=float)
    att = float(tt.mean()) if tt.size else None
    awt = float(np.mean(waits)) if len(waits) else None
    q = np.asarray(queue_totals, dtype=float)
    return EpisodeMetrics(
        att=att,
        aql=float(q.mean()) / n_intersections if q.size else 0.0,
        awt=awt,
        throughput=tt.size * 3600.0 / horizon_s,
        ttc_p10=percentile_lower(ttc_samples, 0.10, ttc_cap),
        ttc_p25=percentile_lower(ttc_samples, 0.25, ttc_cap),
        brakes_per_km=harsh / vehicle_km if vehicle_km > 0 else 0.0,
        oscillation=switches / decisions if decisions else 0.0,
        mask_activation_rate=float(np.mean([1 - m for m in mask_log])) if mask_log else 0.0,
        completed=int(tt.size),
        spawned=int(tt.size),
    )


Controller = Callable[[SimState, Observation], int]


def run_episode(state: SimState, controller: Optional[Callable] = None,
                log_path: Optional[str | Path] = None,
                on_step: Optional[Callable] = None) -> EpisodeMetrics:
    """Roll an episode to the horizon.

    ``controller(state, k)`` returns a phase for intersection ``k`` at its decision
    points (``None`` keeps the current phase). With ``log_path`` one JSON line per
    intersection per step is written.
    """
    fh = open(log_path, "w") if log_path else None
    try:
        while not state.done:
            dps = state.decision_points()
            actions = [None] * state.net.n_int
            if controller is not None:
                for k in dps:
                    actions[k] = controller(state, k)
            obs, events = state.step(actions, observe=fh is not None or on_step is not None)
            if on_step is not None:
                on_step(state, obs, events)
            if fh is not None:
                for o in obs:
                    k = o.intersection_id
                    rec = {"t": o.time, "intersection_id": k, **o.to_dict(),
                           "action": None if actions[k] is None else int(actions[k]),
                           "events": {"decision": k in events.decision_points,
                                      "switch": k in events.switches,
                                      "spawned": events.spawned,
                                      "completed": events.completed,
                                      "harsh_brakes": events.harsh_brakes}}
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
    finally:
        if fh is not None:
            fh.close()
    return episode_metrics(state)
