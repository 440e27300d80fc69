from __future__ import annotations

import numpy as np

from trafficpref.sim import Observation, Phase, PhaseState, Stage


def random_observation(rng: np.random.Generator, k: int = 0, t: float = 0.0) -> Observation:
    stage = Stage(rng.choice(["green", "yellow", "allred"]))
    limit = {"green": 30, "yellow": 3, "allred": 2}[stage.value]
    p10 = float(rng.uniform(0.0, 10.0))
    return Observation(
        intersection_id=k,
        time=t,
        phase=PhaseState(Phase(int(rng.integers(4))), stage, float(rng.integers(0, limit + 1))),
        q=tuple(int(x) for x in rng.integers(0, 15, 4)),
        p=tuple(int(x) for x in rng.integers(-12, 15, 4)),
        mean_delay=float(rng.uniform(0, 90)),
        throughput=int(rng.integers(0, 40)),
        ttc_p10=p10,
        ttc_p50=float(rng.uniform(p10, 10.0)),
        h_brake=int(rng.integers(0, 6)),
        rho_red=int(rng.integers(2)),
        v_near=float(rng.uniform(0, 11.11)),
        a_near=float(rng.uniform(-6, 2)),
        d_stop=float(rng.uniform(0, 300)),
        window_s=35.0,
    )
