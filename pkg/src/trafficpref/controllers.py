"""Non-learning signal controllers used as behaviour policies and baselines."""
from __future__ import annotations

import numpy as np

from .sim.engine import SimState

CYCLE = (0, 2, 1, 3)  # EW_S -> NS_S -> EW_L -> NS_L


class FixedTimeController:
    """Cycle through all four phases, one green per decision point."""

    def __init__(self, cycle=CYCLE):
        self.cycle = tuple(cycle)

    def __call__(self, state: SimState, k: int) -> int:
        cur = int(state.phase[k])
        i = self.cycle.index(cur) if cur in self.cycle else -1
        return self.cycle[(i + 1) % len(self.cycle)]


class RandomController:
    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def __call__(self, state: SimState, k: int) -> int:
        return int(self.rng.integers(4))


class MaxPressureController:
    """Pick the phase whose served lanes carry the largest total pressure."""

    def __call__(self, state: SimState, k: int) -> int:
        net = state.net
        lane_p = state.lane_count.astype(float).copy()
        nxt = net.lane_next
        has = nxt >= 0
        lane_p[has] -= state.lane_count[nxt[has]]
        own = net.lane_int == k
        scores = [float(lane_p[own & net.green_table[ph]].sum()) for ph in range(4)]
        return int(np.argmax(scores))


def make_controller(name: str, seed: int = 0):
    if name == "fixed":
        return FixedTimeController()
    if name == "random":
        return RandomController(seed)
    if name == "max_pressure":
        return MaxPressureController()
    raise ValueError(f"unknown controller {name!r}")
