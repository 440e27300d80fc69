from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum, IntEnum
from typing import Optional

APPROACHES = ("N", "E", "S", "W")


class Phase(IntEnum):
    EW_STRAIGHT = 0
    EW_LEFT = 1
    NS_STRAIGHT = 2
    NS_LEFT = 3

    @property
    def short(self) -> str:
        return PHASE_SHORT[self]

    @classmethod
    def from_short(cls, name: str) -> "Phase":
        return cls(PHASE_SHORT.index(name))


PHASE_SHORT = ("EW_S", "EW_L", "NS_S", "NS_L")


class Stage(str, Enum):
    GREEN = "green"
    YELLOW = "yellow"
    ALLRED = "allred"


@dataclass(frozen=True)
class PhaseState:
    phase: Phase
    stage: Stage
    elapsed: float

    def to_dict(self) -> dict:
        return {"phase": int(self.phase), "stage": self.stage.value, "elapsed": self.elapsed}

    @classmethod
    def from_dict(cls, d: dict) -> "PhaseState":
        return cls(Phase(d["phase"]), Stage(d["stage"]), float(d["elapsed"]))


@dataclass(frozen=True)
class Observation:
    """Per-intersection snapshot. Queue/pressure vectors are ordered N, E, S, W."""

    intersection_id: int
    time: float
    phase: PhaseState
    q: tuple[int, int, int, int]
    p: tuple[int, int, int, int]
    mean_delay: float
    throughput: int
    ttc_p10: float
    ttc_p50: float
    h_brake: int
    rho_red: int
    v_near: float
    a_near: float
    d_stop: float
    window_s: float = 30.0

    def __post_init__(self):
        if len(self.q) != 4 or len(self.p) != 4:
            raise ValueError("q and p must have one entry per approach")
        if min(self.q) < 0:
            raise ValueError("queue counts must be nonnegative")
        if self.rho_red not in (0, 1):
            raise ValueError("rho_red must be 0 or 1")
        if self.ttc_p10 > self.ttc_p50:
            raise ValueError("ttc_p10 must not exceed ttc_p50")
        for name in ("mean_delay", "ttc_p10", "ttc_p50", "v_near", "a_near", "d_stop"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    @property
    def mean_queue(self) -> float:
        return sum(self.q) / 4.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phase"] = self.phase.to_dict()
        d["q"] = list(self.q)
        d["p"] = list(self.p)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Observation":
        d = dict(d)
        d["phase"] = PhaseState.from_dict(d["phase"])
        d["q"] = tuple(int(x) for x in d["q"])
        d["p"] = tuple(int(x) for x in d["p"])
        return cls(**d)


@dataclass
class EpisodeMetrics:
    att: Optional[float]
    aql: float
    awt: Optional[float]
    throughput: float
    ttc_p10: float
    ttc_p25: float
    brakes_per_km: float
    oscillation: float
    mask_activation_rate: float = 0.0
    completed: int = 0
    spawned: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepEvents:
    """What happened during one simulator step (network-wide)."""

    spawned: int = 0
    completed: int = 0
    harsh_brakes: int = 0
    decision_points: list[int] = field(default_factory=list)
    switches: list[int] = field(default_factory=list)
    # (phase, stage) in force while the step was simulated, per intersection
    signals: list[tuple[int, str]] = field(default_factory=list)
