from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml


class ConfigError(ValueError):
    """Invalid simulator configuration; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class CarFollowing:
    v_max: float = 11.11
    a_max_accel: float = 2.0
    b_comfort: float = 2.0
    b_emergency: float = 6.0
    min_gap: float = 2.5
    headway: float = 1.5
    vehicle_length: float = 5.0


@dataclass(frozen=True)
class Surge:
    factor: float = 4.0
    start_s: float = 120.0
    ramp_s: float = 300.0


@dataclass(frozen=True)
class SimConfig:
    grid_rows: int = 2
    grid_cols: int = 2
    link_length: float = 300.0
    lanes_per_movement: int = 1
    dt: float = 1.0
    green_s: float = 30.0
    yellow_s: float = 3.0
    allred_s: float = 2.0
    arrival_rate_per_entry: float = 0.1
    surge: Optional[Surge] = None
    # piecewise-linear multiplier profile: ((t_s, factor), ...)
    diurnal: Optional[tuple[tuple[float, float], ...]] = None
    horizon_s: float = 600.0
    seed: int = 0
    car_following: CarFollowing = field(default_factory=CarFollowing)
    left_turn_fraction: float = 0.2
    window_s: float = 35.0
    # how far back a red-light risk event keeps the flag raised (1.0 = this step only)
    risk_memory_s: float = 35.0
    ttc_cap: float = 10.0

    def validate(self) -> "SimConfig":
        for name in ("grid_rows", "grid_cols", "lanes_per_movement"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(name, "must be >= 1")
        for name in ("link_length", "dt", "green_s", "yellow_s", "allred_s", "horizon_s",
                     "window_s", "risk_memory_s", "ttc_cap"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ConfigError(name, "must be a positive finite duration/length")
        if not self.dt <= self.risk_memory_s <= self.window_s:
            raise ConfigError("risk_memory_s", "must lie between dt and window_s")
        if self.dt != 1.0:
            raise ConfigError("dt", "the simulator runs at a fixed 1.0 s step")
        for name in ("green_s", "yellow_s", "allred_s"):
            ratio = getattr(self, name) / self.dt
            if abs(ratio - round(ratio)) > 1e-9:
                raise ConfigError(name, "must be a multiple of dt")
        if not self.arrival_rate_per_entry >= 0:
            raise ConfigError("arrival_rate_per_entry", "must be >= 0")
        if not 0 <= self.left_turn_fraction <= 1:
            raise ConfigError("left_turn_fraction", "must lie in [0, 1]")
        if self.surge is not None:
            if self.surge.factor < 0:
                raise ConfigError("surge", "factor must be >= 0")
            if self.surge.ramp_s < 0 or self.surge.start_s < 0:
                raise ConfigError("surge", "start_s and ramp_s must be >= 0")
        if self.diurnal is not None:
            if len(self.diurnal) < 1 or any(f < 0 for _, f in self.diurnal):
                raise ConfigError("diurnal", "needs >= 1 knot with nonnegative factors")
            ts = [t for t, _ in self.diurnal]
            if ts != sorted(ts):
                raise ConfigError("diurnal", "knot times must be increasing")
        cf = self.car_following
        for name in ("v_max", "a_max_accel", "b_comfort", "b_emergency", "min_gap", "headway",
                     "vehicle_length"):
            if not getattr(cf, name) > 0:
                raise ConfigError(f"car_following.{name}", "must be > 0")
        return self

    def rate_multiplier(self, t: float) -> float:
        m = 1.0
        if self.diurnal is not None:
            ts = [k[0] for k in self.diurnal]
            fs = [k[1] for k in self.diurnal]
            m *= float(_interp(t, ts, fs))
        if self.surge is not None:
            s = self.surge
            if t >= s.start_s:
                frac = 1.0 if s.ramp_s == 0 else min(1.0, (t - s.start_s) / s.ramp_s)
                m *= 1.0 + (s.factor - 1.0) * frac
        return m

    def max_rate_multiplier(self) -> float:
        m = 1.0
        if self.diurnal is not None:
            m *= max(f for _, f in self.diurnal)
        if self.surge is not None:
            m *= max(1.0, self.surge.factor)
        return m

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.diurnal is not None:
            d["diurnal"] = [list(k) for k in self.diurnal]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown configuration key")
        if d.get("car_following") is not None:
            d["car_following"] = CarFollowing(**d["car_following"])
        if d.get("surge") is not None:
            d["surge"] = Surge(**d["surge"])
        if d.get("diurnal") is not None:
            d["diurnal"] = tuple((float(t), float(f)) for t, f in d["diurnal"])
        return cls(**d).validate()

    def replace(self, **changes) -> "SimConfig":
        d = self.to_dict()
        d.update(changes)
        return SimConfig.from_dict(d)


def _interp(t, ts, fs):
    if t <= ts[0]:
        return fs[0]
    if t >= ts[-1]:
        return fs[-1]
    for i in range(1, len(ts)):
        if t <= ts[i]:
            w = (t - ts[i - 1]) / (ts[i] - ts[i - 1])
            return fs[i - 1] + w * (fs[i] - fs[i - 1])
    return fs[-1]


def load_config(path: str | Path) -> SimConfig:
    """Read a scenario file (YAML or JSON) whose keys are SimConfig fields."""
    text = Path(path).read_text()
    data = yaml.safe_load(text) or {}
    if "sim" in data and isinstance(data["sim"], dict):
        data = data["sim"]
    return SimConfig.from_dict(data)


def dump_config(cfg: SimConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
