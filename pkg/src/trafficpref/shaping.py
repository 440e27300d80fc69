"""Reward shaping for the signal controllers.

Three reward streams are produced per controller step::

    r1 = external reward (negative pressure minus a delay penalty)
    r2 = lambda(t) * m * r_phi      (learned preference score, gated by the safety mask m)
    r3 = -kappa * (1 - m)           (penalty for unsafe states)

Each stream is standardized with its own running mean and standard deviation,
clipped to [-c, c], and the three are summed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .sim import Observation
from .sim.engine import external_reward_tl


@dataclass(frozen=True)
class ShapingConfig:
    tau_ttc: float = 1.5
    a_max_mask: float = 3.0
    kappa_unsafe: float = 1.0
    lambda_max: float = 0.5
    warmup_iters: int = 20
    clip_c: float = 5.0
    eps: float = 1e-8
    lambda_delay: float = 0.1
    use_intrinsic: bool = True
    use_mask: bool = True
    use_norm: bool = True
    use_schedule: bool = True

    def __post_init__(self):
        if not self.tau_ttc > 0:
            raise ValueError("tau_ttc must be positive")
        if not 0 <= self.lambda_max <= 1:
            raise ValueError("lambda_max must lie in [0, 1]")
        if not self.clip_c > 0:
            raise ValueError("clip_c must be positive")
        if self.kappa_unsafe < 0:
            raise ValueError("kappa_unsafe must be >= 0")
        if self.warmup_iters < 0:
            raise ValueError("warmup_iters must be >= 0")


# named variants for the reward-composition and normalization studies
VARIANTS = {
    "external_only": dict(use_intrinsic=False, use_mask=False),
    "no_intrinsic": dict(use_intrinsic=False, use_mask=True),
    "no_mask": dict(use_intrinsic=True, use_mask=False),
    "full": dict(use_intrinsic=True, use_mask=True),
    "no_norm": dict(use_norm=False),
    "no_schedule": dict(use_schedule=False),
}


def variant_config(name: str, **overrides) -> ShapingConfig:
    return ShapingConfig(**{**VARIANTS[name], **overrides})


def safety_mask(obs: Observation, cfg: ShapingConfig) -> int:
    """1 when the state is safe: ttc_p10 >= tau_ttc, |a_near| <= a_max and no red-light risk."""
    ok = obs.ttc_p10 >= cfg.tau_ttc and abs(obs.a_near) <= cfg.a_max_mask and obs.rho_red == 0
    return int(ok)


def lambda_schedule(t: float, cfg: ShapingConfig) -> float:
    if t < 0:
        raise ValueError("iteration must be >= 0")
    if not cfg.use_schedule or cfg.warmup_iters == 0:
        return cfg.lambda_max
    return cfg.lambda_max * min(1.0, t / cfg.warmup_iters)


def mixed_streams(r_ext: float, r_phi: float, mask: int, lam: float,
                  cfg: ShapingConfig) -> tuple[float, float, float]:
    if not cfg.use_intrinsic:
        r2 = 0.0
    elif cfg.use_mask:
        r2 = lam * mask * r_phi
    else:
        r2 = lam * r_phi
    r3 = -cfg.kappa_unsafe * (1 - mask) if cfg.use_mask else 0.0
    return float(r_ext), float(r2), float(r3)


@dataclass
class StreamNormalizer:
    """Running mean and population variance per stream (Welford updates)."""

    n_streams: int = 3
    count: int = 0
    mean: np.ndarray = field(default=None)
    m2: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.n_streams)
        if self.m2 is None:
            self.m2 = np.zeros(self.n_streams)

    @property
    def std(self) -> np.ndarray:
        if self.count == 0:
            return np.zeros(self.n_streams)
        return np.sqrt(self.m2 / self.count)

    def update(self, x) -> None:
        x = np.asarray(x, dtype=float)
        self.count += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.count
        self.m2 = self.m2 + delta * (x - self.mean)

    def normalize(self, x, eps: float = 1e-8) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / (self.std + eps)

    def state_dict(self) -> dict:
        return {"count": self.count, "mean": self.mean.tolist(), "m2": self.m2.tolist()}


def update_and_normalize(norm: StreamNormalizer, streams, cfg: ShapingConfig):
    """Update the statistics with this sample, then normalize and clip it.

    Returns ``(n1, n2, n3, total)``. With ``use_norm=False`` the raw streams and
    their sum are returned and the statistics are left untouched.
    """
    x = np.asarray(streams, dtype=float)
    if not cfg.use_norm:
        return float(x[0]), float(x[1]), float(x[2]), float(x.sum())
    norm.update(x)
    z = np.clip(norm.normalize(x, cfg.eps), -cfg.clip_c, cfg.clip_c)
    return float(z[0]), float(z[1]), float(z[2]), float(z.sum())


def shaped_streams(obs_next: Observation, r_phi: float, lam: float, cfg: ShapingConfig):
    """Raw streams and the mask for the observation reached after an action."""
    m = safety_mask(obs_next, cfg)
    r_ext = external_reward_tl(obs_next, cfg.lambda_delay)
    return mixed_streams(r_ext, r_phi, m, lam, cfg), m


__all__ = [
    "ShapingConfig", "StreamNormalizer", "VARIANTS", "lambda_schedule", "mixed_streams",
    "safety_mask", "shaped_streams", "update_and_normalize", "variant_config",
]
