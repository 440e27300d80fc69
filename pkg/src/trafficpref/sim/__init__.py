from .config import CarFollowing, ConfigError, SimConfig, Surge, dump_config, load_config
from .engine import (
    Network,
    SimState,
    external_reward_tl,
    init_network,
    percentile_lower,
    pressure_reward,
    step,
    ttc_statistics,
)
from .metrics import episode_metrics, metrics_from_log, run_episode
from .types import APPROACHES, EpisodeMetrics, Observation, Phase, PhaseState, Stage, StepEvents

__all__ = [
    "APPROACHES", "CarFollowing", "ConfigError", "EpisodeMetrics", "Network", "Observation",
    "Phase", "PhaseState", "SimConfig", "SimState", "Stage", "StepEvents", "Surge", "dump_config",
    "episode_metrics", "external_reward_tl", "init_network", "load_config", "metrics_from_log",
    "percentile_lower", "pressure_reward", "run_episode", "step", "ttc_statistics",
]
