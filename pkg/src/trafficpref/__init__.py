"""Caption-based preference rewards for traffic-signal reinforcement learning."""

__version__ = "0.1.0"
