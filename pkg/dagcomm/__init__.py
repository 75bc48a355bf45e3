"""Multi-agent reinforcement learning with communication over directed acyclic graphs."""

__version__ = "0.1.0"
