"""Self-play reinforcement learning for Tablut with a dual-head network and Gumbel search."""

__version__ = "0.1.0"
