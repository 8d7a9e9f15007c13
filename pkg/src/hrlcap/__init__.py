"""Hierarchical reinforcement-learning video captioner (Manager / Worker / Internal Critic)."""

__version__ = "0.1.0"
