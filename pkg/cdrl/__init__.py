"""Cerebellum-inspired Q-networks trained with Double DQN on a headless Pong."""

__version__ = "0.1.0"
