"""Two-state deterministic chain for checking DDQN updates against value iteration."""

from __future__ import annotations

from typing import Any

import gymnasium as gym
import numpy as np
from gymnasium import spaces

from .errors import UsageError
from .nn import Dense, Layer, Parameter
from .pong import Action
from .qnet import QNetwork

NUM_STATES = 2


def _next_state(state: int, action: int) -> int:
    if action == Action.UP:
        return 1
    if action == Action.DOWN:
        return 0
    return state


def _reward(state: int, action: int) -> float:
    return 1.0 if state == 1 and action == Action.UP else 0.0


class ChainMDP(gym.Env):
    """Up moves to state 1, Down to state 0, NoOp stays; Up in state 1 pays +1.

    Episodes never terminate; they are truncated after ``horizon`` steps.
    """

    def __init__(self, horizon: int = 20):
        self.horizon = horizon
        self.action_space = spaces.Discrete(len(Action))
        self.observation_space = spaces.Box(
            0.0, 1.0, shape=(NUM_STATES,), dtype=np.float32
        )
        self.state: int | None = None
        self.steps = 0

    def _obs(self) -> np.ndarray:
        return np.eye(NUM_STATES, dtype=np.float32)[self.state]

    def reset(
        self, *, seed: int | None = None, options: dict[str, Any] | None = None
    ) -> tuple[np.ndarray, dict[str, Any]]:
        super().reset(seed=seed)
        self.state = int(self.np_random.integers(NUM_STATES))
        self.steps = 0
        return self._obs(), {}

    def step(self, action: int) -> tuple[np.ndarray, float, bool, bool, dict[str, Any]]:
        if self.state is None:
            raise UsageError("step() called before reset()")
        reward = _reward(self.state, action)
        self.state = _next_state(self.state, action)
        self.steps += 1
        return self._obs(), reward, False, self.steps >= self.horizon, {}


def value_iteration(
    gamma: float, tol: float = 1e-12, max_iter: int = 100000
) -> np.ndarray:
    """Exact Q* of the chain as a (states, actions) table."""
    q = np.zeros((NUM_STATES, len(Action)))
    for _ in range(max_iter):
        updated = np.array(
            [
                [_reward(s, a) + gamma * q[_next_state(s, a)].max() for a in Action]
                for s in range(NUM_STATES)
            ]
        )
        if np.max(np.abs(updated - q)) < tol:
            return updated
        q = updated
    return q


class LinearQNet(QNetwork):
    """A bias-free dense layer over the one-hot state: one weight per Q entry."""

    kind = "linear"

    def __init__(self, rng: np.random.Generator, num_actions: int = len(Action)):
        super().__init__((NUM_STATES,), num_actions)
        self.dense = Dense(NUM_STATES, num_actions, rng, name="q", bias=False)

    def layers(self) -> list[Layer]:
        return [self.dense]

    def parameters(self) -> list[Parameter]:
        return self.dense.parameters()

    def forward(self, obs: np.ndarray, update_gate: bool = True) -> np.ndarray:
        return self.dense.forward(self._check_input(obs))

    def backward(self, dq: np.ndarray) -> None:
        self.dense.backward(dq)

    def table(self) -> np.ndarray:
        """Q-values of every state, rows indexed by state."""
        return self.forward(np.eye(NUM_STATES, dtype=self.dtype), update_gate=False)
