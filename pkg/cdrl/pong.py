"""Headless two-paddle Pong with a ball-tracking opponent."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import IntEnum
from functools import lru_cache
from typing import Any

import gymnasium as gym
import numpy as np
from gymnasium import spaces

from .errors import ConfigError, UsageError


class Action(IntEnum):
    """Discrete agent actions."""

    UP = 0
    DOWN = 1
    NOOP = 2


@dataclass(frozen=True)
class EnvConfig:
    """Physics and preprocessing parameters (pixels, pixels/frame)."""

    field_width: int = 640
    field_height: int = 480
    ball_speed_x: int = 12
    ball_speed_y: int = 8
    paddle_height: int = 80
    paddle_width: int = 10
    paddle_speed: int = 5
    max_score: int = 21
    frame_skip_fps: int = 1920  # headless simulation cap, never throttled
    stack_size: int = 4
    obs_side: int = 84
    rng_seed: int = 0
    ball_size: int = 10
    paddle_margin: int = 20
    agent_paddle_height: int | None = None
    agent_paddle_speed: int | None = None

    def __post_init__(self):
        for name in ("ball_speed_x", "ball_speed_y", "paddle_speed", "paddle_width"):
            value = getattr(self, name)
            if value <= 0:
                raise ConfigError(f"env.{name} must be > 0, got {value}")
        if self.agent_paddle_speed is not None and self.agent_paddle_speed <= 0:
            raise ConfigError(
                f"env.agent_paddle_speed must be > 0, got {self.agent_paddle_speed}"
            )
        for name in ("paddle_height", "agent_paddle_height"):
            value = getattr(self, name)
            if value is not None and not 0 < value < self.field_height:
                raise ConfigError(
                    f"env.{name} must be in (0, field_height={self.field_height}), "
                    f"got {value}"
                )
        if self.max_score < 1:
            raise ConfigError(f"env.max_score must be >= 1, got {self.max_score}")
        if self.stack_size < 1:
            raise ConfigError(f"env.stack_size must be >= 1, got {self.stack_size}")
        smallest = min(self.field_width, self.field_height)
        if not 1 <= self.obs_side <= smallest:
            raise ConfigError(
                f"env.obs_side must be in [1, {smallest}]"
                f", got {self.obs_side}"
            )
        if not 0 < self.ball_size < smallest:
            raise ConfigError(f"env.ball_size out of range: {self.ball_size}")
        if self.paddle_margin < 0:
            raise ConfigError(
                f"env.paddle_margin must be >= 0, got {self.paddle_margin}"
            )
        paddles = 2 * (self.paddle_margin + self.paddle_width)
        if paddles + self.ball_size >= self.field_width:
            raise ConfigError("env.field_width too small for paddles and ball")

    @property
    def agent_height(self) -> int:
        if self.agent_paddle_height is None:
            return self.paddle_height
        return self.agent_paddle_height

    @property
    def agent_speed(self) -> int:
        if self.agent_paddle_speed is None:
            return self.paddle_speed
        return self.agent_paddle_speed

    @property
    def left_face(self) -> int:
        """x coordinate of the agent paddle's hitting face."""
        return self.paddle_margin + self.paddle_width

    @property
    def right_face(self) -> int:
        """x coordinate of the opponent paddle's hitting face."""
        return self.field_width - self.paddle_margin - self.paddle_width


@dataclass(frozen=True)
class EnvState:
    """Game state after a reset or a step.

    ``ball_pos`` is the top-left corner of the ball square. ``frame_history``
    holds the downsampled frames, oldest first.
    """

    ball_pos: tuple[int, int]
    ball_vel: tuple[int, int]
    left_paddle_y: int
    right_paddle_y: int
    score_left: int = 0
    score_right: int = 0
    step_count: int = 0
    rng_state: dict[str, Any] = field(default_factory=dict)
    frame_history: tuple[np.ndarray, ...] = field(default=(), compare=False)

    def is_terminal(self, config: EnvConfig) -> bool:
        return max(self.score_left, self.score_right) >= config.max_score


@lru_cache(maxsize=16)
def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) matrix averaging each output cell's share of the input."""
    weights = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        lo, hi = i * scale, (i + 1) * scale
        for j in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_in)):
            overlap = min(hi, j + 1) - max(lo, j)
            if overlap > 0:
                weights[i, j] = overlap / scale
    weights.setflags(write=False)
    return weights


def _fill(canvas: np.ndarray, x: int, y: int, width: int, height: int) -> None:
    rows, cols = canvas.shape
    y0, y1 = max(0, y), min(rows, y + height)
    x0, x1 = max(0, x), min(cols, x + width)
    if y1 > y0 and x1 > x0:
        canvas[y0:y1, x0:x1] = 1.0


def rasterize(state: EnvState, config: EnvConfig) -> np.ndarray:
    """Draw paddles and ball at native resolution, then area-average to obs_side."""
    canvas = np.zeros((config.field_height, config.field_width), dtype=np.float64)
    _fill(
        canvas,
        config.paddle_margin,
        state.left_paddle_y,
        config.paddle_width,
        config.agent_height,
    )
    _fill(
        canvas,
        config.right_face,
        state.right_paddle_y,
        config.paddle_width,
        config.paddle_height,
    )
    x, y = state.ball_pos
    _fill(canvas, x, y, config.ball_size, config.ball_size)

    rows = _area_weights(config.field_height, config.obs_side)
    cols = _area_weights(config.field_width, config.obs_side)
    frame = rows @ canvas @ cols.T
    return np.clip(frame, 0.0, 1.0).astype(np.float32)


def _overlaps(ball_y: int, ball_size: int, paddle_y: int, paddle_height: int) -> bool:
    return ball_y + ball_size > paddle_y and ball_y < paddle_y + paddle_height


class PongEnv(gym.Env):
    """Agent controls the left paddle; the right paddle tracks the ball.

    Observations are ``(stack_size, obs_side, obs_side)`` float32 stacks in [0, 1].
    Rewards are +1 when the agent scores and -1 when it concedes.
    """

    metadata = {"render_modes": [], "render_fps": 1920}

    def __init__(self, config: EnvConfig | None = None):
        self.config = config or EnvConfig()
        self.metadata = {**self.metadata, "render_fps": self.config.frame_skip_fps}
        self.action_space = spaces.Discrete(len(Action))
        side = self.config.obs_side
        self.observation_space = spaces.Box(
            low=0.0,
            high=1.0,
            shape=(self.config.stack_size, side, side),
            dtype=np.float32,
        )
        self.state: EnvState | None = None

    def reset(
        self, *, seed: int | None = None, options: dict[str, Any] | None = None
    ) -> tuple[np.ndarray, dict[str, Any]]:
        if seed is None and self._np_random is None:
            seed = self.config.rng_seed
        super().reset(seed=seed)

        cfg = self.config
        ball_pos = (cfg.field_width // 2, cfg.field_height // 2)
        ball_vel = (-cfg.ball_speed_x, self._vertical_sign() * cfg.ball_speed_y)
        state = EnvState(
            ball_pos=ball_pos,
            ball_vel=ball_vel,
            left_paddle_y=(cfg.field_height - cfg.agent_height) // 2,
            right_paddle_y=(cfg.field_height - cfg.paddle_height) // 2,
            rng_state=self.np_random.bit_generator.state,
        )
        frame = rasterize(state, cfg)
        self.state = dataclasses.replace(
            state, frame_history=(frame,) * cfg.stack_size
        )
        return self.observation(), self._info()

    def step(self, action: int) -> tuple[np.ndarray, float, bool, bool, dict[str, Any]]:
        if self.state is None:
            raise UsageError("step() called before reset()")
        if self.state.is_terminal(self.config):
            raise UsageError("step() called on a terminal state; call reset() first")
        try:
            action = Action(int(action))
        except ValueError as e:
            raise UsageError(f"invalid action {action!r}") from e

        cfg = self.config
        state = self.state
        left_y = self._move_agent(state.left_paddle_y, action)
        right_y = self._track_ball(state.right_paddle_y, state.ball_pos[1])

        (x, y), (vx, vy) = state.ball_pos, state.ball_vel
        nx, ny = x + vx, y + vy

        floor = cfg.field_height - cfg.ball_size
        if ny < 0:
            ny, vy = -ny, -vy
        elif ny > floor:
            ny, vy = 2 * floor - ny, -vy

        if vx < 0 and nx < cfg.left_face <= x:
            if _overlaps(ny, cfg.ball_size, left_y, cfg.agent_height):
                nx, vx = 2 * cfg.left_face - nx, -vx
        elif vx > 0 and nx + cfg.ball_size > cfg.right_face >= x + cfg.ball_size:
            if _overlaps(ny, cfg.ball_size, right_y, cfg.paddle_height):
                nx, vx = 2 * (cfg.right_face - cfg.ball_size) - nx, -vx

        score_left, score_right = state.score_left, state.score_right
        reward = 0
        if nx < 0:
            score_right += 1
            reward = -1
        elif nx + cfg.ball_size > cfg.field_width:
            score_left += 1
            reward = 1

        terminated = max(score_left, score_right) >= cfg.max_score
        if reward and terminated:
            nx = 0 if reward < 0 else cfg.field_width - cfg.ball_size
        elif reward:
            # serve toward whoever just conceded
            nx, ny = cfg.field_width // 2, cfg.field_height // 2
            vx = -cfg.ball_speed_x if reward < 0 else cfg.ball_speed_x
            vy = self._vertical_sign() * cfg.ball_speed_y

        next_state = EnvState(
            ball_pos=(nx, ny),
            ball_vel=(vx, vy),
            left_paddle_y=left_y,
            right_paddle_y=right_y,
            score_left=score_left,
            score_right=score_right,
            step_count=state.step_count + 1,
            rng_state=self.np_random.bit_generator.state,
        )
        frame = rasterize(next_state, cfg)
        history = (*state.frame_history[1:], frame)
        self.state = dataclasses.replace(next_state, frame_history=history)
        return self.observation(), float(reward), terminated, False, self._info()

    def observation(self) -> np.ndarray:
        if self.state is None:
            raise UsageError("observation() called before reset()")
        return np.stack(self.state.frame_history)

    def _vertical_sign(self) -> int:
        return 1 if self.np_random.integers(2) else -1

    def _move_agent(self, paddle_y: int, action: Action) -> int:
        cfg = self.config
        if action == Action.UP:
            paddle_y -= cfg.agent_speed
        elif action == Action.DOWN:
            paddle_y += cfg.agent_speed
        return min(max(paddle_y, 0), cfg.field_height - cfg.agent_height)

    def _track_ball(self, paddle_y: int, ball_y: int) -> int:
        cfg = self.config
        center = paddle_y + cfg.paddle_height / 2
        target = ball_y + cfg.ball_size / 2
        dead_zone = cfg.paddle_height / 4
        if target > center + dead_zone:
            paddle_y += cfg.paddle_speed
        elif target < center - dead_zone:
            paddle_y -= cfg.paddle_speed
        return min(max(paddle_y, 0), cfg.field_height - cfg.paddle_height)

    def _info(self) -> dict[str, Any]:
        return {
            "score_left": self.state.score_left,
            "score_right": self.state.score_right,
            "step_count": self.state.step_count,
        }
