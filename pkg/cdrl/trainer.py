"""Double DQN training: replay memory, exploration schedule, TD targets and the loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import gymnasium as gym
import numpy as np
import pandas as pd
from gymnasium.wrappers import TimeLimit

from .checkpoint import checkpoint_name, save_checkpoint
from .errors import ConfigError, NumericError, ShapeError, UsageError
from .gate import GateConfig
from .nn import Adam, clip_grad_norm
from .pong import EnvConfig, PongEnv
from .qnet import ModelConfig, QNetwork, build_network

logger = logging.getLogger(__name__)

LOG_COLUMNS = [
    "step",
    "episode",
    "reward",
    "ema_reward",
    "loss",
    "epsilon",
    "global_gain",
]
EPS_SCHEDULES = ("exponential", "linear")


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    batch_size: int = 64
    num_episodes: int = 1500
    eps_start: float = 1.0
    eps_end: float = 0.01
    eps_decay: int = 200000
    target_update_freq: int = 1000
    learning_rate: float = 5e-7
    memory_size: int = 100000
    save_every: int = 500
    grad_clip: float = 10.0
    ema_alpha: float = 0.05
    eps_schedule: str = "exponential"
    max_episode_steps: int = 50000
    workers: int = 1

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ConfigError(f"train.gamma must be in (0, 1), got {self.gamma}")
        if not 0 <= self.eps_end <= self.eps_start <= 1:
            raise ConfigError(
                "train.eps_end <= train.eps_start must hold within [0, 1], got "
                f"{self.eps_end} and {self.eps_start}"
            )
        for name in (
            "batch_size",
            "eps_decay",
            "target_update_freq",
            "memory_size",
            "save_every",
            "max_episode_steps",
            "workers",
        ):
            value = getattr(self, name)
            if value < 1:
                raise ConfigError(f"train.{name} must be >= 1, got {value}")
        if self.num_episodes < 0:
            raise ConfigError(
                f"train.num_episodes must be >= 0, got {self.num_episodes}"
            )
        if self.batch_size > self.memory_size:
            raise ConfigError("train.batch_size cannot exceed train.memory_size")
        if not self.learning_rate > 0:
            raise ConfigError(
                f"train.learning_rate must be > 0, got {self.learning_rate}"
            )
        if not self.grad_clip > 0:
            raise ConfigError(f"train.grad_clip must be > 0, got {self.grad_clip}")
        if not 0 < self.ema_alpha <= 1:
            raise ConfigError(
                f"train.ema_alpha must be in (0, 1], got {self.ema_alpha}"
            )
        if self.eps_schedule not in EPS_SCHEDULES:
            raise ConfigError(
                f"train.eps_schedule must be one of {EPS_SCHEDULES}, "
                f"got {self.eps_schedule!r}"
            )


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray
    done: bool


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)


class ReplayBuffer:
    """Fixed-capacity ring of transitions, oldest overwritten first.

    ``quantize`` stores observations in [0, 1] as uint8. ``share_frames`` stores
    only the newest frame of ``s_next``; the rest is ``s`` shifted by one frame,
    which holds for frame-stack observations.
    """

    def __init__(
        self,
        capacity: int,
        obs_shape: tuple[int, ...],
        quantize: bool = False,
        share_frames: bool = False,
    ):
        if capacity < 1:
            raise ConfigError(f"replay capacity must be >= 1, got {capacity}")
        if share_frames and len(obs_shape) < 2:
            raise ConfigError("share_frames needs stacked observations")
        self.capacity = capacity
        self.obs_shape = tuple(obs_shape)
        self.quantize = quantize
        self.share_frames = share_frames
        dtype = np.uint8 if quantize else np.float32
        self._states = np.zeros((capacity, *obs_shape), dtype=dtype)
        next_shape = obs_shape[1:] if share_frames else obs_shape
        self._next = np.zeros((capacity, *next_shape), dtype=dtype)
        self._actions = np.zeros(capacity, dtype=np.int64)
        self._rewards = np.zeros(capacity, dtype=np.float32)
        self._dones = np.zeros(capacity, dtype=bool)
        self.cursor = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def _encode(self, obs: np.ndarray) -> np.ndarray:
        if self.quantize:
            return np.round(np.clip(obs, 0.0, 1.0) * 255).astype(np.uint8)
        return obs

    def _decode(self, stored: np.ndarray) -> np.ndarray:
        if self.quantize:
            return stored.astype(np.float32) / 255.0
        return stored

    def push(self, transition: Transition) -> None:
        shapes = (transition.s.shape, transition.s_next.shape)
        if shapes != (self.obs_shape, self.obs_shape):
            raise ShapeError(
                f"transition shapes {shapes[0]}/{shapes[1]} do not "
                f"match buffer {self.obs_shape}"
            )
        i = self.cursor
        self._states[i] = self._encode(transition.s)
        s_next = transition.s_next[-1] if self.share_frames else transition.s_next
        self._next[i] = self._encode(s_next)
        self._actions[i] = transition.a
        self._rewards[i] = transition.r
        self._dones[i] = transition.done
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        """Uniform sample without replacement within the batch."""
        if not 1 <= batch_size <= self.size:
            raise UsageError(f"cannot sample {batch_size} transitions from {self.size}")
        idx = rng.choice(self.size, size=batch_size, replace=False)
        states = self._decode(self._states[idx])
        if self.share_frames:
            newest = self._decode(self._next[idx])[:, None]
            next_states = np.concatenate([states[:, 1:], newest], axis=1)
        else:
            next_states = self._decode(self._next[idx])
        return Batch(
            states=states,
            actions=self._actions[idx],
            rewards=self._rewards[idx],
            next_states=next_states,
            dones=self._dones[idx],
        )


@dataclass
class RewardTracker:
    """Exponential moving average of episode rewards; the first reward seeds it."""

    alpha: float = 0.05
    ema: float | None = None
    history: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ConfigError(f"EMA alpha must be in (0, 1], got {self.alpha}")

    def update(self, reward: float) -> float:
        self.history.append(float(reward))
        if self.ema is None:
            self.ema = float(reward)
        else:
            self.ema = self.alpha * reward + (1.0 - self.alpha) * self.ema
        return self.ema


def ema_reward(tracker: RewardTracker, reward: float) -> RewardTracker:
    tracker.update(reward)
    return tracker


def epsilon(step: int, config: TrainConfig) -> float:
    if step < 0:
        raise UsageError(f"epsilon schedule needs step >= 0, got {step}")
    span = config.eps_start - config.eps_end
    if config.eps_schedule == "linear":
        fraction = min(step / config.eps_decay, 1.0)
        return config.eps_start - fraction * span
    return config.eps_end + span * math.exp(-step / config.eps_decay)


def select_action(q: np.ndarray, eps: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy; greedy ties go to the lowest action index."""
    if rng.random() < eps:
        return int(rng.integers(len(q)))
    return int(np.argmax(q))


def td_target(
    batch: Batch, gamma: float, online: QNetwork, target: QNetwork
) -> np.ndarray:
    """Online network picks the bootstrap action, target network values it."""
    best = np.argmax(online.forward(batch.next_states, update_gate=False), axis=1)
    q_target = target.forward(batch.next_states, update_gate=False)
    bootstrap = q_target[np.arange(len(batch)), best].astype(np.float64)
    y = batch.rewards + gamma * np.where(batch.dones, 0.0, bootstrap)
    return y.astype(online.dtype)


def td_loss(online: QNetwork, batch: Batch, targets: np.ndarray) -> float:
    """Mean squared TD error; leaves gradients in the online network's parameters."""
    online.zero_grad()
    q = online.forward(batch.states)
    rows = np.arange(len(batch))
    diff = q[rows, batch.actions] - targets
    loss = float(np.mean(np.square(diff, dtype=np.float64)))
    if not math.isfinite(loss):
        raise NumericError("non-finite TD loss")
    dq = np.zeros_like(q)
    dq[rows, batch.actions] = 2.0 * diff / len(batch)
    online.backward(dq)
    return loss


def sync_target(online: QNetwork, target: QNetwork, step: int, freq: int) -> bool:
    if step % freq != 0:
        return False
    target.copy_from(online)
    return True


@dataclass
class TrainResult:
    checkpoint: Path | None
    log_path: Path | None
    episode_rewards: list[float] = field(default_factory=list)
    ema_rewards: list[float] = field(default_factory=list)
    steps: int = 0


class DDQNTrainer:
    """Single-threaded DDQN over any gymnasium env with a discrete action space."""

    def __init__(
        self,
        env: gym.Env,
        online: QNetwork,
        config: TrainConfig,
        seed: int = 0,
        buffer: ReplayBuffer | None = None,
        log_path: Path | None = None,
        checkpoint_dir: Path | None = None,
    ):
        self.env = env
        self.online = online
        self.target = online.clone()
        self.config = config
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.buffer = buffer or ReplayBuffer(config.memory_size, online.input_shape)
        self.optimizer = Adam(online.trainable_parameters(), lr=config.learning_rate)
        self.tracker = RewardTracker(alpha=config.ema_alpha)
        self.log_path = Path(log_path) if log_path else None
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.total_steps = 0
        self.grad_steps = 0
        self.last_checkpoint: Path | None = None

    def learn(self) -> float:
        """One gradient step on a sampled batch, then the target schedule."""
        batch = self.buffer.sample(self.config.batch_size, self.rng)
        y = td_target(batch, self.config.gamma, self.online, self.target)
        loss = td_loss(self.online, batch, y)
        clip_grad_norm(self.online.trainable_parameters(), self.config.grad_clip)
        self.optimizer.step()
        self.grad_steps += 1
        freq = self.config.target_update_freq
        if sync_target(self.online, self.target, self.grad_steps, freq):
            logger.debug("target synced at gradient step %d", self.grad_steps)
        return loss

    def _step(self, obs: np.ndarray, eps: float):
        """Act, store the transition, then learn once the buffer holds a batch."""
        action = select_action(self.online.q_values(obs), eps, self.rng)
        next_obs, reward, terminated, truncated, _ = self.env.step(action)
        self.buffer.push(Transition(obs, action, reward, next_obs, terminated))
        self.total_steps += 1
        loss = float("nan")
        if len(self.buffer) >= self.config.batch_size:
            loss = self.learn()
        return next_obs, reward, terminated, truncated, loss

    def run_episode(self, episode: int) -> float:
        seed = self.seed if episode == 1 else None
        obs, _ = self.env.reset(seed=seed)
        total = 0.0
        rows = []
        while True:
            step = self.total_steps + 1
            eps = epsilon(self.total_steps, self.config)
            try:
                next_obs, reward, terminated, truncated, loss = self._step(obs, eps)
            except NumericError as e:
                raise NumericError(f"training aborted at step {step}: {e}") from e
            total += reward

            rows.append(
                {
                    "step": self.total_steps,
                    "episode": episode,
                    "reward": total,
                    "ema_reward": self.tracker.ema,
                    "loss": loss,
                    "epsilon": eps,
                    "global_gain": self.online.last_global_gain,
                }
            )
            obs = next_obs
            if terminated or truncated:
                break

        self.tracker.update(total)
        self._append_log(rows)
        logger.info(
            "episode %d: steps=%d reward=%.1f ema=%.3f eps=%.3f",
            episode,
            len(rows),
            total,
            self.tracker.ema,
            epsilon(self.total_steps, self.config),
        )
        return total

    def _append_log(self, rows: list[dict]) -> None:
        if self.log_path is None:
            return
        frame = pd.DataFrame(rows, columns=LOG_COLUMNS)
        write_header = not self.log_path.exists()
        frame.to_csv(self.log_path, mode="a", header=write_header, index=False)

    def save(self, episode: int) -> Path | None:
        if self.checkpoint_dir is None:
            return None
        name = checkpoint_name(self.online.kind, self.seed, episode)
        path = self.checkpoint_dir / name
        self.last_checkpoint = save_checkpoint(
            self.online,
            path,
            extra={"seed": self.seed, "episode": episode, "steps": self.total_steps},
        )
        return self.last_checkpoint

    def train(self) -> TrainResult:
        if self.log_path is not None:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            pd.DataFrame(columns=LOG_COLUMNS).to_csv(self.log_path, index=False)

        result = TrainResult(checkpoint=None, log_path=self.log_path)
        if self.config.num_episodes == 0:
            result.checkpoint = self.save(0)
            return result

        for episode in range(1, self.config.num_episodes + 1):
            result.episode_rewards.append(self.run_episode(episode))
            result.ema_rewards.append(self.tracker.ema)
            if episode % self.config.save_every == 0:
                self.save(episode)
        if self.config.num_episodes % self.config.save_every != 0:
            self.save(self.config.num_episodes)
        result.checkpoint = self.last_checkpoint
        result.steps = self.total_steps
        return result


def make_env(env_config: EnvConfig, max_episode_steps: int) -> gym.Env:
    return TimeLimit(PongEnv(env_config), max_episode_steps=max_episode_steps)


def train(
    env_config: EnvConfig,
    train_config: TrainConfig,
    model_kind: str,
    seed: int,
    model_config: ModelConfig | None = None,
    gate_config: GateConfig | None = None,
    log_path: Path | None = None,
    checkpoint_dir: Path | None = None,
) -> TrainResult:
    """Train one Pong agent and write its log and checkpoints."""
    env = make_env(env_config, train_config.max_episode_steps)
    obs_shape = env.observation_space.shape
    network = build_network(model_kind, model_config, gate_config, obs_shape, seed=seed)
    buffer = ReplayBuffer(
        train_config.memory_size, obs_shape, quantize=True, share_frames=True
    )
    trainer = DDQNTrainer(
        env,
        network,
        train_config,
        seed=seed,
        buffer=buffer,
        log_path=log_path,
        checkpoint_dir=checkpoint_dir,
    )
    logger.info(
        "training %s seed=%d for %d episodes",
        model_kind,
        seed,
        train_config.num_episodes,
    )
    return trainer.train()
