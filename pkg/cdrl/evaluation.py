"""Greedy-policy evaluation under observation and action noise."""

from __future__ import annotations

import dataclasses
import logging
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import ConfigError, UsageError
from .pong import Action, EnvConfig
from .qnet import QNetwork
from .trainer import make_env

logger = logging.getLogger(__name__)

OBS_SIGMAS = (0.0, 1.0, 2.0, 3.0, 5.0, 10.0)
ACT_PROBS = (0.0, 0.05, 0.10, 0.15, 0.20, 0.30)
STICKY_PROB = 0.25

# test id -> (ball_speed_x, ball_speed_y, paddle_height, paddle_speed)
GENERALIZATION_TABLE: dict[str, tuple[int, int, int, int]] = {
    "train": (12, 8, 80, 5),
    "test1": (15, 10, 80, 5),
    "test2": (18, 12, 80, 5),
    "test3": (12, 8, 60, 5),
    "test4": (12, 8, 20, 5),
    "test5": (12, 8, 80, 2),
    "test6": (12, 8, 80, 3),
    "test7": (12, 8, 80, 4),
}

EVAL_COLUMNS = [
    "obs_sigma",
    "act_prob",
    "sticky_prob",
    "model",
    "seed",
    "win_rate",
    "mean_reward",
]
GENERALIZATION_COLUMNS = ["test_id", "model", "seed", "win_rate", "mean_reward"]


@dataclass(frozen=True)
class NoiseSpec:
    """Perturbations applied to the evaluated agent only."""

    obs_sigma: float = 0.0
    act_prob: float = 0.0
    sticky_prob: float = 0.0
    noise_seed: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.obs_sigma) and self.obs_sigma >= 0):
            raise ConfigError(f"noise.obs_sigma must be >= 0, got {self.obs_sigma}")
        for name in ("act_prob", "sticky_prob"):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise ConfigError(f"noise.{name} must be in [0, 1], got {value}")
        if self.act_prob > 0 and self.sticky_prob > 0:
            raise ConfigError(
                "noise.act_prob and noise.sticky_prob cannot both be active"
            )

    @property
    def label(self) -> str:
        if self.sticky_prob > 0:
            return f"obs={self.obs_sigma:g} sticky={self.sticky_prob:g}"
        return f"obs={self.obs_sigma:g} act={self.act_prob:g}"


def add_obs_noise(
    obs: np.ndarray, sigma: float, rng: np.random.Generator
) -> np.ndarray:
    """Additive Gaussian pixel noise; the result is not clipped back to [0, 1]."""
    if sigma < 0:
        raise UsageError(f"observation noise sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return obs.copy()
    return obs + rng.normal(0.0, sigma, size=obs.shape).astype(obs.dtype)


def perturb_action(
    action: int, p: float, rng: np.random.Generator, num_actions: int = len(Action)
) -> int:
    """With probability p replace the action by a uniform draw (which may equal it)."""
    if rng.random() < p:
        return int(rng.integers(num_actions))
    return action


def sticky_action(
    action: int, prev: int | None, p: float, rng: np.random.Generator
) -> int:
    """With probability p repeat the previous action; the first step has none."""
    if prev is None:
        return action
    return prev if rng.random() < p else action


@dataclass
class EvalReport:
    env_id: str
    model: str
    noise: NoiseSpec
    episodes: int
    seeds: list[int] = field(default_factory=list)
    win_rates: list[float] = field(default_factory=list)
    mean_rewards: list[float] = field(default_factory=list)

    @property
    def win_rate_mean(self) -> float:
        return float(np.mean(self.win_rates))

    @property
    def win_rate_std(self) -> float:
        return float(np.std(self.win_rates))

    @property
    def reward_mean(self) -> float:
        return float(np.mean(self.mean_rewards))

    @property
    def reward_std(self) -> float:
        return float(np.std(self.mean_rewards))

    def rows(self) -> list[dict]:
        return [
            {
                "test_id": self.env_id,
                "obs_sigma": self.noise.obs_sigma,
                "act_prob": self.noise.act_prob,
                "sticky_prob": self.noise.sticky_prob,
                "model": self.model,
                "seed": seed,
                "win_rate": win_rate,
                "mean_reward": reward,
            }
            for seed, win_rate, reward in zip(
                self.seeds, self.win_rates, self.mean_rewards, strict=True
            )
        ]


def play_episodes(
    network: QNetwork,
    env_config: EnvConfig,
    noise: NoiseSpec,
    episodes: int,
    seed: int,
    max_episode_steps: int = 50000,
) -> tuple[float, float]:
    """Roll out the greedy policy; returns (win rate, mean episode reward)."""
    env = make_env(env_config, max_episode_steps)
    rng = np.random.default_rng([noise.noise_seed, seed])
    wins = 0
    rewards = []
    for episode in range(episodes):
        obs, _ = env.reset(seed=seed if episode == 0 else None)
        prev = None
        total = 0.0
        while True:
            q = network.q_values(add_obs_noise(obs, noise.obs_sigma, rng))
            action = int(np.argmax(q))
            if noise.act_prob > 0:
                action = perturb_action(action, noise.act_prob, rng)
            if noise.sticky_prob > 0:
                action = sticky_action(action, prev, noise.sticky_prob, rng)
            prev = action
            obs, reward, terminated, truncated, info = env.step(action)
            total += reward
            if terminated or truncated:
                break
        if terminated and info["score_left"] >= env_config.max_score:
            wins += 1
        rewards.append(total)
    return wins / episodes, float(np.mean(rewards))


def evaluate(
    network: QNetwork,
    env_config: EnvConfig,
    noise: NoiseSpec,
    episodes: int,
    seeds: Sequence[int],
    max_episode_steps: int = 50000,
    model_id: str | None = None,
    env_id: str = "train",
) -> EvalReport:
    """Evaluate one condition over several seeds, each with a fresh gate state."""
    if episodes < 1:
        raise ConfigError(f"eval.episodes must be >= 1, got {episodes}")
    if not seeds:
        raise ConfigError("evaluation needs at least one seed")
    report = EvalReport(
        env_id=env_id, model=model_id or network.kind, noise=noise, episodes=episodes
    )
    for seed in seeds:
        agent = network.clone()
        agent.reset_gate()
        win_rate, reward = play_episodes(
            agent, env_config, noise, episodes, seed, max_episode_steps
        )
        report.seeds.append(seed)
        report.win_rates.append(win_rate)
        report.mean_rewards.append(reward)
    logger.info(
        "%s [%s, %s]: win rate %.3f +/- %.3f",
        report.model,
        env_id,
        noise.label,
        report.win_rate_mean,
        report.win_rate_std,
    )
    return report


@dataclass(frozen=True)
class EvalCell:
    model: str
    env_id: str
    env_config: EnvConfig
    noise: NoiseSpec


def run_cells(
    cells: Sequence[EvalCell],
    models: dict[str, QNetwork],
    episodes: int,
    seeds: Sequence[int],
    workers: int = 1,
    max_episode_steps: int = 50000,
    on_result: Callable[[EvalCell, EvalReport], None] | None = None,
) -> list[EvalReport]:
    """Evaluate independent cells in parallel; results come back in cell order."""
    if workers < 1:
        raise ConfigError(f"eval.workers must be >= 1, got {workers}")

    def run(cell: EvalCell) -> EvalReport:
        return evaluate(
            models[cell.model],
            cell.env_config,
            cell.noise,
            episodes,
            seeds,
            max_episode_steps,
            model_id=cell.model,
            env_id=cell.env_id,
        )

    reports: list[EvalReport | None] = [None] * len(cells)
    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = {executor.submit(run, cell): i for i, cell in enumerate(cells)}
        for future in as_completed(futures):
            i = futures[future]
            reports[i] = future.result()
            if on_result is not None:
                on_result(cells[i], reports[i])
    return reports


def grid_cells(
    model_ids: Iterable[str],
    env_config: EnvConfig,
    obs_sigmas: Sequence[float] = OBS_SIGMAS,
    act_probs: Sequence[float] = ACT_PROBS,
) -> list[EvalCell]:
    cells = []
    for model in model_ids:
        for i, sigma in enumerate(obs_sigmas):
            for j, p in enumerate(act_probs):
                noise = NoiseSpec(
                    obs_sigma=sigma, act_prob=p, noise_seed=i * len(act_probs) + j
                )
                cells.append(EvalCell(model, "train", env_config, noise))
    return cells


def robustness_grid(
    models: dict[str, QNetwork],
    env_config: EnvConfig,
    episodes: int,
    seeds: Sequence[int],
    workers: int = 1,
    max_episode_steps: int = 50000,
    obs_sigmas: Sequence[float] = OBS_SIGMAS,
    act_probs: Sequence[float] = ACT_PROBS,
    on_result: Callable[[EvalCell, EvalReport], None] | None = None,
) -> list[EvalReport]:
    """Every model over obs_sigma x act_prob."""
    if not models:
        raise ConfigError("robustness grid needs at least one model")
    cells = grid_cells(models, env_config, obs_sigmas, act_probs)
    return run_cells(
        cells, models, episodes, seeds, workers, max_episode_steps, on_result
    )


def win_rate_matrix(reports: Iterable[EvalReport], model: str) -> pd.DataFrame:
    """Mean win rate with rows obs_sigma and columns act_prob."""
    frame = pd.DataFrame(
        [
            {
                "obs_sigma": r.noise.obs_sigma,
                "act_prob": r.noise.act_prob,
                "win_rate": r.win_rate_mean,
            }
            for r in reports
            if r.model == model and r.noise.sticky_prob == 0
        ]
    )
    if frame.empty:
        raise ConfigError(f"no grid results for model {model!r}")
    return frame.pivot(index="obs_sigma", columns="act_prob", values="win_rate")


def difference_grid(
    reports: Sequence[EvalReport], model_a: str, model_b: str
) -> pd.DataFrame:
    """Win-rate difference A - B per grid cell."""
    return win_rate_matrix(reports, model_a) - win_rate_matrix(reports, model_b)


def generalization_configs(base: EnvConfig) -> dict[str, EnvConfig]:
    """Environment per test row; paddle changes apply to the agent's paddle only."""
    configs = {}
    for test_id, (speed_x, speed_y, height, speed) in GENERALIZATION_TABLE.items():
        configs[test_id] = dataclasses.replace(
            base,
            ball_speed_x=speed_x,
            ball_speed_y=speed_y,
            agent_paddle_height=None if height == base.paddle_height else height,
            agent_paddle_speed=None if speed == base.paddle_speed else speed,
        )
    return configs


def generalization_sweep(
    models: dict[str, QNetwork],
    env_config: EnvConfig,
    episodes: int,
    seeds: Sequence[int],
    workers: int = 1,
    max_episode_steps: int = 50000,
    on_result: Callable[[EvalCell, EvalReport], None] | None = None,
) -> list[EvalReport]:
    """Noise-free evaluation of every model on every test environment."""
    if not models:
        raise ConfigError("generalization sweep needs at least one model")
    configs = generalization_configs(env_config)
    cells = [
        EvalCell(model, test_id, config, NoiseSpec())
        for model in models
        for test_id, config in configs.items()
    ]
    return run_cells(
        cells, models, episodes, seeds, workers, max_episode_steps, on_result
    )


def reports_frame(reports: Iterable[EvalReport], columns: Sequence[str] = EVAL_COLUMNS):
    rows = [row for report in reports for row in report.rows()]
    return pd.DataFrame(rows, columns=list(columns))
