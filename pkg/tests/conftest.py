"""Shared pytest fixtures."""

import numpy as np
import pytest

from cdrl.gate import GateConfig
from cdrl.pong import EnvConfig
from cdrl.qnet import ModelConfig, build_network
from cdrl.trainer import TrainConfig

# Miniature field: episodes end after a few dozen steps.
SMALL_ENV = {
    "field_width": 160,
    "field_height": 120,
    "paddle_margin": 5,
    "paddle_width": 4,
    "ball_size": 4,
    "obs_side": 12,
    "stack_size": 2,
    "max_score": 2,
}

TINY_MODEL = {
    "conv_layers": ((4, 4, 2), (4, 3, 1)),
    "mf_dim": 8,
    "grc_dim": 32,
    "fan_in": 3,
    "topk_fraction": 0.25,
    "num_pc": 2,
    "pc_density": 0.5,
    "cn_dim": 6,
    "baseline_hidden": (8, 16, 8, 6),
}

TINY_GATE = {"num_branches": 8, "select_fraction": 0.25}


@pytest.fixture
def small_env_config():
    return EnvConfig(**SMALL_ENV)


@pytest.fixture
def tiny_model_config():
    return ModelConfig(**TINY_MODEL)


@pytest.fixture
def tiny_gate_config():
    return GateConfig(**TINY_GATE)


@pytest.fixture
def tiny_train_config():
    return TrainConfig(
        num_episodes=1,
        batch_size=4,
        memory_size=64,
        eps_decay=50,
        target_update_freq=5,
        learning_rate=1e-3,
        max_episode_steps=40,
    )


@pytest.fixture
def obs_shape(small_env_config):
    side = small_env_config.obs_side
    return (small_env_config.stack_size, side, side)


@pytest.fixture
def make_net(tiny_model_config, tiny_gate_config, obs_shape):
    """Factory for tiny networks of any kind."""

    def make(kind="cdrl", seed=0, **model_overrides):
        config = ModelConfig(**{**TINY_MODEL, **model_overrides})
        return build_network(kind, config, tiny_gate_config, obs_shape, seed=seed)

    return make


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_config_file(tmp_path):
    """Config file describing the miniature setup, for CLI-level tests."""
    lines = [
        "# miniature run",
        *(f"env.{k} = {v}" for k, v in SMALL_ENV.items()),
        "model.conv_layers = 4x4x2,4x3x1",
        *(
            f"model.{k} = {v}"
            for k, v in TINY_MODEL.items()
            if k not in ("conv_layers", "baseline_hidden")
        ),
        "model.baseline_hidden = 8,16,8,6",
        *(f"gate.{k} = {v}" for k, v in TINY_GATE.items()),
        "train.num_episodes = 1",
        "train.batch_size = 4",
        "train.memory_size = 64",
        "train.max_episode_steps = 40",
        "eval.episodes = 1",
        "eval.max_episode_steps = 60",
        "seeds = 1",
    ]
    path = tmp_path / "small.conf"
    path.write_text("\n".join(lines) + "\n")
    return path
