"""Tests for the DDQN trainer."""

import dataclasses
import math

import numpy as np
import pandas as pd
import pytest

from cdrl import trainer as trainer_module
from cdrl.errors import ConfigError, NumericError, ShapeError, UsageError
from cdrl.qnet import CerebellarQNet
from cdrl.toy import LinearQNet
from cdrl.trainer import (
    LOG_COLUMNS,
    Batch,
    ReplayBuffer,
    RewardTracker,
    TrainConfig,
    Transition,
    ema_reward,
    epsilon,
    select_action,
    sync_target,
    td_loss,
    td_target,
    train,
)


def transition(reward, shape=(2,), done=False):
    obs = np.full(shape, reward / 10, dtype=np.float32)
    return Transition(obs, 0, float(reward), obs, done)


def one_step_batch(reward=0.0, done=False):
    return Batch(
        states=np.array([[1.0, 0.0]], dtype=np.float32),
        actions=np.array([0]),
        rewards=np.array([reward], dtype=np.float32),
        next_states=np.array([[0.0, 1.0]], dtype=np.float32),
        dones=np.array([done]),
    )


@pytest.fixture
def stub_networks(mocker):
    """Online prefers action 1, target would prefer action 2."""
    online = mocker.Mock()
    online.forward.return_value = np.array([[0.5, 2.0, 1.0]], dtype=np.float32)
    online.dtype = np.dtype(np.float32)
    target = mocker.Mock()
    target.forward.return_value = np.array([[1.0, 2.0, 3.0]], dtype=np.float32)
    target.dtype = np.dtype(np.float32)
    return online, target


@pytest.fixture
def flat_net(rng):
    """Linear net predicting 1.0 for every state and action."""
    net = LinearQNet(rng)
    net.dense.weight.value[...] = 1.0
    return net


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.gamma == 0.99
        assert cfg.batch_size == 64
        assert cfg.num_episodes == 1500
        assert (cfg.eps_start, cfg.eps_end, cfg.eps_decay) == (1.0, 0.01, 200000)
        assert cfg.target_update_freq == 1000
        assert cfg.learning_rate == 5e-7
        assert cfg.memory_size == 100000
        assert cfg.save_every == 500

    def test_workers(self):
        assert TrainConfig().workers == 1
        with pytest.raises(ConfigError, match="train.workers"):
            TrainConfig(workers=0)

    def test_batch_larger_than_memory_rejected(self):
        with pytest.raises(ConfigError, match="batch_size"):
            TrainConfig(batch_size=10, memory_size=5)

    def test_unknown_schedule_rejected(self):
        with pytest.raises(ConfigError, match="eps_schedule"):
            TrainConfig(eps_schedule="cosine")


class TestEpsilon:
    def test_exponential_schedule(self):
        cfg = TrainConfig()
        assert epsilon(0, cfg) == 1.0
        assert epsilon(200000, cfg) == pytest.approx(0.3742, abs=1e-4)
        assert epsilon(10**9, cfg) == pytest.approx(0.01)

    def test_linear_schedule(self):
        cfg = TrainConfig(eps_schedule="linear", eps_decay=100)
        assert epsilon(50, cfg) == pytest.approx(0.505)
        assert epsilon(200, cfg) == pytest.approx(0.01)

    def test_monotone_non_increasing(self):
        cfg = TrainConfig(eps_decay=50)
        values = [epsilon(t, cfg) for t in range(0, 500, 7)]
        assert all(a >= b for a, b in zip(values, values[1:], strict=False))

    def test_negative_step(self):
        with pytest.raises(UsageError):
            epsilon(-1, TrainConfig())


class TestSelectAction:
    def test_greedy(self, rng):
        assert select_action(np.array([0.1, 0.5, 0.2]), 0.0, rng) == 1

    def test_ties_go_to_lowest_index(self, rng):
        assert select_action(np.array([0.3, 0.3, 0.1]), 0.0, rng) == 0

    def test_shift_invariant(self, rng):
        q = np.array([0.2, -1.0, 0.7])
        assert select_action(q + 7.0, 0.0, rng) == select_action(q, 0.0, rng)

    def test_full_exploration_is_uniform(self, rng):
        draws = [select_action(np.array([9.0, 0.0, 0.0]), 1.0, rng) for _ in range(30000)]
        counts = np.bincount(draws, minlength=3)
        sigma = math.sqrt(30000 * (1 / 3) * (2 / 3))
        assert np.all(np.abs(counts - 10000) < 4 * sigma)


class TestTdTarget:
    def test_double_q_target(self, stub_networks):
        online, target = stub_networks
        batch = one_step_batch(reward=0.0)
        y = td_target(batch, 0.99, online, target)
        np.testing.assert_allclose(y, [1.98], rtol=1e-6)
        online.forward.assert_called_once_with(batch.next_states, update_gate=False)
        target.forward.assert_called_once_with(batch.next_states, update_gate=False)

    def test_selection_and_evaluation_decoupled(self, stub_networks):
        online, target = stub_networks
        y = td_target(one_step_batch(), 0.99, target, online)
        # target now selects action 2, which online values at 1.0
        np.testing.assert_allclose(y, [0.99], rtol=1e-6)

    def test_terminal_transition_uses_reward_only(self, stub_networks):
        online, target = stub_networks
        y = td_target(one_step_batch(reward=-1.0, done=True), 0.99, online, target)
        np.testing.assert_allclose(y, [-1.0])

    def test_zero_discount_uses_reward_only(self, stub_networks):
        online, target = stub_networks
        y = td_target(one_step_batch(reward=0.5), 0.0, online, target)
        np.testing.assert_allclose(y, [0.5])


class TestTdLoss:
    def test_hand_computed_loss(self, flat_net):
        loss = td_loss(flat_net, one_step_batch(), np.array([1.98], dtype=np.float32))
        assert loss == pytest.approx(0.9604, rel=1e-5)
        np.testing.assert_allclose(
            flat_net.dense.weight.grad, [[-1.96, 0.0, 0.0], [0.0, 0.0, 0.0]], rtol=1e-5
        )

    def test_perfect_fit_has_zero_loss_and_gradient(self, flat_net):
        loss = td_loss(flat_net, one_step_batch(), np.array([1.0], dtype=np.float32))
        assert loss == 0.0
        for p in flat_net.parameters():
            np.testing.assert_array_equal(p.grad, 0)

    def test_doubling_residual_quadruples_loss(self, flat_net):
        small = td_loss(flat_net, one_step_batch(), np.array([1.98], dtype=np.float32))
        large = td_loss(flat_net, one_step_batch(), np.array([2.96], dtype=np.float32))
        assert large == pytest.approx(4 * small, rel=1e-5)

    def test_non_finite_loss(self, flat_net):
        with pytest.raises(NumericError):
            td_loss(flat_net, one_step_batch(), np.array([np.inf], dtype=np.float32))


class TestSyncTarget:
    def test_copies_on_schedule(self):
        online = LinearQNet(np.random.default_rng(1))
        target = LinearQNet(np.random.default_rng(2))
        assert not sync_target(online, target, 999, 1000)
        assert not np.array_equal(online.dense.weight.value, target.dense.weight.value)
        assert sync_target(online, target, 1000, 1000)
        np.testing.assert_array_equal(online.dense.weight.value, target.dense.weight.value)


class TestReplayBuffer:
    def test_size_capped_and_oldest_overwritten(self, rng):
        buffer = ReplayBuffer(3, (2,))
        for r in range(5):
            buffer.push(transition(r))
        assert len(buffer) == 3
        assert buffer.cursor == 2
        batch = buffer.sample(3, rng)
        assert sorted(batch.rewards.tolist()) == [2.0, 3.0, 4.0]

    def test_sample_without_replacement(self, rng):
        buffer = ReplayBuffer(10, (2,))
        for r in range(10):
            buffer.push(transition(r))
        assert sorted(buffer.sample(10, rng).rewards.tolist()) == list(range(10))

    def test_sampling_is_uniform(self, rng):
        buffer = ReplayBuffer(4, (2,))
        for r in range(4):
            buffer.push(transition(r))
        draws = [int(buffer.sample(1, rng).rewards[0]) for _ in range(4000)]
        counts = np.bincount(draws, minlength=4)
        sigma = math.sqrt(4000 * 0.25 * 0.75)
        assert np.all(np.abs(counts - 1000) < 4 * sigma)

    def test_oversized_sample(self, rng):
        buffer = ReplayBuffer(8, (2,))
        buffer.push(transition(1))
        with pytest.raises(UsageError, match="cannot sample 2"):
            buffer.sample(2, rng)

    def test_shape_mismatch(self):
        buffer = ReplayBuffer(8, (2,))
        with pytest.raises(ShapeError):
            buffer.push(transition(1, shape=(3,)))

    def test_shared_frames_rebuild_next_state(self, rng):
        frames = rng.random((3, 4, 4)).astype(np.float32)
        buffer = ReplayBuffer(4, (2, 4, 4), share_frames=True)
        buffer.push(Transition(frames[:2], 1, 0.0, frames[1:], False))
        batch = buffer.sample(1, rng)
        np.testing.assert_array_equal(batch.next_states[0], frames[1:])
        np.testing.assert_array_equal(batch.states[0], frames[:2])
        assert batch.actions[0] == 1

    def test_quantized_storage(self, rng):
        obs = rng.random((2, 4, 4)).astype(np.float32)
        buffer = ReplayBuffer(2, (2, 4, 4), quantize=True)
        buffer.push(Transition(obs, 0, 1.0, obs, True))
        batch = buffer.sample(1, rng)
        np.testing.assert_allclose(batch.states[0], obs, atol=0.5 / 255 + 1e-7)
        assert batch.dones[0]


class TestRewardTracker:
    def test_first_reward_seeds_average(self):
        tracker = RewardTracker(alpha=0.05)
        assert tracker.update(10.0) == 10.0
        assert tracker.update(20.0) == pytest.approx(10.5)

    def test_hand_example(self):
        tracker = ema_reward(RewardTracker(alpha=0.5), 0.0)
        ema_reward(tracker, 1.0)
        assert tracker.ema == pytest.approx(0.5)
        assert tracker.history == [0.0, 1.0]

    def test_invalid_alpha(self):
        with pytest.raises(ConfigError):
            RewardTracker(alpha=0.0)


class TestTrain:
    @pytest.fixture
    def run(self, small_env_config, tiny_model_config, tiny_gate_config, tiny_train_config):
        def run(out, **overrides):
            return train(
                small_env_config,
                dataclasses.replace(tiny_train_config, **overrides),
                "cdrl",
                seed=1,
                model_config=tiny_model_config,
                gate_config=tiny_gate_config,
                log_path=out / "log.csv",
                checkpoint_dir=out / "ckpt",
            )

        return run

    def test_writes_log_and_checkpoint(self, run, tmp_path):
        result = run(tmp_path)
        assert result.checkpoint == tmp_path / "ckpt" / "cdrl-seed1-ep00001.ckpt"
        assert result.checkpoint.exists()
        log = pd.read_csv(result.log_path)
        assert list(log.columns) == LOG_COLUMNS
        assert len(log) == result.steps
        assert 0 < result.steps <= 40
        assert log["reward"].iloc[-1] == result.episode_rewards[0]
        assert log["step"].tolist() == list(range(1, result.steps + 1))

    def test_loss_logged_once_buffer_fills(self, run, tmp_path):
        log = pd.read_csv(run(tmp_path).log_path)
        assert log["loss"].iloc[:3].isna().all()
        assert log["loss"].iloc[3:].notna().all()

    def test_same_seed_is_reproducible(self, run, tmp_path):
        first = run(tmp_path / "a")
        second = run(tmp_path / "b")
        pd.testing.assert_frame_equal(
            pd.read_csv(first.log_path), pd.read_csv(second.log_path)
        )
        assert first.checkpoint.read_bytes() == second.checkpoint.read_bytes()

    def test_zero_episodes_saves_initial_model(self, run, tmp_path):
        result = run(tmp_path, num_episodes=0)
        assert result.checkpoint.name == "cdrl-seed1-ep00000.ckpt"
        log = pd.read_csv(result.log_path)
        assert log.empty
        assert list(log.columns) == LOG_COLUMNS

    def test_periodic_checkpoints(self, run, tmp_path):
        run(tmp_path, num_episodes=2, save_every=1)
        names = sorted(p.name for p in (tmp_path / "ckpt").iterdir())
        assert names == ["cdrl-seed1-ep00001.ckpt", "cdrl-seed1-ep00002.ckpt"]

    def test_numeric_failure_reports_step(self, run, tmp_path, monkeypatch):
        def explode(*args, **kwargs):
            raise NumericError("non-finite TD loss")

        monkeypatch.setattr(trainer_module, "td_loss", explode)
        with pytest.raises(NumericError, match="aborted at step 4"):
            run(tmp_path)

    def test_non_finite_q_values_report_step(self, run, tmp_path, monkeypatch):
        def nan_output(self, feature, h_pc):
            return np.full((feature.shape[0], self.num_actions), np.nan, dtype=feature.dtype)

        monkeypatch.setattr(CerebellarQNet, "cn_forward", nan_output)
        with pytest.raises(NumericError, match="aborted at step 1: .*q-values"):
            run(tmp_path)
