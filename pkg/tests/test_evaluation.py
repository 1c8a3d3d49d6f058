"""Tests for noisy greedy evaluation."""

import dataclasses

import numpy as np
import pytest

from cdrl.errors import ConfigError, UsageError
from cdrl.evaluation import (
    ACT_PROBS,
    EVAL_COLUMNS,
    GENERALIZATION_COLUMNS,
    GENERALIZATION_TABLE,
    OBS_SIGMAS,
    EvalReport,
    NoiseSpec,
    add_obs_noise,
    difference_grid,
    evaluate,
    generalization_configs,
    generalization_sweep,
    grid_cells,
    perturb_action,
    reports_frame,
    robustness_grid,
    sticky_action,
    win_rate_matrix,
)
from cdrl.pong import EnvConfig

MAX_STEPS = 60


@pytest.fixture
def weak_env(small_env_config):
    """Short agent paddle: an untrained agent almost never returns the ball."""
    return dataclasses.replace(small_env_config, agent_paddle_height=10)


class TestNoiseSpec:
    def test_defaults_are_noise_free(self):
        noise = NoiseSpec()
        assert (noise.obs_sigma, noise.act_prob, noise.sticky_prob) == (0.0, 0.0, 0.0)
        assert noise.label == "obs=0 act=0"

    def test_sticky_label(self):
        assert NoiseSpec(obs_sigma=2.0, sticky_prob=0.25).label == "obs=2 sticky=0.25"

    def test_both_action_noises_rejected(self):
        with pytest.raises(ConfigError, match="both"):
            NoiseSpec(act_prob=0.1, sticky_prob=0.25)

    def test_negative_sigma_rejected(self):
        with pytest.raises(ConfigError):
            NoiseSpec(obs_sigma=-1.0)


class TestObservationNoise:
    def test_zero_sigma_returns_equal_copy(self, rng):
        obs = rng.random((2, 3, 3)).astype(np.float32)
        noisy = add_obs_noise(obs, 0.0, rng)
        np.testing.assert_array_equal(noisy, obs)
        assert noisy is not obs

    def test_statistics(self, rng):
        obs = np.zeros(10000, dtype=np.float32)
        noisy = add_obs_noise(obs, 1.0, rng)
        assert abs(noisy.mean()) < 4 / np.sqrt(10000)
        assert abs(noisy.std() - 1.0) < 4 / np.sqrt(2 * 10000)
        np.testing.assert_array_equal(obs, 0.0)

    def test_not_clipped(self, rng):
        noisy = add_obs_noise(np.full(1000, 0.5, dtype=np.float32), 10.0, rng)
        assert noisy.min() < 0.0 and noisy.max() > 1.0
        assert noisy.dtype == np.float32

    def test_negative_sigma(self, rng):
        with pytest.raises(UsageError):
            add_obs_noise(np.zeros(3), -0.5, rng)


class TestActionNoise:
    def test_zero_probability_is_identity(self, rng):
        assert all(perturb_action(a, 0.0, rng) == a for a in (0, 1, 2) for _ in range(100))

    def test_certain_replacement_is_uniform(self, rng):
        counts = np.bincount([perturb_action(0, 1.0, rng) for _ in range(30000)], minlength=3)
        sigma = np.sqrt(30000 * (1 / 3) * (2 / 3))
        assert np.all(np.abs(counts - 10000) < 4 * sigma)

    def test_change_rate(self, rng):
        changed = np.mean([perturb_action(0, 0.3, rng) != 0 for _ in range(10000)])
        # a replacement may redraw the same action
        expected = 0.3 * 2 / 3
        assert abs(changed - expected) < 4 * np.sqrt(expected * (1 - expected) / 10000)


class TestStickyActions:
    def test_first_step_has_no_previous(self, rng):
        assert sticky_action(2, None, 1.0, rng) == 2

    def test_extremes(self, rng):
        assert sticky_action(0, 1, 0.0, rng) == 0
        assert sticky_action(0, 1, 1.0, rng) == 1

    def test_repeat_rate(self, rng):
        repeats = np.mean([sticky_action(0, 1, 0.25, rng) == 1 for _ in range(10000)])
        assert abs(repeats - 0.25) < 4 * np.sqrt(0.25 * 0.75 / 10000)


class TestEvalReport:
    def test_population_statistics(self):
        report = EvalReport("train", "cdrl", NoiseSpec(), 10, [1, 2], [1.0, 0.0], [3.0, -1.0])
        assert report.win_rate_mean == 0.5
        assert report.win_rate_std == 0.5
        assert report.reward_mean == 1.0
        assert report.reward_std == 2.0

    def test_single_seed_has_zero_std(self):
        report = EvalReport("train", "cdrl", NoiseSpec(), 10, [1], [0.4], [-2.0])
        assert report.win_rate_std == 0.0

    def test_rows(self):
        report = EvalReport("test3", "baseline", NoiseSpec(obs_sigma=2.0), 5, [4], [0.2], [-3.0])
        frame = reports_frame([report])
        assert list(frame.columns) == EVAL_COLUMNS
        assert frame.iloc[0].to_dict() == {
            "obs_sigma": 2.0,
            "act_prob": 0.0,
            "sticky_prob": 0.0,
            "model": "baseline",
            "seed": 4,
            "win_rate": 0.2,
            "mean_reward": -3.0,
        }
        assert list(reports_frame([report], GENERALIZATION_COLUMNS).columns) == (
            GENERALIZATION_COLUMNS
        )


class TestEvaluate:
    def test_untrained_agent_rarely_wins(self, make_net, weak_env):
        report = evaluate(make_net(), weak_env, NoiseSpec(), 3, [1, 2], MAX_STEPS)
        assert report.win_rate_mean < 0.3
        assert report.model == "cdrl"
        assert report.seeds == [1, 2]

    def test_deterministic(self, make_net, weak_env):
        net = make_net()
        noise = NoiseSpec(obs_sigma=1.0, act_prob=0.1, noise_seed=3)
        a = evaluate(net, weak_env, noise, 2, [1, 2], MAX_STEPS)
        b = evaluate(net, weak_env, noise, 2, [1, 2], MAX_STEPS)
        assert a.win_rates == b.win_rates
        assert a.mean_rewards == b.mean_rewards

    def test_does_not_touch_the_evaluated_network(self, make_net, weak_env):
        net = make_net()
        evaluate(net, weak_env, NoiseSpec(), 1, [1], MAX_STEPS)
        np.testing.assert_array_equal(net.gate_state.ema, 0.5)
        assert not net.gate_state.initialized

    def test_requires_episodes_and_seeds(self, make_net, weak_env):
        with pytest.raises(ConfigError):
            evaluate(make_net(), weak_env, NoiseSpec(), 0, [1])
        with pytest.raises(ConfigError):
            evaluate(make_net(), weak_env, NoiseSpec(), 1, [])


class TestRobustnessGrid:
    def test_cell_layout(self, small_env_config):
        cells = grid_cells(["cdrl", "baseline"], small_env_config)
        assert len(cells) == 2 * len(OBS_SIGMAS) * len(ACT_PROBS)
        assert cells[0].noise == NoiseSpec()
        assert cells[7].noise.obs_sigma == 1.0
        assert cells[7].noise.act_prob == 0.05
        assert len({c.noise.noise_seed for c in cells[:36]}) == 36

    def test_full_grid(self, make_net, weak_env):
        net = make_net()
        seen = []
        reports = robustness_grid(
            {"cdrl": net},
            weak_env,
            1,
            [1],
            workers=2,
            max_episode_steps=MAX_STEPS,
            on_result=lambda cell, report: seen.append(cell),
        )
        assert len(reports) == 36
        assert len(seen) == 36
        assert [(r.noise.obs_sigma, r.noise.act_prob) for r in reports[:2]] == [
            (0.0, 0.0),
            (0.0, 0.05),
        ]
        clean = evaluate(net, weak_env, NoiseSpec(), 1, [1], MAX_STEPS)
        assert reports[0].win_rates == clean.win_rates
        assert reports[0].mean_rewards == clean.mean_rewards

        matrix = win_rate_matrix(reports, "cdrl")
        assert matrix.shape == (6, 6)
        assert list(matrix.index) == list(OBS_SIGMAS)
        assert list(matrix.columns) == list(ACT_PROBS)
        np.testing.assert_array_equal(difference_grid(reports, "cdrl", "cdrl").to_numpy(), 0.0)

    def test_worker_count_does_not_change_results(self, make_net, weak_env):
        models = {"cdrl": make_net()}
        kwargs = {"max_episode_steps": 30, "obs_sigmas": (0.0, 2.0), "act_probs": (0.0, 0.2)}
        serial = robustness_grid(models, weak_env, 1, [1], workers=1, **kwargs)
        parallel = robustness_grid(models, weak_env, 1, [1], workers=4, **kwargs)
        assert [r.mean_rewards for r in serial] == [r.mean_rewards for r in parallel]

    def test_unknown_model_in_matrix(self):
        with pytest.raises(ConfigError):
            win_rate_matrix([], "cdrl")

    def test_no_models(self, small_env_config):
        with pytest.raises(ConfigError):
            robustness_grid({}, small_env_config, 1, [1])


class TestGeneralization:
    def test_train_row_is_the_training_environment(self):
        base = EnvConfig()
        assert generalization_configs(base)["train"] == base

    def test_rows_change_only_their_parameters(self):
        configs = generalization_configs(EnvConfig())
        assert list(configs) == list(GENERALIZATION_TABLE)
        assert (configs["test2"].ball_speed_x, configs["test2"].ball_speed_y) == (18, 12)
        assert configs["test4"].agent_height == 20
        assert configs["test4"].paddle_height == 80
        assert configs["test5"].agent_speed == 2
        assert configs["test5"].paddle_speed == 5

    def test_sweep(self, make_net, small_env_config):
        reports = generalization_sweep(
            {"cdrl": make_net(), "baseline": make_net("baseline")},
            small_env_config,
            1,
            [1],
            max_episode_steps=MAX_STEPS,
        )
        assert len(reports) == 2 * len(GENERALIZATION_TABLE)
        assert [r.env_id for r in reports[:8]] == list(GENERALIZATION_TABLE)
        assert all(r.noise == NoiseSpec() for r in reports)
        frame = reports_frame(reports, GENERALIZATION_COLUMNS)
        assert list(frame.columns) == GENERALIZATION_COLUMNS
        assert len(frame) == 16
