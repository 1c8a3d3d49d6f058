"""Tests for configuration parsing."""

import pytest

from cdrl.config import (
    EvalConfig,
    ExperimentSpec,
    SweepConfig,
    build_spec,
    dump_spec,
    known_keys,
    parse_config,
    parse_overrides,
    read_config_file,
)
from cdrl.errors import ConfigError
from cdrl.qnet import ModelConfig


class TestDefaults:
    def test_resolved_defaults(self):
        spec = parse_config()
        assert spec.command == "train"
        assert spec.model_kind == "cdrl"
        assert spec.seeds == (1, 2, 3, 4, 5)
        assert spec.env.ball_speed_x == 12
        assert spec.model.grc_dim == 4096
        assert spec.gate.num_branches == 32
        assert spec.train.learning_rate == 5e-7
        assert spec.eval == EvalConfig()

    def test_known_keys_cover_sections(self):
        keys = known_keys()
        assert "train.gamma" in keys
        assert "gate.enabled" in keys
        assert "seeds" in keys


class TestConfigFile:
    def test_reads_pairs_and_comments(self, tmp_path):
        path = tmp_path / "run.conf"
        path.write_text("# header\ntrain.gamma = 0.95  # discount\n\nseeds = 3,4\n")
        assert read_config_file(path) == {"train.gamma": "0.95", "seeds": "3,4"}

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "run.conf"
        path.write_text("train.gamma 0.95\n")
        with pytest.raises(ConfigError, match="run.conf:1"):
            read_config_file(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            parse_config(tmp_path / "absent.conf")

    def test_miniature_file(self, small_config_file):
        spec = parse_config(small_config_file)
        assert spec.model.conv_layers == ((4, 4, 2), (4, 3, 1))
        assert spec.model.baseline_hidden == (8, 16, 8, 6)
        assert spec.env.obs_side == 12
        assert spec.seeds == (1,)


class TestPrecedence:
    def test_overrides_beat_file_and_flags_beat_overrides(self, tmp_path):
        path = tmp_path / "run.conf"
        path.write_text("train.gamma = 0.9\ntrain.batch_size = 16\nseeds = 7\n")
        spec = parse_config(path, ["train.gamma=0.8", "seeds=8"], seeds="9,10")
        assert spec.train.gamma == 0.8
        assert spec.train.batch_size == 16
        assert spec.seeds == (9, 10)

    def test_none_flags_ignored(self):
        assert parse_config(model_kind=None).model_kind == "cdrl"

    def test_override_needs_equals(self):
        with pytest.raises(ConfigError, match="key=value"):
            parse_overrides(["train.gamma"])


class TestCoercion:
    def test_types(self):
        spec = build_spec(
            {
                "gate.enabled": "on",
                "gate.gain_strength": "0.25",
                "model.fan_in": "full",
                "model.conv_layers": "16x8x4, 32x4x2",
                "env.agent_paddle_height": "none",
                "sweep.axis": "fan_in",
                "sweep.values": "2,5",
                "out_dir": "elsewhere",
            }
        )
        assert spec.gate.enabled is True
        assert spec.gate.gain_strength == 0.25
        assert spec.model.fan_in is None
        assert spec.model.conv_layers == ((16, 8, 4), (32, 4, 2))
        assert spec.env.agent_paddle_height is None
        assert spec.sweep.values == ("2", "5")
        assert spec.out_dir == "elsewhere"

    def test_type_mismatch_names_expected_type(self):
        with pytest.raises(ConfigError, match="train.batch_size: expected int"):
            build_spec({"train.batch_size": "sixty-four"})

    def test_bad_bool(self):
        with pytest.raises(ConfigError, match="expected bool"):
            build_spec({"gate.enabled": "maybe"})

    def test_validation_errors_surface(self):
        with pytest.raises(ConfigError, match="gamma"):
            build_spec({"train.gamma": "1.5"})


class TestUnknownKeys:
    def test_suggests_close_section_key(self):
        with pytest.raises(ConfigError, match="did you mean 'train.gamma'"):
            build_spec({"train.gama": "0.9"})

    def test_suggests_from_bare_name(self):
        with pytest.raises(ConfigError, match="train.gamma"):
            build_spec({"gama": "0.9"})

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="unknown config key 'optim.lr'"):
            build_spec({"optim.lr": "0.1"})


class TestModelKindAndGate:
    def test_gate_off_selects_ablation(self):
        assert build_spec({"gate.enabled": "off"}).model_kind == "cdrl_no_dendrite"

    def test_ablation_turns_gate_off(self):
        spec = build_spec({"model_kind": "cdrl_no_dendrite"})
        assert spec.gate.enabled is False

    def test_baseline_keeps_gate_setting(self):
        spec = build_spec({"model_kind": "baseline", "gate.enabled": "off"})
        assert spec.model_kind == "baseline"

    def test_unknown_kind(self):
        with pytest.raises(ConfigError, match="model_kind"):
            build_spec({"model_kind": "resnet"})

    def test_unknown_command(self):
        with pytest.raises(ConfigError, match="command"):
            ExperimentSpec(command="deploy")


class TestSweepConfig:
    def test_default_axis_values(self):
        points = SweepConfig(axis="topk_fraction").model_overrides(ModelConfig())
        assert [label for label, _ in points] == ["0.01", "0.05", "0.1", "0.25", "1.0"]
        assert [cfg.topk_fraction for _, cfg in points] == [0.01, 0.05, 0.1, 0.25, 1.0]

    def test_full_fan_in_point(self):
        points = SweepConfig(axis="fan_in", values=("full",)).model_overrides(ModelConfig())
        assert points[0][1].fan_in is None

    def test_expansion_axis(self):
        points = SweepConfig(axis="expansion").model_overrides(ModelConfig())
        assert [cfg.grc_dim for _, cfg in points] == [2048, 4096, 8192, 16384]

    def test_axis_required(self):
        with pytest.raises(ConfigError, match="sweep.axis"):
            SweepConfig().model_overrides(ModelConfig())

    def test_unknown_axis(self):
        with pytest.raises(ConfigError):
            SweepConfig(axis="depth")


class TestDump:
    def test_dump_parses_back(self, tmp_path, small_config_file):
        spec = parse_config(small_config_file, ["model.fan_in=full", "noise.obs_sigma=2"])
        path = tmp_path / "dumped.conf"
        path.write_text(dump_spec(spec))
        assert parse_config(path) == spec
