"""Q-networks: the cerebellar head (MF -> GrC -> PC -> CN) and the dense baseline.

Both share the same convolutional backbone. Fixed structures (the MF->GrC
projection, the GrC mask, the PC connectivity pattern and the gate state) are
stored as non-trainable parameters so checkpoints and parameter counts see them.
"""

from __future__ import annotations

import copy
import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError, UsageError
from .gate import GateConfig, GateState, gain_vector, gate_apply
from .nn import (
    DEFAULT_DTYPE,
    Conv2D,
    Dense,
    Flatten,
    Layer,
    Parameter,
    ReLU,
    Sequential,
    check_finite,
    uniform_fan_in,
)

logger = logging.getLogger(__name__)

MODEL_KINDS = ("baseline", "cdrl", "cdrl_no_dendrite")

ConvSpec = tuple[int, int, int]


@dataclass(frozen=True)
class ModelConfig:
    """Layer sizes for both network kinds.

    ``conv_layers`` holds (out_channels, kernel, stride) triples. ``fan_in=None``
    connects every GrC to all MF units.
    """

    conv_layers: tuple[ConvSpec, ...] = ((32, 8, 4), (64, 4, 2), (64, 3, 1))
    mf_dim: int = 512
    grc_dim: int = 4096
    fan_in: int | None = 5
    mask_prob: float = 0.5
    topk_fraction: float = 0.05
    num_pc: int = 64
    pc_density: float = 0.25
    cn_dim: int = 1280
    alpha_pc_init: float = -1.0
    baseline_hidden: tuple[int, ...] = (1024, 4096, 1024, 1280)
    num_actions: int = 3

    def __post_init__(self):
        for name in ("mf_dim", "grc_dim", "num_pc", "cn_dim", "num_actions"):
            value = getattr(self, name)
            if value < 1:
                raise ConfigError(f"model.{name} must be >= 1, got {value}")
        if self.fan_in is not None and not 1 <= self.fan_in <= self.mf_dim:
            raise ConfigError(
                f"model.fan_in must be in [1, mf_dim={self.mf_dim}], got {self.fan_in}"
            )
        if not 0 <= self.mask_prob <= 1:
            raise ConfigError(
                f"model.mask_prob must be in [0, 1], got {self.mask_prob}"
            )
        if not 0 < self.topk_fraction <= 1:
            raise ConfigError(
                f"model.topk_fraction must be in (0, 1], got {self.topk_fraction}"
            )
        if not 0 < self.pc_density <= 1:
            raise ConfigError(
                f"model.pc_density must be in (0, 1], got {self.pc_density}"
            )
        if not self.conv_layers:
            raise ConfigError("model.conv_layers must name at least one layer")
        for out_ch, kernel, stride in self.conv_layers:
            if min(out_ch, kernel, stride) < 1:
                raise ConfigError(f"invalid conv layer {out_ch}x{kernel}x{stride}")
        if any(width < 1 for width in self.baseline_hidden):
            raise ConfigError(
                f"model.baseline_hidden widths must be >= 1: {self.baseline_hidden}"
            )

    @property
    def grc_fan_in(self) -> int:
        return self.mf_dim if self.fan_in is None else self.fan_in

    @property
    def num_active(self) -> int:
        """K, the number of GrCs left active by top-k thinning."""
        return max(1, int(round(self.topk_fraction * self.grc_dim)))

    @property
    def pc_inputs(self) -> int:
        return max(1, int(round(self.pc_density * self.grc_dim)))


@dataclass
class SparseProjection:
    """Fixed MF -> GrC projection: every GrC row reads ``fan_in`` distinct MFs."""

    grc_dim: int
    mf_dim: int
    fan_in: int
    indices: np.ndarray
    values: np.ndarray
    fixed: bool = True

    def dense(self, dtype=DEFAULT_DTYPE) -> np.ndarray:
        """(mf_dim, grc_dim) matrix with the pattern's zeros filled in."""
        matrix = np.zeros((self.mf_dim, self.grc_dim), dtype=dtype)
        rows = np.repeat(np.arange(self.grc_dim), self.fan_in)
        matrix[self.indices.ravel(), rows] = self.values.ravel()
        return matrix


def _random_subsets(rng: np.random.Generator, count: int, population: int, size: int):
    """``count`` sorted rows of ``size`` distinct indices from range(population)."""
    order = np.argsort(rng.random((count, population)), axis=1)
    return np.sort(order[:, :size], axis=1)


def build_sparse_projection(
    mf_dim: int,
    grc_dim: int,
    fan_in: int,
    rng: np.random.Generator,
    dtype=DEFAULT_DTYPE,
) -> SparseProjection:
    if fan_in > mf_dim:
        raise ConfigError(f"fan_in={fan_in} exceeds mf_dim={mf_dim}")
    if fan_in < 1:
        raise ConfigError(f"fan_in must be >= 1, got {fan_in}")
    indices = _random_subsets(rng, grc_dim, mf_dim, fan_in).astype(np.int32)
    values = uniform_fan_in(rng, (grc_dim, fan_in), fan_in, dtype=dtype)
    return SparseProjection(grc_dim, mf_dim, fan_in, indices, values)


def topk_mask(h: np.ndarray, k: int) -> np.ndarray:
    """Mask of the k largest entries on the last axis; ties go to the lowest index."""
    if k < 0:
        raise UsageError(f"top-k needs k >= 0, got {k}")
    n = h.shape[-1]
    if k >= n:
        return np.ones(h.shape, dtype=bool)
    mask = np.zeros(h.shape, dtype=bool)
    if k == 0:
        return mask
    chosen = np.argsort(-h, axis=-1, kind="stable")[..., :k]
    np.put_along_axis(mask, chosen, True, axis=-1)
    return mask


def topk_activate(h: np.ndarray, k: int) -> np.ndarray:
    return np.where(topk_mask(h, k), h, 0).astype(h.dtype, copy=False)


def build_backbone(
    conv_layers: tuple[ConvSpec, ...],
    input_shape: tuple[int, ...],
    rng: np.random.Generator,
) -> tuple[Sequential, int]:
    """Conv/ReLU stack plus flatten; returns the stack and its feature width."""
    if len(input_shape) != 3 or input_shape[1] != input_shape[2]:
        raise ShapeError(f"backbone expects (C, S, S) observations, got {input_shape}")
    channels, side, _ = input_shape
    layers: list[Layer] = []
    for i, (out_ch, kernel, stride) in enumerate(conv_layers):
        conv = Conv2D(
            channels,
            out_ch,
            kernel,
            stride,
            rng,
            name=f"conv{i + 1}",
            propagate_input=i > 0,
        )
        side = conv.output_side(side)
        layers += [conv, ReLU()]
        channels = out_ch
    layers.append(Flatten())
    return Sequential(layers), channels * side * side


class QNetwork:
    """Common surface of every Q-network: batched forward/backward over observations."""

    kind = "base"

    def __init__(self, input_shape: tuple[int, ...], num_actions: int):
        self.input_shape = tuple(input_shape)
        self.num_actions = num_actions
        self.dtype = np.dtype(DEFAULT_DTYPE)
        self.last_global_gain = 1.0

    def parameters(self) -> list[Parameter]:
        raise NotImplementedError

    def layers(self) -> list[Layer]:
        raise NotImplementedError

    def forward(self, obs: np.ndarray, update_gate: bool = True) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dq: np.ndarray) -> None:
        raise NotImplementedError

    def q_values(self, obs: np.ndarray, update_gate: bool = True) -> np.ndarray:
        """Q-values for a single observation."""
        return self.forward(obs[None], update_gate=update_gate)[0]

    def _check_input(self, obs: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs)
        if obs.shape[1:] != self.input_shape:
            raise ShapeError(
                f"observation batch shape {obs.shape} does not match network input "
                f"{self.input_shape}"
            )
        return obs.astype(self.dtype, copy=False)

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def param_count(self) -> tuple[int, int]:
        """(trainable, total) entries; total includes every fixed structure."""
        params = self.parameters()
        return sum(p.num_trainable for p in params), sum(p.value.size for p in params)

    def clear_cache(self) -> None:
        for layer in self.layers():
            layer.clear_cache()

    def copy_from(self, other: QNetwork) -> None:
        mine, theirs = self.parameters(), other.parameters()
        if [p.name for p in mine] != [p.name for p in theirs]:
            raise ShapeError(f"cannot copy {other.kind} parameters into {self.kind}")
        for dst, src in zip(mine, theirs, strict=True):
            if dst.value.shape != src.value.shape:
                raise ShapeError(
                    f"{dst.name}: shape {src.value.shape} does not match "
                    f"{dst.value.shape}"
                )
            dst.value[...] = src.value
        self._bind()

    def clone(self) -> QNetwork:
        self.clear_cache()
        return copy.deepcopy(self)

    def astype(self, dtype) -> QNetwork:
        self.dtype = np.dtype(dtype)
        for p in self.parameters():
            p.astype(dtype)
        self._bind()
        return self

    def reset_gate(self) -> None:
        pass

    def _bind(self) -> None:
        """Re-derive views of the fixed parameters after they were replaced."""


class CerebellarQNet(QNetwork):
    kind = "cdrl"

    def __init__(
        self,
        config: ModelConfig,
        gate_config: GateConfig,
        input_shape: tuple[int, ...],
        rng: np.random.Generator,
    ):
        super().__init__(input_shape, config.num_actions)
        self.config = config
        self.gate_config = gate_config
        if not gate_config.enabled:
            self.kind = "cdrl_no_dendrite"

        self.backbone, self.feature_dim = build_backbone(
            config.conv_layers, input_shape, rng
        )
        self.mf = Dense(self.feature_dim, config.mf_dim, rng, name="mf")
        self.mf_relu = ReLU()

        projection = build_sparse_projection(
            config.mf_dim, config.grc_dim, config.grc_fan_in, rng
        )
        self.phi_indices = Parameter(
            "phi.indices", projection.indices, trainable=False
        )
        self.phi_values = Parameter("phi.values", projection.values, trainable=False)
        mask = (rng.random(config.grc_dim) < config.mask_prob).astype(DEFAULT_DTYPE)
        self.grc_mask = Parameter("grc.mask", mask, trainable=False)

        subsets = _random_subsets(rng, config.num_pc, config.grc_dim, config.pc_inputs)
        pattern = np.zeros((config.grc_dim, config.num_pc), dtype=DEFAULT_DTYPE)
        pattern[subsets, np.arange(config.num_pc)[:, None]] = 1.0
        self.pc_pattern = Parameter("pc.pattern", pattern, trainable=False)
        self.pc = Dense(
            config.grc_dim, config.num_pc, rng, name="pc", bias=False, mask=pattern
        )
        self.pc_cn = Dense(config.num_pc, config.cn_dim, rng, name="pc_cn")
        self.alpha_pc = Parameter(
            "alpha_pc", np.array([config.alpha_pc_init], dtype=DEFAULT_DTYPE)
        )
        self.mf_cn = Dense(self.feature_dim, config.cn_dim, rng, name="mf_cn")
        self.cn_out = Dense(config.cn_dim, config.num_actions, rng, name="cn_out")

        self.gate_params: list[Parameter] = []
        self.gate_state: GateState | None = None
        if gate_config.enabled:
            state = GateState.create(gate_config, config.grc_dim, rng)
            self.gate_params = [
                Parameter("gate.hyperplanes", state.hyperplanes, trainable=False),
                Parameter("gate.ema", state.ema, trainable=False),
            ]
            self.gate_state = state
        self._cache = None
        self._grc_cache = self._cn_cache = self._gate_gain = None
        self._bind()

    def layers(self) -> list[Layer]:
        return [
            self.backbone,
            self.mf,
            self.mf_relu,
            self.pc,
            self.pc_cn,
            self.mf_cn,
            self.cn_out,
        ]

    def parameters(self) -> list[Parameter]:
        return [
            *self.backbone.parameters(),
            *self.mf.parameters(),
            self.phi_indices,
            self.phi_values,
            self.grc_mask,
            self.pc_pattern,
            *self.pc.parameters(),
            *self.pc_cn.parameters(),
            self.alpha_pc,
            *self.mf_cn.parameters(),
            *self.cn_out.parameters(),
            *self.gate_params,
        ]

    @property
    def projection(self) -> SparseProjection:
        cfg = self.config
        return SparseProjection(
            cfg.grc_dim,
            cfg.mf_dim,
            cfg.grc_fan_in,
            self.phi_indices.value.astype(np.int64),
            self.phi_values.value,
        )

    def _bind(self) -> None:
        self.phi_dense = self.projection.dense(self.dtype)
        self.pc.weight.mask = self.pc_pattern.value
        if self.gate_state is not None:
            self.gate_state.hyperplanes = self.gate_params[0].value
            self.gate_state.ema = self.gate_params[1].value

    def clear_cache(self) -> None:
        super().clear_cache()
        self._cache = None
        self._grc_cache = self._cn_cache = self._gate_gain = None

    def copy_from(self, other: QNetwork) -> None:
        super().copy_from(other)
        if self.gate_state is not None:
            self.gate_state.initialized = other.gate_state.initialized

    def reset_gate(self) -> None:
        if self.gate_state is not None:
            self.gate_state.reset()
        self.last_global_gain = 1.0

    def grc_forward(self, mf_activity: np.ndarray) -> np.ndarray:
        """Sparse expansion: ReLU(Phi x) masked by v, then top-k thinning."""
        pre = mf_activity @ self.phi_dense
        raw = np.maximum(pre, 0) * self.grc_mask.value
        keep = topk_mask(raw, self.config.num_active)
        self._grc_cache = (pre > 0, keep)
        return np.where(keep, raw, 0).astype(raw.dtype, copy=False)

    def pc_forward(self, h_grc: np.ndarray, update_gate: bool = True) -> np.ndarray:
        """Gate (when enabled) then the sparse GrC -> PC projection."""
        gain = None
        if self.gate_state is not None:
            h_grc, _, self.last_global_gain = gate_apply(
                h_grc, self.gate_config, self.gate_state, advance=update_gate
            )
            gain = gain_vector(self.gate_state.ema, self.gate_config.gain_strength)
            gain = gain.astype(h_grc.dtype, copy=False)
        self._gate_gain = gain
        return self.pc.forward(h_grc)

    def cn_forward(self, feature: np.ndarray, h_pc: np.ndarray) -> np.ndarray:
        """clamp(direct + alpha_pc * f_PC_CN(h_pc), 0) -> output layer."""
        pc_cn = self.pc_cn.forward(h_pc)
        excite = self.mf_cn.forward(feature)
        pre = excite + self.alpha_pc.value[0] * pc_cn
        cn = np.maximum(pre, 0)
        self._cn_cache = (pc_cn, pre > 0)
        return self.cn_out.forward(cn)

    def forward(self, obs: np.ndarray, update_gate: bool = True) -> np.ndarray:
        x = self._check_input(obs)
        feature = self.backbone.forward(x)
        mf_activity = self.mf_relu.forward(self.mf.forward(feature))
        h_grc = self.grc_forward(mf_activity)
        h_pc = self.pc_forward(h_grc, update_gate=update_gate)
        q = self.cn_forward(feature, h_pc)
        check_finite("q-values", q)
        self._cache = True
        return q

    def backward(self, dq: np.ndarray) -> None:
        if self._cache is None:
            raise UsageError("CerebellarQNet.backward() called before forward()")
        pc_cn, cn_active = self._cn_cache
        d_pre = self.cn_out.backward(dq) * cn_active
        d_feature = self.mf_cn.backward(d_pre)
        self.alpha_pc.accumulate(np.array([np.sum(d_pre * pc_cn)], dtype=self.dtype))
        d_hpc = self.pc_cn.backward(d_pre * self.alpha_pc.value[0])

        d_grc = self.pc.backward(d_hpc)
        if self._gate_gain is not None:
            d_grc = d_grc * self._gate_gain
        pre_active, keep = self._grc_cache
        d_pre_grc = d_grc * keep * pre_active * self.grc_mask.value
        d_mf = d_pre_grc @ self.phi_dense.T
        d_feature = d_feature + self.mf.backward(self.mf_relu.backward(d_mf))
        self.backbone.backward(d_feature)


class BaselineQNet(QNetwork):
    """Same backbone, then plain dense/ReLU layers of matched depth."""

    kind = "baseline"

    def __init__(
        self,
        config: ModelConfig,
        input_shape: tuple[int, ...],
        rng: np.random.Generator,
    ):
        super().__init__(input_shape, config.num_actions)
        self.config = config
        self.backbone, self.feature_dim = build_backbone(
            config.conv_layers, input_shape, rng
        )
        layers: list[Layer] = []
        width = self.feature_dim
        for i, hidden in enumerate(config.baseline_hidden):
            layers += [Dense(width, hidden, rng, name=f"fc{i + 1}"), ReLU()]
            width = hidden
        layers.append(Dense(width, config.num_actions, rng, name="out"))
        self.head = Sequential(layers)

    def layers(self) -> list[Layer]:
        return [self.backbone, self.head]

    def parameters(self) -> list[Parameter]:
        return [*self.backbone.parameters(), *self.head.parameters()]

    def forward(self, obs: np.ndarray, update_gate: bool = True) -> np.ndarray:
        q = self.head.forward(self.backbone.forward(self._check_input(obs)))
        check_finite("q-values", q)
        return q

    def backward(self, dq: np.ndarray) -> None:
        self.backbone.backward(self.head.backward(dq))


def build_network(
    kind: str,
    model_config: ModelConfig | None = None,
    gate_config: GateConfig | None = None,
    input_shape: tuple[int, ...] = (4, 84, 84),
    seed: int = 0,
) -> QNetwork:
    """Construct a freshly initialized network of the given kind."""
    model_config = model_config or ModelConfig()
    gate_config = gate_config or GateConfig()
    rng = np.random.default_rng(seed)
    if kind == "baseline":
        network: QNetwork = BaselineQNet(model_config, input_shape, rng)
    elif kind == "cdrl":
        network = CerebellarQNet(model_config, gate_config, input_shape, rng)
    elif kind == "cdrl_no_dendrite":
        gate_config = dataclasses.replace(gate_config, enabled=False)
        network = CerebellarQNet(model_config, gate_config, input_shape, rng)
    else:
        raise ConfigError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    trainable, total = network.param_count()
    logger.debug(
        "built %s network: %d trainable / %d total", network.kind, trainable, total
    )
    return network


def param_count(network: QNetwork) -> tuple[int, int]:
    return network.param_count()
