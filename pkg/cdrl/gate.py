"""Dendritic gain on the granule-cell to Purkinje-cell pathway.

The gate never trains. Population activity is projected onto fixed random
hyperplanes (one per dendritic branch), the strongest branches are summed
through a sigmoid, and a slow EMA of that signal scales the GrC activity
multiplicatively.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConfigError, ShapeError, UsageError

logger = logging.getLogger(__name__)

NORM_EPS = 1e-8


@dataclass(frozen=True)
class GateConfig:
    enabled: bool = True
    num_branches: int = 32
    select_fraction: float = 0.25
    sigmoid_temp: float = 4.0
    ema_decay: float = 0.99
    gain_strength: float = 0.5

    def __post_init__(self):
        if self.num_branches < 1:
            raise ConfigError(
                f"gate.num_branches must be >= 1, got {self.num_branches}"
            )
        if not 0 < self.select_fraction <= 1:
            raise ConfigError(
                f"gate.select_fraction must be in (0, 1], got {self.select_fraction}"
            )
        if self.num_selected < 1:
            raise ConfigError("gate.select_fraction * gate.num_branches rounds to 0")
        if not (np.isfinite(self.sigmoid_temp) and self.sigmoid_temp > 0):
            raise ConfigError(f"gate.sigmoid_temp must be > 0, got {self.sigmoid_temp}")
        _check_decay(self.ema_decay)
        if not (np.isfinite(self.gain_strength) and self.gain_strength >= 0):
            raise ConfigError(
                f"gate.gain_strength must be >= 0, got {self.gain_strength}"
            )

    @property
    def num_selected(self) -> int:
        return int(round(self.select_fraction * self.num_branches))


def _check_decay(tau: float) -> None:
    if not 0 < tau < 1:
        raise ConfigError(f"gate.ema_decay must be in (0, 1), got {tau}")


@dataclass
class GateState:
    """Fixed unit hyperplanes (M, D) and the EMA accumulator e (D,)."""

    hyperplanes: np.ndarray
    ema: np.ndarray
    initialized: bool = False

    @classmethod
    def create(
        cls,
        config: GateConfig,
        grc_dim: int,
        rng: np.random.Generator,
        dtype=np.float32,
    ) -> GateState:
        planes = rng.standard_normal((config.num_branches, grc_dim))
        planes /= np.linalg.norm(planes, axis=1, keepdims=True)
        return cls(
            hyperplanes=planes.astype(dtype),
            ema=np.full(grc_dim, 0.5, dtype=dtype),
        )

    def reset(self) -> None:
        self.ema[...] = 0.5
        self.initialized = False


def population_mean(G: np.ndarray) -> np.ndarray:
    if G.shape[0] == 0:
        raise UsageError("population_mean needs at least one sample")
    return G.mean(axis=0)


def normalize(g_bar: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(g_bar)
    if norm < NORM_EPS:
        return np.zeros_like(g_bar)
    return g_bar / norm


def branch_projections(g_tilde: np.ndarray, state: GateState) -> np.ndarray:
    if g_tilde.shape != state.hyperplanes.shape[1:]:
        raise ShapeError(
            f"population vector shape {g_tilde.shape} does not match hyperplanes "
            f"{state.hyperplanes.shape}"
        )
    return state.hyperplanes @ g_tilde


def select_branches(p: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest projections, ties going to the lowest index."""
    return np.sort(np.argsort(-p, kind="stable")[:k])


def select_and_integrate(
    p: np.ndarray, config: GateConfig, state: GateState
) -> np.ndarray:
    selected = select_branches(p, config.num_selected)
    weights = expit(config.sigmoid_temp * p[selected])
    d = weights @ state.hyperplanes[selected]
    return expit(d).astype(state.ema.dtype, copy=False)


def ema_update(state: GateState, z: np.ndarray, tau: float) -> GateState:
    _check_decay(tau)
    if not state.initialized:
        state.ema[...] = z
        state.initialized = True
    else:
        state.ema *= tau
        state.ema += (1.0 - tau) * z
    return state


def gain_vector(ema: np.ndarray, alpha: float) -> np.ndarray:
    return 1.0 + alpha * (ema - 0.5)


def modulate(G: np.ndarray, ema: np.ndarray, alpha: float) -> np.ndarray:
    return G * gain_vector(ema, alpha).astype(G.dtype, copy=False)


def gate_apply(
    G: np.ndarray, config: GateConfig, state: GateState, advance: bool = True
) -> tuple[np.ndarray, GateState, float]:
    """Run the whole gate once; returns (modulated G, state, global gain).

    With ``advance=False`` an already initialized EMA is left untouched.
    """
    if not config.enabled:
        return G, state, 1.0

    if advance or not state.initialized:
        g_tilde = normalize(population_mean(G))
        p = branch_projections(g_tilde, state)
        z = select_and_integrate(p, config, state)
        ema_update(state, z, config.ema_decay)

    gain = gain_vector(state.ema, config.gain_strength)
    global_gain = float(gain.mean())
    logger.debug("dendritic global gain %.4f", global_gain)
    return G * gain.astype(G.dtype, copy=False), state, global_gain
