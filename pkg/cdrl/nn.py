"""Small numpy layer library with hand-written backward passes.

Every layer caches what it needs during ``forward`` and consumes that cache in
``backward``. Parameter gradients are accumulated into ``Parameter.grad``;
``backward`` returns the gradient with respect to the layer input.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError, UsageError

DEFAULT_DTYPE = np.float32


class Parameter:
    """A named array plus its gradient buffer.

    Fixed parameters (``trainable=False``) keep a zero gradient forever. A
    ``mask`` pins a sparsity pattern: only the nonzero positions train.
    """

    def __init__(
        self,
        name: str,
        value: np.ndarray,
        trainable: bool = True,
        mask: np.ndarray | None = None,
    ):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.trainable = trainable
        self.mask = mask

    def __repr__(self) -> str:
        kind = "trainable" if self.trainable else "fixed"
        return f"Parameter({self.name!r}, shape={self.value.shape}, {kind})"

    @property
    def num_trainable(self) -> int:
        if not self.trainable:
            return 0
        if self.mask is not None:
            return int(np.count_nonzero(self.mask))
        return int(self.value.size)

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def accumulate(self, grad: np.ndarray) -> None:
        if not self.trainable:
            return
        if self.mask is not None:
            grad = grad * self.mask
        self.grad += grad

    def astype(self, dtype) -> None:
        if np.issubdtype(self.value.dtype, np.floating):
            self.value = self.value.astype(dtype)
            self.grad = self.grad.astype(dtype)


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int, dtype=DEFAULT_DTYPE):
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    _cache = None

    def parameters(self) -> list[Parameter]:
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray | None:
        raise NotImplementedError

    def clear_cache(self) -> None:
        self._cache = None

    def _cached(self):
        if self._cache is None:
            raise UsageError(
                f"{type(self).__name__}.backward() called before forward()"
            )
        return self._cache


class Dense(Layer):
    """y = x W + b with W of shape (in_dim, out_dim)."""

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        rng: np.random.Generator,
        name: str = "dense",
        bias: bool = True,
        mask: np.ndarray | None = None,
    ):
        self.in_dim = in_dim
        self.out_dim = out_dim
        fan_in = in_dim if mask is None else max(1, int(mask.sum(axis=0).mean()))
        weight = uniform_fan_in(rng, (in_dim, out_dim), fan_in)
        if mask is not None:
            weight *= mask
        self.weight = Parameter(f"{name}.weight", weight, mask=mask)
        self.bias = (
            Parameter(f"{name}.bias", uniform_fan_in(rng, (out_dim,), fan_in))
            if bias
            else None
        )
        self._cache = None

    def parameters(self) -> list[Parameter]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(
                f"dense input shape {x.shape} does not match weight shape "
                f"{self.weight.value.shape}"
            )
        self._cache = x
        y = x @ self.weight.value
        if self.bias is not None:
            y = y + self.bias.value
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x = self._cached()
        self.weight.accumulate(x.T @ dy)
        if self.bias is not None:
            self.bias.accumulate(dy.sum(axis=0))
        return dy @ self.weight.value.T


class Conv2D(Layer):
    """Valid cross-correlation over (B, C, H, W) inputs."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        stride: int,
        rng: np.random.Generator,
        name: str = "conv",
        propagate_input: bool = True,
    ):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.propagate_input = propagate_input
        fan_in = in_channels * kernel * kernel
        self.weight = Parameter(
            f"{name}.weight",
            uniform_fan_in(rng, (out_channels, in_channels, kernel, kernel), fan_in),
        )
        self.bias = Parameter(
            f"{name}.bias", uniform_fan_in(rng, (out_channels,), fan_in)
        )
        self._cache = None

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def output_side(self, side: int) -> int:
        if self.kernel > side:
            raise ShapeError(
                f"conv kernel {self.kernel}x{self.kernel} larger than "
                f"input {side}x{side}"
            )
        return (side - self.kernel) // self.stride + 1

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"conv input shape {x.shape} does not match weight shape "
                f"{self.weight.value.shape}"
            )
        k, s = self.kernel, self.stride
        if k > x.shape[2] or k > x.shape[3]:
            raise ShapeError(f"conv kernel {k}x{k} larger than input {x.shape[2:]}")
        windows = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        y = np.tensordot(windows, self.weight.value, axes=([1, 4, 5], [1, 2, 3]))
        y = y.transpose(0, 3, 1, 2) + self.bias.value[None, :, None, None]
        self._cache = (x.shape, windows)
        return np.ascontiguousarray(y)

    def backward(self, dy: np.ndarray) -> np.ndarray | None:
        x_shape, windows = self._cached()
        self.weight.accumulate(np.tensordot(dy, windows, axes=([0, 2, 3], [0, 2, 3])))
        self.bias.accumulate(dy.sum(axis=(0, 2, 3)))
        if not self.propagate_input:
            return None

        k, s = self.kernel, self.stride
        out_h, out_w = dy.shape[2], dy.shape[3]
        dx = np.zeros(x_shape, dtype=dy.dtype)
        weight = self.weight.value
        for i in range(k):
            for j in range(k):
                # (C, B, OH, OW) contribution of kernel tap (i, j)
                tap = np.tensordot(weight[:, :, i, j], dy, axes=([0], [1]))
                rows = slice(i, i + s * (out_h - 1) + 1, s)
                cols = slice(j, j + s * (out_w - 1) + 1, s)
                dx[:, :, rows, cols] += tap.transpose(1, 0, 2, 3)
        return dx


class ReLU(Layer):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._cache = x > 0
        return np.where(self._cache, x, 0).astype(x.dtype, copy=False)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return dy * self._cached()


class Flatten(Layer):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return dy.reshape(self._cached())


class Sequential(Layer):
    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def clear_cache(self) -> None:
        for layer in self.layers:
            layer.clear_cache()

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray | None:
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
            if dy is None:
                return None
        return dy


def check_finite(name: str, array: np.ndarray) -> None:
    if not np.all(np.isfinite(array)):
        raise NumericError(f"non-finite values in {name}")


def clip_grad_norm(params: Iterable[Parameter], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most max_norm."""
    params = [p for p in params if p.trainable]
    total = float(np.sqrt(sum(float(np.sum(np.square(p.grad))) for p in params)))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-6)
        for p in params:
            p.grad *= scale
    return total


class Adam:
    """Bias-corrected adaptive-moment optimizer over the trainable parameters."""

    def __init__(
        self,
        params: Iterable[Parameter],
        lr: float = 5e-7,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient for {p.name}; step aborted")

        self.step_count += 1
        t = self.step_count
        correction1 = 1.0 - self.beta1**t
        correction2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v, strict=True):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / correction1
            v_hat = v / correction2
            update = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if p.mask is not None:
                update = update * p.mask
            p.value -= update.astype(p.value.dtype, copy=False)


def numerical_gradient(
    loss_fn: Callable[[], float],
    param: Parameter,
    indices: Iterable[tuple[int, ...]],
    h: float = 1e-3,
) -> np.ndarray:
    """Central finite differences of ``loss_fn`` at the given entries of ``param``."""
    grads = []
    for index in indices:
        original = param.value[index]
        param.value[index] = original + h
        plus = loss_fn()
        param.value[index] = original - h
        minus = loss_fn()
        param.value[index] = original
        grads.append((plus - minus) / (2 * h))
    return np.asarray(grads, dtype=np.float64)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
