"""Trainable layers built on the autodiff core.

Each layer owns its parameter tensors and exposes them as (name, tensor)
pairs so a network can assemble a flat, ordered parameter registry.
Weights use Kaiming-uniform initialization (bound sqrt(6 / fan_in)),
biases start at zero, and batch-norm scale/shift start at one/zero, so a
freshly built network never has an all-zero parameter vector.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    """Affine map ``x @ w + b`` with ``w`` stored as (in_features, out_features)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.in_features = in_features
        self.out_features = out_features
        self.w = Tensor(
            kaiming_uniform(rng, (in_features, out_features), in_features),
            requires_grad=True,
        )
        self.b = Tensor(np.zeros(out_features), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ValueError(
                f"linear: input has {x.shape[-1]} features, layer expects {self.in_features}"
            )
        return (x @ self.w) + self.b

    def parameters(self):
        return [("w", self.w), ("b", self.b)]

    def buffers(self):
        return []


class Conv2d:
    """Unpadded 2-D convolution; output extent is (in - kernel)//stride + 1."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        stride: int,
        rng: np.random.Generator,
    ):
        if stride < 1:
            raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        fan_in = in_channels * kernel * kernel
        self.w = Tensor(
            kaiming_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in),
            requires_grad=True,
        )
        self.b = Tensor(np.zeros(out_channels), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b, self.stride)

    def output_size(self, extent: int) -> int:
        return ad.conv_output_size(extent, self.kernel, self.stride)

    def parameters(self):
        return [("w", self.w), ("b", self.b)]

    def buffers(self):
        return []


class BatchNorm2d:
    """Per-channel batch normalization over (N, H, W).

    Training mode normalizes with batch statistics and updates the running
    mean/variance with momentum 0.1 (running variance uses the unbiased
    estimate); inference mode normalizes with the running statistics. Only
    scale and shift are trainable; the running statistics are buffers.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.scale = Tensor(np.ones(channels), requires_grad=True)
        self.shift = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=ad.default_dtype())
        self.running_var = np.ones(channels, dtype=ad.default_dtype())

    def __call__(self, x: Tensor, training: bool, update_running: bool | None = None) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ValueError(
                f"batchnorm: expected (N, {self.channels}, H, W), got {x.shape}"
            )
        if update_running is None:
            update_running = training
        axes = (0, 2, 3)
        if training:
            mean = x.mean(axis=axes, keepdims=True)
            centered = x - mean
            var = (centered * centered).mean(axis=axes, keepdims=True)
            if update_running:
                n = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
                batch_mean = mean.data.reshape(self.channels)
                batch_var = var.data.reshape(self.channels)
                unbiased = batch_var * (n / (n - 1)) if n > 1 else batch_var
                m = self.momentum
                self.running_mean = (1.0 - m) * self.running_mean + m * batch_mean
                self.running_var = (1.0 - m) * self.running_var + m * unbiased
            inv_std = (var + self.eps) ** -0.5
            normalized = centered * inv_std
        else:
            mean = Tensor(self.running_mean.reshape(1, self.channels, 1, 1))
            inv_std = Tensor(
                1.0 / np.sqrt(self.running_var.reshape(1, self.channels, 1, 1) + self.eps)
            )
            normalized = (x - mean) * inv_std
        g = self.scale.reshape(1, self.channels, 1, 1)
        b = self.shift.reshape(1, self.channels, 1, 1)
        return normalized * g + b

    def parameters(self):
        return [("scale", self.scale), ("shift", self.shift)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        if name == "running_mean":
            self.running_mean = value.astype(ad.default_dtype())
        elif name == "running_var":
            self.running_var = value.astype(ad.default_dtype())
        else:
            raise KeyError(name)
