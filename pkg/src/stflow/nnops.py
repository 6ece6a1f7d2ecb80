"""Differentiable neural primitives: convolution layers, dense layers, batch
normalization, activations, pooling and time distribution.

Convolution is cross-correlation (no kernel flip). Layers are pure functions
of (parameters, input) except batch normalization, whose running statistics
mutate in train mode. Weight init is Glorot-style uniform from a seeded
stream; biases start at zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor, Rng, ShapeError, add, amax, conv2d, conv2d_transpose, matmul, mul,
    powc, relu, reshape, same_padding, sigmoid, sub, tanh, tmean, TRAIN_DTYPE,
)

__all__ = [
    "Conv2DParams", "BatchNormParams", "DenseParams", "glorot_uniform",
    "conv_layer", "conv_transpose_layer", "dense", "batchnorm",
    "global_pool_spatial", "pool_channelwise", "time_distribute",
    "relu", "tanh", "sigmoid", "same_padding",
]


def glorot_uniform(rng: Rng, shape, fan_in: int, fan_out: int,
                   dtype=TRAIN_DTYPE) -> np.ndarray:
    limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-limit, limit, shape, dtype)


@dataclass
class Conv2DParams:
    """Weights/geometry of one conv (or transposed conv) layer.

    weights: (kh, kw, in_channels, out_channels); padding is explicit
    per-side (top, bottom, left, right).
    """

    in_channels: int
    out_channels: int
    kernel: tuple
    stride: tuple
    padding: tuple
    weights: Tensor
    bias: Tensor

    @classmethod
    def create(cls, rng: Rng, cin: int, cout: int, kernel, stride=(1, 1),
               padding="same", dtype=TRAIN_DTYPE) -> "Conv2DParams":
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        if padding == "same":
            padding = same_padding(kh, kw)
        w = Tensor(glorot_uniform(rng, (kh, kw, cin, cout),
                                  kh * kw * cin, kh * kw * cout, dtype),
                   requires_grad=True)
        b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        return cls(cin, cout, (kh, kw), tuple(stride), tuple(padding), w, b)

    def out_dims(self, h: int, w: int) -> tuple:
        kh, kw = self.kernel
        sh, sw = self.stride
        pt, pb, pl, pr = self.padding
        oh = (h + pt + pb - kh) // sh + 1
        ow = (w + pl + pr - kw) // sw + 1
        if oh <= 0 or ow <= 0:
            raise ShapeError(
                f"conv layout gives non-positive output {oh}x{ow} "
                f"(input {h}x{w}, kernel {self.kernel}, stride {self.stride})")
        return oh, ow

    def transpose_out_dims(self, h: int, w: int) -> tuple:
        kh, kw = self.kernel
        sh, sw = self.stride
        pt, pb, pl, pr = self.padding
        return (h - 1) * sh + kh - pt - pb, (w - 1) * sw + kw - pl - pr

    def n_params(self) -> int:
        return self.weights.size + self.bias.size


def conv_layer(x, p: Conv2DParams) -> Tensor:
    return conv2d(x, p.weights, p.bias, p.stride, p.padding)


def conv_transpose_layer(x, p: Conv2DParams) -> Tensor:
    return conv2d_transpose(x, p.weights, p.bias, p.stride, p.padding)


@dataclass
class DenseParams:
    """Fully connected layer y = x @ W + b with W of shape (in, out)."""

    weights: Tensor
    bias: Tensor

    @classmethod
    def create(cls, rng: Rng, n_in: int, n_out: int, dtype=TRAIN_DTYPE):
        w = Tensor(glorot_uniform(rng, (n_in, n_out), n_in, n_out, dtype),
                   requires_grad=True)
        b = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)
        return cls(w, b)

    def n_params(self) -> int:
        return self.weights.size + self.bias.size


def dense(x, w, b=None) -> Tensor:
    """x @ W + b for x of shape (..., in) and W of shape (in, out)."""
    if isinstance(w, DenseParams):
        w, b = w.weights, w.bias
    y = matmul(x, w)
    return y if b is None else add(y, b)


@dataclass
class BatchNormParams:
    """Per-channel batch normalization state.

    Running statistics update as running = momentum*running +
    (1-momentum)*batch with biased batch variance; they are excluded from
    trainable-parameter counts but are part of checkpoints.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    epsilon: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum=0.99, epsilon=1e-5,
               dtype=TRAIN_DTYPE) -> "BatchNormParams":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            epsilon=epsilon,
        )

    def n_params(self) -> int:
        return self.gamma.size + self.beta.size


def batchnorm(x, p: BatchNormParams, train: bool) -> Tensor:
    """Normalize over every non-channel axis, then scale/shift.

    Train mode uses batch statistics (batch dim must be >= 2) and updates
    running stats; eval mode uses running stats as constants.
    """
    if x.shape[-1] != p.gamma.size:
        raise ShapeError(f"batchnorm: channels {x.shape[-1]} != "
                         f"{p.gamma.size} parameters")
    axes = tuple(range(x.ndim - 1))
    if train:
        if x.shape[0] < 2:
            raise ShapeError("batchnorm: train mode requires batch size >= 2")
        m = tmean(x, axes, keepdims=True)
        xc = sub(x, m)
        v = tmean(mul(xc, xc), axes, keepdims=True)
        inv = powc(add(v, p.epsilon), -0.5)
        xhat = mul(xc, inv)
        mom = p.momentum
        p.running_mean = (mom * p.running_mean
                          + (1.0 - mom) * m.data.reshape(-1).astype(p.running_mean.dtype))
        p.running_var = (mom * p.running_var
                         + (1.0 - mom) * v.data.reshape(-1).astype(p.running_var.dtype))
    else:
        inv = 1.0 / np.sqrt(p.running_var + p.epsilon)
        xhat = mul(sub(x, p.running_mean.astype(x.dtype)),
                   inv.astype(x.dtype))
    return add(mul(xhat, p.gamma), p.beta)


def global_pool_spatial(x, kind: str) -> Tensor:
    """Reduce the two spatial axes per channel: (...,N,M,C) -> (...,1,1,C)."""
    if kind == "avg":
        return tmean(x, axis=(-3, -2), keepdims=True)
    if kind == "max":
        return amax(x, axis=(-3, -2), keepdims=True)
    raise ValueError(f"unknown pool kind {kind!r}")


def pool_channelwise(x, kind: str) -> Tensor:
    """Reduce the channel axis per cell: (...,N,M,C) -> (...,N,M,1)."""
    if kind == "avg":
        return tmean(x, axis=-1, keepdims=True)
    if kind == "max":
        return amax(x, axis=-1, keepdims=True)
    raise ValueError(f"unknown pool kind {kind!r}")


def time_distribute(layer, x) -> Tensor:
    """Apply one set of weights independently to every frame.

    For (H,N,M,C) the frame axis acts as the batch; for (B,H,N,M,C) frames
    are folded into the batch axis and restored afterwards.
    """
    if x.ndim == 4:
        return layer(x)
    b, t = x.shape[0], x.shape[1]
    y = layer(reshape(x, (b * t, *x.shape[2:])))
    return reshape(y, (b, t, *y.shape[1:]))
