"""Convolution, normalization and block layers on top of :mod:`quartznet.tensor`.

All activations are laid out ``[batch, channels, time]``. Weight layouts:

* regular conv: ``[K, c_in, c_out]``
* depthwise conv: ``[K, c]``
* pointwise conv: ``[c_in // groups, c_out]``; output channel ``o`` belongs to
  group ``o // (c_out // groups)`` and reads that group's input slice.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor, add, as_tensor, make_node, relu

# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


def same_padding(length: int, kernel_size: int, stride: int = 1, dilation: int = 1) -> tuple[int, int, int]:
    """Return ``(pad_left, pad_right, out_len)`` with ``out_len = ceil(length / stride)``.

    The left pad depends only on the kernel, so frame alignment does not
    shift with the (padded) input length.
    """
    out_len = -(-length // stride)
    span = dilation * (kernel_size - 1) + 1
    left = dilation * (kernel_size - 1) // 2
    right = max((out_len - 1) * stride + span - length - left, 0)
    return left, right, out_len


def _check_input(x: Tensor, channels: int, what: str) -> None:
    if x.ndim != 3:
        raise ShapeError(f"{what}: expected [B, C, T] input, got shape {x.shape}")
    if x.shape[1] != channels:
        raise ShapeError(f"{what}: expected {channels} input channels, got {x.shape[1]}")


def _taps(xp: np.ndarray, k: int, dilation: int, stride: int, out_len: int):
    start = k * dilation
    return slice(start, start + stride * (out_len - 1) + 1, stride)


# ---------------------------------------------------------------------------
# Functional ops
# ---------------------------------------------------------------------------


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, dilation: int = 1) -> Tensor:
    """Regular 1D convolution with "same" padding, ``weight`` is ``[K, c_in, c_out]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    K, c_in, c_out = weight.shape
    _check_input(x, c_in, "conv1d")
    B, _, T = x.shape
    left, right, T_out = same_padding(T, K, stride, dilation)
    xp = np.pad(x.data, ((0, 0), (0, 0), (left, right)))
    W = weight.data

    out = np.zeros((B, c_out, T_out), dtype=np.result_type(x.data, W))
    for k in range(K):
        out += np.matmul(W[k].T, xp[:, :, _taps(xp, k, dilation, stride, T_out)])
    if bias is not None:
        out += bias.data[None, :, None]

    def backward(g):
        gx = np.zeros_like(xp)
        gW = np.empty_like(W)
        for k in range(K):
            sl = _taps(xp, k, dilation, stride, T_out)
            gW[k] = np.tensordot(xp[:, :, sl], g, axes=([0, 2], [0, 2]))
            gx[:, :, sl] += np.matmul(W[k], g)
        gx = gx[:, :, left : left + T]
        gb = g.sum(axis=(0, 2)) if bias is not None else None
        return gx, gW, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward)


def depthwise_conv1d(x: Tensor, weight: Tensor, stride: int = 1, dilation: int = 1) -> Tensor:
    """One K-tap filter per channel, ``weight`` is ``[K, c]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    K, C = weight.shape
    _check_input(x, C, "depthwise_conv1d")
    B, _, T = x.shape
    left, right, T_out = same_padding(T, K, stride, dilation)
    xp = np.pad(x.data, ((0, 0), (0, 0), (left, right)))
    W = weight.data

    out = np.zeros((B, C, T_out), dtype=np.result_type(x.data, W))
    for k in range(K):
        out += xp[:, :, _taps(xp, k, dilation, stride, T_out)] * W[k][None, :, None]

    def backward(g):
        gx = np.zeros_like(xp)
        gW = np.empty_like(W)
        for k in range(K):
            sl = _taps(xp, k, dilation, stride, T_out)
            gW[k] = (xp[:, :, sl] * g).sum(axis=(0, 2))
            gx[:, :, sl] += g * W[k][None, :, None]
        return gx[:, :, left : left + T], gW

    return make_node(out, (x, weight), backward)


def pointwise_conv1d(x: Tensor, weight: Tensor, groups: int = 1, bias: Tensor | None = None) -> Tensor:
    """Kernel-size-1 channel mixing restricted to ``groups`` disjoint channel groups."""
    x, weight = as_tensor(x), as_tensor(weight)
    cin_g, c_out = weight.shape
    c_in = cin_g * groups
    if c_out % groups:
        raise ConfigError(f"groups={groups} does not divide c_out={c_out}")
    _check_input(x, c_in, "pointwise_conv1d")
    B, _, T = x.shape
    cout_g = c_out // groups
    xg = x.data.reshape(B, groups, cin_g, T)
    Wt = weight.data.reshape(cin_g, groups, cout_g).transpose(1, 2, 0)  # [g, cout_g, cin_g]
    out = np.matmul(Wt, xg).reshape(B, c_out, T)
    if bias is not None:
        out = out + bias.data[None, :, None]

    def backward(g):
        gg = g.reshape(B, groups, cout_g, T)
        gx = np.matmul(Wt.transpose(0, 2, 1), gg).reshape(B, c_in, T)
        gWt = np.matmul(gg, xg.transpose(0, 1, 3, 2)).sum(axis=0)  # [g, cout_g, cin_g]
        gW = gWt.transpose(2, 0, 1).reshape(cin_g, c_out)
        gb = g.sum(axis=(0, 2)) if bias is not None else None
        return gx, gW, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward)


def shuffle_permutation(channels: int, groups: int) -> np.ndarray:
    """Destination index of each channel: ``i -> (i % g) * (c // g) + i // g``."""
    if groups < 1 or channels % groups:
        raise ConfigError(f"groups={groups} does not divide channels={channels}")
    i = np.arange(channels)
    return (i % groups) * (channels // groups) + i // groups


def channel_shuffle(x: Tensor, groups: int) -> Tensor:
    x = as_tensor(x)
    dest = shuffle_permutation(x.shape[1], groups)
    src = np.argsort(dest)  # out[:, j] = x[:, src[j]]
    return make_node(x.data[:, src], (x,), lambda g: (g[:, dest],))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (batch, time).

    In training mode the running statistics are updated in place.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _check_input(x, gamma.shape[0], "batch_norm")
    B, C, T = x.shape
    n = B * T
    if training:
        if n < 2:
            raise ContractError("batch_norm in training mode needs batch*time > 1")
        mean = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * n / (n - 1)
    else:
        mean, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None]) * inv_std[None, :, None]
    out = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2))
        gbeta = g.sum(axis=(0, 2))
        gxhat = g * gamma.data[None, :, None]
        if training:
            gx = (
                inv_std[None, :, None]
                / n
                * (n * gxhat - gxhat.sum(axis=(0, 2), keepdims=True) - xhat * (gxhat * xhat).sum(axis=(0, 2), keepdims=True))
            )
        else:
            gx = gxhat * inv_std[None, :, None]
        return gx, ggamma, gbeta

    return make_node(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    x = as_tensor(x)
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return make_node(x.data * keep, (x,), lambda g: (g * keep,))


def mask_time(x: Tensor, lengths) -> Tensor:
    """Zero every frame at or beyond each sequence's length."""
    x = as_tensor(x)
    lengths = np.asarray(lengths)
    mask = (np.arange(x.shape[2])[None, :] < lengths[:, None]).astype(x.dtype)[:, None, :]
    if mask.all():
        return x
    return make_node(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Modules
# ---------------------------------------------------------------------------


class Module:
    """Minimal parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad``; sub-modules
    may be attributes or lists of modules. Buffers (non-trained state such as
    batch-norm running statistics) are numpy arrays listed in ``_buffers``.
    """

    _buffers: tuple[str, ...] = ()
    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for i, sub in enumerate(val):
                    yield from sub.named_parameters(f"{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key in self._buffers:
            yield f"{prefix}{key}", getattr(self, key)
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Module):
                yield from val.named_buffers(name + ".")
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for i, sub in enumerate(val):
                    yield from sub.named_buffers(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for sub in val:
                    yield from sub.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


@dataclass
class Conv1dParams:
    """Geometry of a convolution; weights live on the module."""

    kernel_size: int
    c_in: int
    c_out: int
    stride: int = 1
    dilation: int = 1
    groups: int = 1

    def __post_init__(self):
        if self.kernel_size < 1 or self.stride < 1 or self.dilation < 1:
            raise ConfigError(f"kernel_size, stride and dilation must be >= 1: {self}")
        if self.c_in < 1 or self.c_out < 1:
            raise ConfigError(f"channel counts must be >= 1: {self}")
        if self.c_in % self.groups or self.c_out % self.groups:
            raise ConfigError(f"groups={self.groups} must divide c_in={self.c_in} and c_out={self.c_out}")


class Conv1d(Module):
    def __init__(self, p: Conv1dParams, rng: np.random.Generator, bias: bool = False, dtype=np.float32):
        self.p = p
        self.weight = _uniform(rng, (p.kernel_size, p.c_in, p.c_out), p.kernel_size * p.c_in, dtype)
        self.bias = _uniform(rng, (p.c_out,), p.kernel_size * p.c_in, dtype) if bias else None

    def forward(self, x):
        if self.p.kernel_size == 1 and self.p.stride == 1:
            return pointwise_conv1d(x, self.weight.reshape(self.p.c_in, self.p.c_out), bias=self.bias)
        return conv1d(x, self.weight, self.bias, self.p.stride, self.p.dilation)


class DepthwiseConv1d(Module):
    def __init__(self, p: Conv1dParams, rng: np.random.Generator, dtype=np.float32):
        if p.c_in != p.c_out:
            raise ConfigError(f"depthwise conv needs c_in == c_out, got {p.c_in} -> {p.c_out}")
        self.p = p
        self.weight = _uniform(rng, (p.kernel_size, p.c_in), p.kernel_size, dtype)

    def forward(self, x):
        return depthwise_conv1d(x, self.weight, self.p.stride, self.p.dilation)


class PointwiseConv1d(Module):
    def __init__(self, p: Conv1dParams, rng: np.random.Generator, shuffle: bool = False, bias: bool = False, dtype=np.float32):
        self.p = p
        self.shuffle = shuffle and p.groups > 1
        fan_in = p.c_in // p.groups
        self.weight = _uniform(rng, (fan_in, p.c_out), fan_in, dtype)
        self.bias = _uniform(rng, (p.c_out,), fan_in, dtype) if bias else None

    def forward(self, x):
        out = pointwise_conv1d(x, self.weight, self.p.groups, self.bias)
        if self.shuffle:
            out = channel_shuffle(out, self.p.groups)
        return out


class TCSConv1d(Module):
    """Time-channel separable conv: depthwise over time, then (grouped) pointwise."""

    def __init__(
        self,
        kernel_size: int,
        c_in: int,
        c_out: int,
        rng: np.random.Generator,
        stride: int = 1,
        dilation: int = 1,
        groups: int = 1,
        shuffle: bool = True,
        dtype=np.float32,
    ):
        self.depthwise = DepthwiseConv1d(Conv1dParams(kernel_size, c_in, c_in, stride, dilation), rng, dtype)
        self.pointwise = PointwiseConv1d(Conv1dParams(1, c_in, c_out, groups=groups), rng, shuffle, dtype=dtype)

    def forward(self, x):
        return self.pointwise(self.depthwise(x))


def tcs_conv(x: Tensor, dw_weight: Tensor, pw_weight: Tensor, stride: int = 1, dilation: int = 1, groups: int = 1) -> Tensor:
    return pointwise_conv1d(depthwise_conv1d(x, dw_weight, stride, dilation), pw_weight, groups)


class BatchNorm1d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        if eps <= 0:
            raise ConfigError("batch norm epsilon must be positive")
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum, self.eps)


class ConvBN(Module):
    """conv (separable or regular) -> batch norm. Inputs are masked to ``lengths`` first."""

    def __init__(
        self,
        kernel_size: int,
        c_in: int,
        c_out: int,
        rng: np.random.Generator,
        separable: bool = True,
        stride: int = 1,
        dilation: int = 1,
        groups: int = 1,
        dtype=np.float32,
    ):
        if separable:
            self.conv = TCSConv1d(kernel_size, c_in, c_out, rng, stride, dilation, groups, dtype=dtype)
        else:
            self.conv = Conv1d(Conv1dParams(kernel_size, c_in, c_out, stride, dilation), rng, dtype=dtype)
        self.bn = BatchNorm1d(c_out, dtype=dtype)
        self.stride = stride

    def forward(self, x, lengths):
        return self.bn(self.conv(mask_time(x, lengths)))


class ResidualBlock(Module):
    """R conv-bn-relu-dropout modules plus a 1x1 conv + bn skip path.

    The last module's ReLU (and dropout) is applied after adding the skip.
    """

    def __init__(
        self,
        repeat: int,
        kernel_size: int,
        c_in: int,
        c_out: int,
        rng: np.random.Generator,
        separable: bool = True,
        groups: int = 1,
        dropout: float = 0.0,
        dtype=np.float32,
    ):
        if repeat < 1:
            raise ConfigError("a block needs at least one module")
        self.body = [
            ConvBN(kernel_size, c_in if r == 0 else c_out, c_out, rng, separable, groups=groups, dtype=dtype)
            for r in range(repeat)
        ]
        self.skip = ConvBN(1, c_in, c_out, rng, separable=False, dtype=dtype)
        self.dropout = dropout

    def forward(self, x, lengths, rng=None):
        out = x
        for i, m in enumerate(self.body):
            out = m(out, lengths)
            if i < len(self.body) - 1:
                out = dropout(relu(out), self.dropout, rng, self.training)
        res = self.skip(x, lengths)
        if res.shape != out.shape:
            raise ShapeError(f"residual shape {res.shape} != body shape {out.shape}")
        return dropout(relu(add(out, res)), self.dropout, rng, self.training)
