"""Parameterised layers of the Conv-cut network.

Layers are small containers of :class:`~convcut.tensor.Parameter` tensors with
a ``__call__`` forward. Parameters are discovered by walking attributes, so a
layer only has to assign them.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .rng import trunc_normal
from .tensor import Parameter, Tensor

LN_EPS = 1e-6


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()], dtype=np.int64))


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = LN_EPS):
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)


class Linear(Module):
    """Dense map on the last axis (a pointwise convolution on image tensors)."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.weight = Parameter(trunc_normal(rng, (cin, cout)))
        self.bias = Parameter(np.zeros(cout))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d_pointwise(x, self.weight, self.bias)


class SeparableConv2d(Module):
    """Depthwise k x k convolution followed by a pointwise Cin -> Cout projection."""

    def __init__(self, cin: int, cout: int, kernel_size: int, stride: int,
                 rng: np.random.Generator, padding: str = "valid"):
        if padding not in ("valid", "same"):
            raise ConfigError(f"unknown padding {padding!r}")
        self.depthwise = Parameter(trunc_normal(rng, (kernel_size, kernel_size, cin)))
        self.pointwise = Parameter(trunc_normal(rng, (cin, cout)))
        self.bias = Parameter(np.zeros(cout))
        self.stride = stride
        self.padding = padding

    @property
    def kernel_size(self) -> int:
        return self.depthwise.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[3] != self.depthwise.shape[2]:
            raise DimensionError(
                f"separable conv expects {self.depthwise.shape[2]} input channels, got shape {x.shape}"
            )
        y = ops.conv2d_depthwise(x, self.depthwise, self.stride, self.padding)
        return ops.conv2d_pointwise(y, self.pointwise, self.bias)


class ConvNeXtBlock(Module):
    """Residual block ``x + scale * project(gelu(expand(norm(dw7(x)))))``."""

    def __init__(self, channels: int, rng: np.random.Generator, layer_scale_init: float = 1e-6,
                 kernel_size: int = 7, expansion: int = 4):
        self.dwconv = Parameter(trunc_normal(rng, (kernel_size, kernel_size, channels)))
        self.norm = LayerNorm(channels)
        self.expand = Linear(channels, expansion * channels, rng)
        self.project = Linear(expansion * channels, channels, rng)
        self.layer_scale = Parameter(np.full(channels, layer_scale_init))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[3] != self.dwconv.shape[2]:
            raise DimensionError(f"ConvNeXt block of width {self.dwconv.shape[2]} got {x.shape}")
        y = ops.conv2d_depthwise(x, self.dwconv, 1, "same")
        y = self.project(ops.gelu(self.expand(self.norm(y))))
        return ops.add(x, ops.mul(y, self.layer_scale))


class Stem(Module):
    """Non-overlapping patch projection followed by channel layer norm."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, patch: int = 4):
        self.kernel = Parameter(trunc_normal(rng, (patch, patch, cin, cout)))
        self.bias = Parameter(np.zeros(cout))
        self.norm = LayerNorm(cout)

    def __call__(self, x: Tensor) -> Tensor:
        return self.norm(ops.conv2d_patchify(x, self.kernel, self.bias))


class Downsample(Module):
    """Layer norm then a 2 x 2 stride-2 convolution (halves H and W)."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.norm = LayerNorm(cin)
        self.kernel = Parameter(trunc_normal(rng, (2, 2, cin, cout)))
        self.bias = Parameter(np.zeros(cout))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 4 and (x.shape[1] % 2 or x.shape[2] % 2):
            raise DimensionError(f"downsample needs even spatial dims, got {x.shape[1]}x{x.shape[2]}")
        return ops.conv2d_patchify(self.norm(x), self.kernel, self.bias)


class SelfAttentionHead(Module):
    """Single-head scaled dot-product attention with learned Q/K/V projections.

    Accepts tokens as T x d_in or B x T x d_in and returns softmax(Q K^T / sqrt(d_q)) V.
    """

    def __init__(self, d_in: int, d_q: int, rng: np.random.Generator):
        self.w_q = Parameter(trunc_normal(rng, (d_in, d_q)))
        self.w_k = Parameter(trunc_normal(rng, (d_in, d_q)))
        self.w_v = Parameter(trunc_normal(rng, (d_in, d_q)))

    @property
    def d_q(self) -> int:
        return self.w_q.shape[1]

    def weights(self, tokens: Tensor) -> Tensor:
        """The row-stochastic attention matrix for ``tokens``."""
        self._check(tokens)
        q = ops.matmul(tokens, self.w_q)
        k = ops.matmul(tokens, self.w_k)
        scores = ops.scale(ops.matmul(q, ops.transpose(k)), 1.0 / math.sqrt(self.d_q))
        return ops.softmax(scores)

    def __call__(self, tokens: Tensor) -> Tensor:
        v = ops.matmul(tokens, self.w_v)
        return ops.matmul(self.weights(tokens), v)

    def _check(self, tokens: Tensor) -> None:
        if tokens.ndim not in (2, 3) or tokens.shape[-1] != self.w_q.shape[0]:
            raise DimensionError(f"attention expects tokens of width {self.w_q.shape[0]}, got {tokens.shape}")


def tokenize(pooled: Tensor, token_dim: int) -> Tensor:
    """Split each pooled B x C vector into C / token_dim tokens of width token_dim."""
    b, c = pooled.shape
    if c % token_dim:
        raise DimensionError(f"{c} channels are not divisible by token_dim {token_dim}")
    return ops.reshape(pooled, (b, c // token_dim, token_dim))


class DetailExtractionBlock(Module):
    """Layer norm, stacked separable convolutions, spatial dropout, global
    average pooling and (optionally) self-attention over channel groups.

    The first convolution is 4x4 stride 4 and the second 2x2 stride 2, both
    unpadded. A third layer, when requested, is 2x2 stride 2 with ``same``
    padding so it still fits a 1x1 map. The pooled C-vector is cut into
    ``C / token_dim`` tokens before attention; ``token_dim == C`` gives a
    single token. The output is B x F with F = (C / token_dim) * d_q, or
    F = C without attention.
    """

    LAYOUT = ((4, 4, "valid"), (2, 2, "valid"), (2, 2, "same"))

    def __init__(self, channels: int, rng: np.random.Generator, *, conv_layers: int = 2,
                 dropout_p: float = 0.1, token_dim: int = 16, d_q: int = 16,
                 enable_attention: bool = True):
        if not 1 <= conv_layers <= len(self.LAYOUT):
            raise ConfigError(f"conv_layers must be 1..{len(self.LAYOUT)}, got {conv_layers}")
        if not 0.0 <= dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {dropout_p}")
        if enable_attention and (token_dim < 1 or channels % token_dim):
            raise ConfigError(f"token_dim {token_dim} must divide the channel count {channels}")
        self.norm = LayerNorm(channels)
        self.convs = [
            SeparableConv2d(channels, channels, k, s, rng, padding)
            for k, s, padding in self.LAYOUT[:conv_layers]
        ]
        self.dropout_p = dropout_p
        self.token_dim = token_dim
        self.attention = SelfAttentionHead(token_dim, d_q, rng) if enable_attention else None
        self.channels = channels

    @property
    def out_features(self) -> int:
        if self.attention is None:
            return self.channels
        return self.channels // self.token_dim * self.attention.d_q

    def __call__(self, x: Tensor, training: bool = False, rng: np.random.Generator | None = None,
                 trace: list | None = None) -> Tensor:
        y = self.norm(x)
        for i, conv in enumerate(self.convs):
            try:
                y = conv(y)
            except DimensionError as exc:
                raise DimensionError(f"det.convs.{i}: {exc}") from exc
            if trace is not None:
                trace.append((f"det.convs.{i}", y.shape))
        y = ops.spatial_dropout(y, self.dropout_p, training, rng)
        pooled = ops.spatial_mean(y)
        if trace is not None:
            trace.append(("det.pool", pooled.shape))
        if self.attention is None:
            return pooled
        return attend_pooled(self.attention, pooled, self.token_dim, trace, "det")


def attend_pooled(head: SelfAttentionHead, pooled: Tensor, token_dim: int,
                  trace: list | None = None, prefix: str = "") -> Tensor:
    tokens = tokenize(pooled, token_dim)
    out = head(tokens)
    if trace is not None:
        trace.append((f"{prefix}.tokens", tokens.shape))
        trace.append((f"{prefix}.attention", out.shape))
    b, t, d = out.shape
    return ops.reshape(out, (b, t * d))
