"""Differentiable operations on channels-last tensors.

Every function takes :class:`~convcut.tensor.Tensor` inputs, computes the
forward value with numpy and, when a tape is active and an input requires a
gradient, records a closure computing the input gradients.

Image tensors are laid out as (batch, height, width, channels).
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, DimensionError, NumericalError
from .tensor import Tensor, record

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def _finite(op: str, out: np.ndarray, *inputs: Tensor) -> np.ndarray:
    if not np.all(np.isfinite(out)) and all(np.all(np.isfinite(t.data)) for t in inputs):
        raise NumericalError(f"{op} produced non-finite values from finite inputs")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural


def add(a: Tensor, b: Tensor) -> Tensor:
    """``a + b`` with numpy broadcasting (used for biases and residuals)."""
    out = _finite("add", a.data + b.data, a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", out, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    out = _finite("mul", a.data * b.data, a, b)

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record("mul", out, (a, b), rule)


def scale(a: Tensor, c: float) -> Tensor:
    out = _finite("scale", a.data * c, a)
    return record("scale", out, (a,), lambda g: (g * c,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(tuple(shape))
    return record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise DimensionError(f"transpose needs rank >= 2, got shape {a.shape}")
    out = np.swapaxes(a.data, -1, -2)
    return record("transpose", out, (a,), lambda g: (np.swapaxes(g, -1, -2),))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.asarray(a.data.sum(), dtype=a.data.dtype).reshape(1)
    return record("sum", out, (a,), lambda g: (np.broadcast_to(g.reshape(()), a.shape).copy(),))


def flip_width(a: Tensor) -> Tensor:
    """Mirror a 4-D tensor along its width axis."""
    out = a.data[:, :, ::-1, :]
    return record("flip_width", out, (a,), lambda g: (g[:, :, ::-1, :],))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either a plain matrix shared
    across the batch or has the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    out = _finite("matmul", np.matmul(a.data, b.data), a, b)

    def rule(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, _unbroadcast(gb, b.shape)

    return record("matmul", out, (a, b), rule)


def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting the row max."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = _finite("softmax", e / e.sum(axis=-1, keepdims=True), x)

    def rule(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record("softmax", y, (x,), rule)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: ``0.5 x (1 + tanh(sqrt(2/pi)(x + 0.044715 x^3)))``."""
    xd = x.data
    t = np.tanh(_GELU_C * (xd + _GELU_A * xd**3))
    out = _finite("gelu", 0.5 * xd * (1.0 + t), x)

    def rule(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return record("gelu", out, (x,), rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the last (channel) axis, then apply ``gamma``/``beta``."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"layer_norm affine params {gamma.shape}/{beta.shape} do not match {c} channels"
        )
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    # Statistics in float64: with few channels of nearly equal value the
    # float32 centring error is amplified by 1/std.
    xd = x.data.astype(np.float64)
    centred = xd - xd.mean(axis=-1, keepdims=True)
    var = (centred * centred).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centred * rstd
    out = _finite("layer_norm", (xhat * gamma.data + beta.data).astype(x.data.dtype), x, gamma, beta)

    def rule(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gamma.data.astype(np.float64)
        gx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx.astype(g.dtype), (g * xhat).sum(axis=lead).astype(g.dtype), g.sum(axis=lead)

    return record("layer_norm", out, (x, gamma, beta), rule)


# ---------------------------------------------------------------------------
# convolutions


def _conv_geometry(size: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Return (output size, pad before, pad after) along one spatial axis."""
    if padding == "valid":
        if k > size:
            raise DimensionError(f"kernel {k} larger than input extent {size}")
        return (size - k) // stride + 1, 0, 0
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return out, total // 2, total - total // 2
    raise ConfigError(f"unknown padding {padding!r}; expected 'valid' or 'same'")


def conv2d_depthwise(x: Tensor, kernel: Tensor, stride: int = 1, padding: str = "valid") -> Tensor:
    """Per-channel k x k convolution (cross-correlation) of a B x H x W x C tensor.

    ``kernel`` has shape (k, k, C). ``same`` padding zero-pads with the odd
    row/column going to the bottom/right and yields ceil(H / stride) rows.
    """
    if x.ndim != 4:
        raise DimensionError(f"conv2d_depthwise expects B x H x W x C, got {x.shape}")
    if kernel.ndim != 3 or kernel.shape[0] != kernel.shape[1]:
        raise DimensionError(f"depthwise kernel must be k x k x C, got {kernel.shape}")
    if kernel.shape[2] != x.shape[3]:
        raise DimensionError(f"depthwise kernel has {kernel.shape[2]} channels, input has {x.shape[3]}")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    b, h, w, c = x.shape
    k = kernel.shape[0]
    ho, pt, pb = _conv_geometry(h, k, stride, padding)
    wo, pl, pr = _conv_geometry(w, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if pt + pb + pl + pr else x.data
    span_h = (ho - 1) * stride + 1
    span_w = (wo - 1) * stride + 1
    out = np.zeros((b, ho, wo, c), dtype=np.result_type(x.data, kernel.data))
    for u in range(k):
        for v in range(k):
            out += xp[:, u : u + span_h : stride, v : v + span_w : stride, :] * kernel.data[u, v]
    _finite("conv2d_depthwise", out, x, kernel)

    def rule(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kernel.data)
        for u in range(k):
            for v in range(k):
                window = (slice(None), slice(u, u + span_h, stride), slice(v, v + span_w, stride))
                gxp[window] += g * kernel.data[u, v]
                gk[u, v] = (g * xp[window]).sum(axis=(0, 1, 2))
        return gxp[:, pt : pt + h, pl : pl + w, :], gk

    return record("conv2d_depthwise", out, (x, kernel), rule)


def conv2d_pointwise(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """1 x 1 convolution: a per-pixel linear map Cin -> Cout plus bias.

    Also serves as a dense layer on B x F inputs, since only the last axis is
    mixed.
    """
    if kernel.ndim != 2 or kernel.shape[0] != x.shape[-1]:
        raise DimensionError(f"pointwise kernel {kernel.shape} does not accept {x.shape[-1]} channels")
    if bias is not None and bias.shape != (kernel.shape[1],):
        raise DimensionError(f"pointwise bias {bias.shape} does not match {kernel.shape[1]} outputs")
    lead = x.shape[:-1]
    flat = x.data.reshape(-1, x.shape[-1])
    out = flat @ kernel.data
    if bias is not None:
        out = out + bias.data
    out = _finite("conv2d_pointwise", out.reshape(lead + (kernel.shape[1],)), x, kernel)

    def rule(g):
        g2 = g.reshape(-1, kernel.shape[1])
        gx = (g2 @ kernel.data.T).reshape(x.shape)
        gk = flat.T @ g2
        return (gx, gk) if bias is None else (gx, gk, g2.sum(axis=0))

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return record("conv2d_pointwise", out, inputs, rule)


def conv2d_patchify(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Full convolution whose stride equals its kernel size (non-overlapping patches).

    ``kernel`` has shape (k, k, Cin, Cout). H and W must be multiples of k.
    This is the ConvNeXt stem (k=4) and inter-stage downsampling (k=2).
    """
    if x.ndim != 4:
        raise DimensionError(f"conv2d_patchify expects B x H x W x C, got {x.shape}")
    k, k2, cin, cout = kernel.shape
    if k != k2 or cin != x.shape[3]:
        raise DimensionError(f"patch kernel {kernel.shape} does not fit input {x.shape}")
    b, h, w, _ = x.shape
    if h % k or w % k:
        raise DimensionError(f"spatial dims {h}x{w} are not divisible by patch size {k}")
    ho, wo = h // k, w // k
    patches = (
        x.data.reshape(b, ho, k, wo, k, cin).transpose(0, 1, 3, 2, 4, 5).reshape(b * ho * wo, k * k * cin)
    )
    wmat = kernel.data.reshape(k * k * cin, cout)
    out = patches @ wmat
    if bias is not None:
        out = out + bias.data
    out = _finite("conv2d_patchify", out.reshape(b, ho, wo, cout), x, kernel)

    def rule(g):
        g2 = g.reshape(-1, cout)
        gp = g2 @ wmat.T
        gx = gp.reshape(b, ho, wo, k, k, cin).transpose(0, 1, 3, 2, 4, 5).reshape(x.shape)
        gk = (patches.T @ g2).reshape(kernel.shape)
        return (gx, gk) if bias is None else (gx, gk, g2.sum(axis=0))

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return record("conv2d_patchify", out, inputs, rule)


# ---------------------------------------------------------------------------
# pooling, dropout, loss


def spatial_mean(x: Tensor) -> Tensor:
    """Per-channel mean over the H x W plane: B x H x W x C -> B x C."""
    if x.ndim != 4:
        raise DimensionError(f"spatial_mean expects B x H x W x C, got {x.shape}")
    b, h, w, c = x.shape
    out = x.data.mean(axis=(1, 2))

    def rule(g):
        return (np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).copy(),)

    return record("spatial_mean", out, (x,), rule)


def spatial_dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Drop whole (batch, channel) planes with probability ``p`` (inverted dropout).

    In eval mode the input tensor itself is returned.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not training:
        return x
    if x.ndim != 4:
        raise DimensionError(f"spatial_dropout expects B x H x W x C, got {x.shape}")
    if rng is None:
        raise ConfigError("training-mode spatial_dropout needs a random generator")
    b, _, _, c = x.shape
    keep = rng.random((b, c)) >= p
    mask = (keep.astype(x.data.dtype) / (1.0 - p)).astype(x.data.dtype)[:, None, None, :]
    out = x.data * mask
    return record("spatial_dropout", out, (x,), lambda g: (g * mask,))


def sparse_softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]`` (log-sum-exp form)."""
    if logits.ndim != 2:
        raise DimensionError(f"logits must be B x K, got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    bad = np.flatnonzero((labels < 0) | (labels >= k))
    if bad.size:
        i = int(bad[0])
        raise DataError(f"label {int(labels[i])} at sample {i} is outside [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.asarray((lse - z[rows, labels]).mean(), dtype=logits.data.dtype).reshape(1)
    _finite("sparse_softmax_cross_entropy", loss, logits)

    def rule(g):
        probs = np.exp(z - lse[:, None])
        probs[rows, labels] -= 1.0
        return (probs * (g.reshape(()) / n),)

    return record("sparse_softmax_cross_entropy", loss, (logits,), rule)
