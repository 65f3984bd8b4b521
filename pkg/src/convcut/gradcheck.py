"""Central finite-difference verification of the autodiff rules.

:func:`check_gradients` compares tape gradients (computed in float32, the
dtype everything runs in) against central differences with step ``h``. The
finite differences are evaluated in float64 by default so that the check
measures the backward rules rather than float32 cancellation in ``f(x+h) -
f(x-h)``.

An element passes when ``|g - g_fd| <= tol * max(1, |g|, |g_fd|)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import nn, ops
from .model import build_model, profile_config
from .rng import CHECK_STREAM, make_rng
from .tensor import GradTape, Tensor, backward, no_grad, precision

STEP = 1e-3
TOLERANCE = 1e-3


@dataclass
class GradcheckResult:
    name: str
    max_error: float
    worst: str  # "<tensor>[<flat index>]" of the worst element
    checked: int

    def passed(self, tol: float = TOLERANCE) -> bool:
        return self.max_error <= tol


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], *, names: Sequence[str] | None = None,
                    h: float = STEP, sample: int | None = None, rng: np.random.Generator | None = None,
                    fd_dtype=np.float64, name: str = "") -> GradcheckResult:
    """Compare tape gradients of the scalar ``fn()`` w.r.t. ``inputs`` with central differences.

    ``fn`` must rebuild its result from the current ``.data`` of ``inputs`` on
    every call and be deterministic (re-seed any generator inside it). With
    ``sample`` set, only that many randomly chosen elements per tensor are
    checked.
    """
    names = list(names) if names is not None else [f"input{i}" for i in range(len(inputs))]
    with GradTape() as tape:
        loss = fn()
    grads = backward(loss, tape)
    analytic = [grads.get(t, np.zeros_like(t.data)).astype(np.float64).reshape(-1) for t in inputs]

    originals = [t.data for t in inputs]
    worst_err, worst_at, checked = 0.0, "", 0
    try:
        with precision(fd_dtype), no_grad():
            for t in inputs:
                t.data = t.data.astype(fd_dtype)
            for t, g, label in zip(inputs, analytic, names):
                flat = t.data.reshape(-1)
                if sample is None or sample >= flat.size:
                    idx: Iterable[int] = range(flat.size)
                else:
                    idx = (rng or make_rng(0, CHECK_STREAM)).choice(flat.size, sample, replace=False)
                for j in idx:
                    orig = flat[j]
                    flat[j] = orig + h
                    f_plus = float(fn().data.reshape(-1)[0])
                    flat[j] = orig - h
                    f_minus = float(fn().data.reshape(-1)[0])
                    flat[j] = orig
                    numeric = (f_plus - f_minus) / (2.0 * h)
                    err = abs(g[j] - numeric) / max(1.0, abs(g[j]), abs(numeric))
                    checked += 1
                    if err > worst_err or not worst_at:
                        worst_err, worst_at = err, f"{label}[{int(j)}]"
    finally:
        for t, data in zip(inputs, originals):
            t.data = data
    return GradcheckResult(name, worst_err, worst_at, checked)


def _rand(rng: np.random.Generator, *shape: int, scale: float = 1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return ops.sum(ops.mul(out, Tensor(weights)))


def _projected(op: Callable[[], Tensor], rng: np.random.Generator) -> Callable[[], Tensor]:
    """Turn a tensor-valued ``op`` into a scalar by a fixed random projection."""
    with no_grad():
        shape = op().shape
    weights = rng.standard_normal(shape)
    return lambda: _weighted_sum(op(), weights)


def _params(module: nn.Module) -> tuple[list[Tensor], list[str]]:
    named = list(module.named_parameters())
    return [p for _, p in named], [n for n, _ in named]


def _randomize(module: nn.Module, rng: np.random.Generator, scale: float = 0.5) -> None:
    """Replace every parameter with O(1) noise so no branch is numerically dead."""
    for _, p in module.named_parameters():
        p.data = (rng.standard_normal(p.shape) * scale).astype(p.data.dtype)


# Each case builder takes a generator and returns (fn, inputs, names).


def _case_add(rng):
    b, h, c = rng.integers(1, 4, size=3)
    x, bias = _rand(rng, b, h, c), _rand(rng, c)
    return _projected(lambda: ops.add(x, bias), rng), [x, bias], ["x", "bias"]


def _case_mul(rng):
    b, h, c = rng.integers(1, 4, size=3)
    x, s = _rand(rng, b, h, c), _rand(rng, c)
    return _projected(lambda: ops.mul(x, s), rng), [x, s], ["x", "scale"]


def _case_scale(rng):
    x = _rand(rng, *rng.integers(1, 5, size=2))
    c = float(rng.normal())
    return _projected(lambda: ops.scale(x, c), rng), [x], ["x"]


def _case_reshape(rng):
    m, n = rng.integers(1, 5, size=2)
    x = _rand(rng, m, n)
    return _projected(lambda: ops.reshape(x, (n, m)), rng), [x], ["x"]


def _case_transpose(rng):
    x = _rand(rng, *rng.integers(1, 5, size=3))
    return _projected(lambda: ops.transpose(x), rng), [x], ["x"]


def _case_matmul(rng):
    m, k, n = rng.integers(1, 6, size=3)
    if rng.random() < 0.5:
        a, b = _rand(rng, m, k), _rand(rng, k, n)
    else:
        a, b = _rand(rng, 2, m, k), _rand(rng, k, n)
    return _projected(lambda: ops.matmul(a, b), rng), [a, b], ["a", "b"]


def _case_softmax(rng):
    x = _rand(rng, *rng.integers(1, 5, size=2), scale=2.0)
    return _projected(lambda: ops.softmax(x), rng), [x], ["x"]


def _case_gelu(rng):
    x = _rand(rng, *rng.integers(1, 6, size=2), scale=2.0)
    return _projected(lambda: ops.gelu(x), rng), [x], ["x"]


def _case_layer_norm(rng):
    # Near-constant channel vectors make the normalisation so curved that the
    # O(h^2) truncation error of a 1e-3 step dominates; keep variance >= 0.1.
    b, h, w, c = rng.integers(1, 4, size=4) + np.array([0, 0, 0, 2])
    data = rng.standard_normal((b, h, w, c))
    low = data.var(axis=-1) < 0.1
    while low.any():
        data[low] = rng.standard_normal((int(low.sum()), c))
        low = data.var(axis=-1) < 0.1
    x, gamma, beta = Tensor(data, requires_grad=True), _rand(rng, c), _rand(rng, c)
    return _projected(lambda: ops.layer_norm(x, gamma, beta, 1e-6), rng), [x, gamma, beta], ["x", "gamma", "beta"]


def _case_depthwise(rng):
    h, w = rng.integers(3, 9, size=2)
    c = int(rng.integers(1, 5))
    k = int(rng.integers(1, min(h, w, 5) + 1))
    stride = int(rng.integers(1, 4))
    padding = "same" if rng.random() < 0.5 else "valid"
    x, kern = _rand(rng, 1, h, w, c), _rand(rng, k, k, c)
    return _projected(lambda: ops.conv2d_depthwise(x, kern, stride, padding), rng), [x, kern], ["x", "kernel"]


def _case_pointwise(rng):
    h, w, cin, cout = rng.integers(1, 5, size=4)
    x, kern, bias = _rand(rng, 2, h, w, cin), _rand(rng, cin, cout), _rand(rng, cout)
    return _projected(lambda: ops.conv2d_pointwise(x, kern, bias), rng), [x, kern, bias], ["x", "kernel", "bias"]


def _case_patchify(rng):
    k = int(rng.choice([2, 4]))
    n, cin, cout = rng.integers(1, 3, size=3) + np.array([0, 0, 1])
    x, kern, bias = _rand(rng, 1, k * n, k * n, cin), _rand(rng, k, k, cin, cout), _rand(rng, cout)
    return _projected(lambda: ops.conv2d_patchify(x, kern, bias), rng), [x, kern, bias], ["x", "kernel", "bias"]


def _case_spatial_mean(rng):
    x = _rand(rng, *rng.integers(1, 5, size=4))
    return _projected(lambda: ops.spatial_mean(x), rng), [x], ["x"]


def _case_spatial_dropout(rng):
    x = _rand(rng, 2, *rng.integers(1, 4, size=2), 4)
    seed = int(rng.integers(2**31))
    return _projected(lambda: ops.spatial_dropout(x, 0.5, True, make_rng(seed)), rng), [x], ["x"]


def _case_sparse_ce(rng):
    b, k = int(rng.integers(1, 5)), int(rng.integers(2, 8))
    logits = _rand(rng, b, k, scale=2.0)
    labels = rng.integers(0, k, size=b)
    return (lambda: ops.sparse_softmax_cross_entropy(logits, labels)), [logits], ["logits"]


def _block_case(factory, input_shape):
    def build(rng):
        layer = factory(rng)
        _randomize(layer, rng)
        x = _rand(rng, *input_shape(rng))
        params, names = _params(layer)
        return _projected(lambda: layer(x), rng), [x] + params, ["x"] + names
    return build


def _case_det(rng):
    block = nn.DetailExtractionBlock(8, rng, dropout_p=0.25, token_dim=4, d_q=3)
    _randomize(block, rng)
    x = _rand(rng, 2, 12, 12, 8)
    seed = int(rng.integers(2**31))
    params, names = _params(block)
    fn = _projected(lambda: block(x, training=True, rng=make_rng(seed)), rng)
    return fn, [x] + params, ["x"] + names


OP_CASES: dict[str, Callable] = {
    "add": _case_add,
    "mul": _case_mul,
    "scale": _case_scale,
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "matmul": _case_matmul,
    "softmax": _case_softmax,
    "gelu": _case_gelu,
    "layer_norm": _case_layer_norm,
    "conv2d_depthwise": _case_depthwise,
    "conv2d_pointwise": _case_pointwise,
    "conv2d_patchify": _case_patchify,
    "spatial_mean": _case_spatial_mean,
    "spatial_dropout": _case_spatial_dropout,
    "sparse_softmax_cross_entropy": _case_sparse_ce,
}

BLOCK_CASES: dict[str, Callable] = {
    "separable_conv": _block_case(
        lambda r: nn.SeparableConv2d(3, 4, int(r.integers(1, 5)), int(r.integers(1, 4)), r,
                                     "same" if r.random() < 0.5 else "valid"),
        lambda r: (1, 8, 8, 3)),
    "convnext_block": _block_case(lambda r: nn.ConvNeXtBlock(4, r), lambda r: (1, 6, 6, 4)),
    "stem": _block_case(lambda r: nn.Stem(3, 4, r), lambda r: (1, 8, 8, 3)),
    "downsample": _block_case(lambda r: nn.Downsample(3, 5, r), lambda r: (1, 4, 4, 3)),
    "self_attention": _block_case(lambda r: nn.SelfAttentionHead(3, 4, r),
                                  lambda r: (int(r.integers(1, 6)), 3)),
    "detail_extraction": _case_det,
}


def check_case(name: str, builder: Callable, seed: int, instances: int = 5,
               sample: int | None = None) -> GradcheckResult:
    """Run ``instances`` random instances of one case; report the worst."""
    rng = make_rng(seed, CHECK_STREAM)
    worst = GradcheckResult(name, 0.0, "", 0)
    total = 0
    for i in range(instances):
        fn, inputs, names = builder(rng)
        res = check_gradients(fn, inputs, names=names, sample=sample, rng=rng, name=name)
        total += res.checked
        if res.max_error >= worst.max_error:
            worst = GradcheckResult(name, res.max_error, f"instance {i}: {res.worst}", 0)
    worst.checked = total
    return worst


def check_model(seed: int, sample: int = 32, profile: str = "tiny") -> GradcheckResult:
    """Full forward + sparse cross-entropy on a random 2-image batch.

    Layer scales start at 1e-6, which would make most block gradients
    vanish, so every parameter is redrawn at O(1) scale before checking.
    Dropout is active with a re-seeded generator so each evaluation draws the
    same mask.
    """
    rng = make_rng(seed, CHECK_STREAM)
    model = build_model(profile_config(profile, num_classes=3), rng)
    for _, p in model.named_parameters():
        p.data = (p.data + rng.standard_normal(p.shape) * 0.2).astype(np.float32)
    size = 64 if profile == "tiny" else 224
    x = Tensor(rng.random((2, size, size, 3)))
    labels = rng.integers(0, 3, size=2)
    mask_seed = int(rng.integers(2**31))
    params, names = _params(model)

    def fn():
        logits = model.forward(x, training=True, rng=make_rng(mask_seed))
        return ops.sparse_softmax_cross_entropy(logits, labels)

    return check_gradients(fn, params, names=names, sample=sample, rng=rng, name=f"model[{profile}]")


def run_suite(seed: int = 0, instances: int = 5, include_model: bool = True) -> list[GradcheckResult]:
    results = [check_case(n, b, seed, instances) for n, b in OP_CASES.items()]
    results += [check_case(n, b, seed, instances) for n, b in BLOCK_CASES.items()]
    if include_model:
        results.append(check_model(seed))
    return results
