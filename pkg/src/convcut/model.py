"""The Conv-cut network: truncated ConvNeXt backbone, Detail Extraction, linear head."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError, LayerLookupError
from .nn import (
    ConvNeXtBlock,
    DetailExtractionBlock,
    Downsample,
    Linear,
    Module,
    SelfAttentionHead,
    Stem,
    attend_pooled,
)
from .tensor import GradTape, Parameter, Tensor, backward, no_grad

BACKBONE_PREFIXES = ("stem.", "stages.")


@dataclass
class ConvCutConfig:
    retained_stages: int = 2
    stage_widths: tuple[int, ...] = (128, 256, 512, 1024)
    stage_depths: tuple[int, ...] = (3, 3, 27, 3)
    num_classes: int = 7
    dropout_p: float = 0.1
    token_dim: int = 16
    d_q: int = 16
    freeze_backbone: bool = False
    enable_attention: bool = True
    enable_detail_extraction: bool = True
    det_conv_layers: int = 2
    in_channels: int = 3
    layer_scale_init: float = 1e-6

    def __post_init__(self):
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        self.stage_depths = tuple(int(d) for d in self.stage_depths)

    def problems(self) -> list[str]:
        errs = []
        if len(self.stage_widths) != len(self.stage_depths):
            errs.append(
                f"stage_widths has {len(self.stage_widths)} entries but stage_depths has {len(self.stage_depths)}"
            )
        if not 1 <= self.retained_stages <= 3:
            errs.append(f"retained_stages must be 1, 2 or 3, got {self.retained_stages}")
        if self.retained_stages > len(self.stage_widths):
            errs.append(f"retained_stages {self.retained_stages} exceeds {len(self.stage_widths)} configured stages")
        if any(w < 1 for w in self.stage_widths):
            errs.append(f"stage widths must be positive, got {self.stage_widths}")
        if any(d < 0 for d in self.stage_depths):
            errs.append(f"stage depths must be non-negative, got {self.stage_depths}")
        if self.num_classes < 2:
            errs.append(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 <= self.dropout_p < 1.0:
            errs.append(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.token_dim < 1 or self.d_q < 1:
            errs.append(f"token_dim and d_q must be positive, got {self.token_dim} and {self.d_q}")
        if self.det_conv_layers not in (1, 2, 3):
            errs.append(f"det_conv_layers must be 1, 2 or 3, got {self.det_conv_layers}")
        if self.in_channels < 1:
            errs.append(f"in_channels must be positive, got {self.in_channels}")
        if (
            self.enable_attention
            and self.token_dim >= 1
            and 1 <= self.retained_stages <= len(self.stage_widths)
            and self.stage_widths[self.retained_stages - 1] % self.token_dim
        ):
            errs.append(
                f"token_dim {self.token_dim} does not divide backbone width "
                f"{self.stage_widths[self.retained_stages - 1]}"
            )
        return errs

    def validate(self) -> None:
        errs = self.problems()
        if errs:
            raise ConfigError("invalid model config:\n  " + "\n  ".join(errs))


PROFILES: dict[str, dict] = {
    "base": dict(stage_widths=(128, 256, 512, 1024), stage_depths=(3, 3, 27, 3), token_dim=16, d_q=16),
    "tiny": dict(stage_widths=(16, 32), stage_depths=(1, 1), token_dim=8, d_q=8),
}
PROFILE_IMAGE_SIZE = {"base": 224, "tiny": 64}


def profile_config(name: str, **overrides) -> ConvCutConfig:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return ConvCutConfig(**{**PROFILES[name], **overrides})


class Stage(Module):
    def __init__(self, cin: int, cout: int, depth: int, rng: np.random.Generator,
                 layer_scale_init: float, downsample: bool):
        self.downsample = Downsample(cin, cout, rng) if downsample else None
        self.blocks = [ConvNeXtBlock(cout, rng, layer_scale_init) for _ in range(depth)]

    def __call__(self, x: Tensor) -> Tensor:
        if self.downsample is not None:
            x = self.downsample(x)
        for block in self.blocks:
            x = block(x)
        return x


class ConvCutModel(Module):
    """Stem, retained ConvNeXt stages, feature extractor and classifier head.

    The feature extractor is the Detail Extraction block when enabled;
    otherwise the backbone output is spatially averaged, and (if attention is
    on) passed through a self-attention head over channel groups.
    """

    def __init__(self, cfg: ConvCutConfig, rng: np.random.Generator):
        cfg.validate()
        self.config = cfg
        widths = cfg.stage_widths[: cfg.retained_stages]
        depths = cfg.stage_depths[: cfg.retained_stages]
        self.stem = Stem(cfg.in_channels, widths[0], rng)
        self.stages = [
            Stage(widths[max(i - 1, 0)], widths[i], depths[i], rng, cfg.layer_scale_init, downsample=i > 0)
            for i in range(cfg.retained_stages)
        ]
        width = widths[-1]
        if cfg.enable_detail_extraction:
            self.det = DetailExtractionBlock(
                width, rng, conv_layers=cfg.det_conv_layers, dropout_p=cfg.dropout_p,
                token_dim=cfg.token_dim, d_q=cfg.d_q, enable_attention=cfg.enable_attention,
            )
            self.attention = None
            features = self.det.out_features
        else:
            self.det = None
            self.attention = SelfAttentionHead(cfg.token_dim, cfg.d_q, rng) if cfg.enable_attention else None
            features = width // cfg.token_dim * cfg.d_q if cfg.enable_attention else width
        self.head = Linear(features, cfg.num_classes, rng)
        self.frozen: set[str] = set()
        self.set_backbone_frozen(cfg.freeze_backbone)

    # -- parameters -------------------------------------------------------

    def state(self) -> dict[str, Parameter]:
        return dict(self.named_parameters())

    def backbone_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if n.startswith(BACKBONE_PREFIXES)]

    def set_backbone_frozen(self, frozen: bool) -> None:
        params = self.state()
        names = self.backbone_names()
        for n in names:
            params[n].requires_grad = not frozen
        self.frozen = set(names) if frozen else set()

    def trainable_parameters(self) -> dict[str, Parameter]:
        return {n: p for n, p in self.named_parameters() if n not in self.frozen}

    # -- forward ----------------------------------------------------------

    def backbone_steps(self) -> list[tuple[str, Callable[[Tensor], Tensor]]]:
        steps = [("stem", self.stem)]
        steps += [(f"stages.{i}", stage) for i, stage in enumerate(self.stages)]
        return steps

    def default_cam_layer(self) -> str:
        return f"stages.{len(self.stages) - 1}"

    def features(self, x: Tensor, training: bool = False, rng: np.random.Generator | None = None,
                 trace: list | None = None) -> Tensor:
        """Map the backbone output to the flat vector the head consumes."""
        if self.det is not None:
            return self.det(x, training, rng, trace)
        pooled = ops.spatial_mean(x)
        if trace is not None:
            trace.append(("pool", pooled.shape))
        if self.attention is None:
            return pooled
        return attend_pooled(self.attention, pooled, self.config.token_dim, trace, "attention")

    def forward(self, x: Tensor, training: bool = False, rng: np.random.Generator | None = None,
                trace: list | None = None, start: str | None = None) -> Tensor:
        """Logits for a B x H x W x C batch.

        ``trace`` collects (layer name, output shape) pairs. ``start`` resumes
        from the output of a named backbone layer, taking ``x`` as that output.
        """
        steps = self.backbone_steps()
        if start is not None:
            names = [n for n, _ in steps]
            if start not in names:
                raise LayerLookupError(f"unknown layer {start!r}; available: {names}")
            steps = steps[names.index(start) + 1 :]
        if trace is not None:
            trace.append(("input" if start is None else start, x.shape))
        for name, step in steps:
            try:
                x = step(x)
            except DimensionError as exc:
                raise DimensionError(f"{name}: {exc}") from exc
            if trace is not None:
                trace.append((name, x.shape))
        f = self.features(x, training, rng, trace)
        logits = self.head(f)
        if trace is not None:
            trace.append(("logits", logits.shape))
        return logits

    __call__ = forward

    def activation(self, x: Tensor, layer: str) -> Tensor:
        """Output of a named backbone layer (no gradient recording)."""
        names = [n for n, _ in self.backbone_steps()]
        if layer not in names:
            raise LayerLookupError(f"unknown layer {layer!r}; available: {names}")
        with no_grad():
            for name, step in self.backbone_steps():
                x = step(x)
                if name == layer:
                    return x
        raise AssertionError("unreachable")


def build_model(cfg: ConvCutConfig, rng: np.random.Generator) -> ConvCutModel:
    return ConvCutModel(dataclasses.replace(cfg), rng)


def grad_cam(model: ConvCutModel, x: Tensor, class_idx: int, target_layer: str | None = None) -> np.ndarray:
    """Gradient-weighted class activation map for a single image.

    Channel weights are the spatial means of d logit[class_idx] / dA over the
    target activation A; the weighted channel sum is rectified and divided by
    its maximum (an all-zero map stays zero). Returns an h x w array in [0, 1].
    """
    if x.ndim != 4 or x.shape[0] != 1:
        raise DimensionError(f"grad_cam takes a single 1 x H x W x C image, got {x.shape}")
    if not 0 <= class_idx < model.config.num_classes:
        raise ConfigError(f"class index {class_idx} outside [0, {model.config.num_classes})")
    layer = target_layer or model.default_cam_layer()
    act = model.activation(x, layer)
    a = Tensor(act.data, requires_grad=True)
    onehot = np.zeros((1, model.config.num_classes), dtype=np.float32)
    onehot[0, class_idx] = 1.0
    with GradTape() as tape:
        logits = model.forward(a, training=False, start=layer)
        score = ops.sum(ops.mul(logits, Tensor(onehot)))
    g = backward(score, tape).get(a)
    if g is None:
        g = np.zeros_like(a.data)
    alpha = g[0].mean(axis=(0, 1))
    cam = np.maximum((a.data[0] * alpha).sum(axis=-1), 0.0)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return cam.astype(np.float32)
