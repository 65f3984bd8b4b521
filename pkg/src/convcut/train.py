"""Adam training loop, sparse cross-entropy loss, flip augmentation and metrics."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import ops
from .data import LabeledDataset
from .errors import ConfigError, ConvCutError, DimensionError
from .model import ConvCutModel
from .tensor import GradTape, Parameter, Tensor, backward, no_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 50
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    hflip_prob: float = 0.5

    def validate(self) -> None:
        errs = []
        if self.batch_size < 1:
            errs.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            errs.append(f"epochs must be >= 0, got {self.epochs}")
        if self.learning_rate < 0:
            errs.append(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            errs.append(f"Adam betas must be in [0, 1), got {self.adam_beta1}, {self.adam_beta2}")
        if self.adam_eps <= 0:
            errs.append(f"adam_eps must be positive, got {self.adam_eps}")
        if not 0.0 <= self.hflip_prob <= 1.0:
            errs.append(f"hflip_prob must be in [0, 1], got {self.hflip_prob}")
        if errs:
            raise ConfigError("invalid training config:\n  " + "\n  ".join(errs))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


@dataclass
class Metrics:
    accuracy: float
    macro_f1: float
    confusion: np.ndarray  # rows: true class, columns: predicted class

    @property
    def per_class_f1(self) -> np.ndarray:
        return f1_scores(self.confusion)


@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float
    steps: int


def sparse_ce_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    return ops.sparse_softmax_cross_entropy(logits, np.asarray(labels, dtype=np.int64))


def adam_step(params: Mapping[str, Parameter], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place.

    Only entries of ``params`` are touched; parameters without a gradient in
    ``grads`` are left alone.
    """
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)
        p.data -= update


def random_hflip(x: Tensor, prob: float, rng: np.random.Generator) -> Tensor:
    """Mirror each batch element along the width axis with probability ``prob``."""
    if x.ndim != 4:
        raise DimensionError(f"random_hflip expects B x H x W x C, got {x.shape}")
    flips = rng.random(x.shape[0]) < prob
    if not flips.any():
        return x
    out = x.data.copy()
    out[flips] = out[flips][:, :, ::-1, :]
    return Tensor(out)


def train_step(model: ConvCutModel, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
               state: AdamState, rng: np.random.Generator) -> tuple[float, int]:
    """Augment, forward, backward and update on one batch. Returns (loss, #correct)."""
    x = random_hflip(Tensor(images), cfg.hflip_prob, rng)
    params = model.trainable_parameters()
    with GradTape() as tape:
        logits = model.forward(x, training=True, rng=rng)
        loss = sparse_ce_loss(logits, labels)
    grads = backward(loss, tape)
    named = {n: grads[p] for n, p in params.items() if p in grads}
    adam_step(params, named, state, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    correct = int((predict_labels(logits.data) == labels).sum())
    return loss.item(), correct


def train_epoch(model: ConvCutModel, dataset: LabeledDataset, cfg: TrainConfig, state: AdamState,
                rng: np.random.Generator, epoch: int = 0, max_steps: int | None = None) -> EpochStats:
    """One pass over a seeded shuffle of ``dataset`` (the last partial batch is kept)."""
    n = len(dataset)
    if n == 0:
        raise ConvCutError("cannot train on an empty dataset")
    order = rng.permutation(n)
    total_loss = 0.0
    correct = 0
    seen = 0
    steps = 0
    for bi, start in enumerate(range(0, n, cfg.batch_size)):
        if max_steps is not None and steps >= max_steps:
            break
        idx = order[start : start + cfg.batch_size]
        try:
            loss, hits = train_step(model, dataset.images[idx], dataset.labels[idx], cfg, state, rng)
        except ConvCutError as exc:
            raise type(exc)(f"epoch {epoch}, batch {bi}: {exc}") from exc
        total_loss += loss * len(idx)
        correct += hits
        seen += len(idx)
        steps += 1
    return EpochStats(epoch, total_loss / max(seen, 1), correct / max(seen, 1), steps)


def fit(model: ConvCutModel, dataset: LabeledDataset, cfg: TrainConfig, rng: np.random.Generator,
        metrics_path: str | os.PathLike | None = None, max_steps: int | None = None,
        on_epoch=None) -> list[EpochStats]:
    """Run ``cfg.epochs`` epochs (or stop after ``max_steps`` optimizer steps).

    Each epoch appends ``epoch,loss,train_acc`` to ``metrics_path`` when given.
    """
    cfg.validate()
    state = AdamState()
    history = []
    if metrics_path is not None and not os.path.exists(metrics_path):
        with open(metrics_path, "w") as fh:
            fh.write("epoch,loss,train_acc\n")
    for epoch in range(1, cfg.epochs + 1):
        remaining = None if max_steps is None else max_steps - state.t
        if remaining is not None and remaining <= 0:
            break
        stats = train_epoch(model, dataset, cfg, state, rng, epoch, remaining)
        history.append(stats)
        log.info("epoch %d loss %.6f acc %.4f", epoch, stats.loss, stats.accuracy)
        if metrics_path is not None:
            with open(metrics_path, "a") as fh:
                fh.write(f"{epoch},{stats.loss:.8f},{stats.accuracy:.6f}\n")
        if on_epoch is not None:
            on_epoch(stats)
    return history


def predict_labels(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, so ties go to the lowest class index.
    return np.argmax(logits, axis=1)


def predict(model: ConvCutModel, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            logits = model.forward(Tensor(images[start : start + batch_size]), training=False)
            out.append(predict_labels(logits.data))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def confusion_matrix(labels: np.ndarray, preds: np.ndarray, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(preds)), 1)
    return cm


def f1_scores(cm: np.ndarray) -> np.ndarray:
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1)  # = 2TP + FP + FN
    support = cm.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        f1 = np.where(denom > 0, 2.0 * tp / denom, 0.0)
    return np.where(support > 0, f1, 0.0)


def metrics_from_predictions(labels, preds, num_classes: int) -> Metrics:
    cm = confusion_matrix(labels, preds, num_classes)
    total = cm.sum()
    accuracy = float(np.trace(cm) / total) if total else 0.0
    return Metrics(accuracy, float(f1_scores(cm).mean()), cm)


def evaluate(model: ConvCutModel, dataset: LabeledDataset, batch_size: int = 64) -> Metrics:
    if len(dataset) == 0:
        raise ConvCutError("cannot evaluate on an empty dataset")
    preds = predict(model, dataset.images, batch_size)
    return metrics_from_predictions(dataset.labels, preds, model.config.num_classes)
