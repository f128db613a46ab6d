"""Desk-scale training with a frozen backbone.

The :class:`ParamStore` is the single writer of parameter values during
training: it decides which parameters are trainable, owns their gradients and
hands them to the optimizer. Backbone tensors stay frozen in ``petl`` and
``head`` modes, and their gradients are never allocated.
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections.abc import Iterator
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .nn import Backbone, Param

log = logging.getLogger(__name__)

MODES = ("petl", "head", "full")


def is_adapter_param(name: str) -> bool:
    return ".adapters." in name or ".adapter." in name


def is_head_param(name: str) -> bool:
    return name.startswith("head.")


class ParamStore:
    """Named view over a model's parameters with trainability flags."""

    def __init__(self, model: Backbone, mode: str = "petl"):
        if mode not in MODES:
            raise ValueError(f"unknown training mode {mode!r}; expected one of {MODES}")
        self.model = model
        self.mode = mode
        self.params: dict[str, Param] = dict(model.named_params())
        for name, p in self.params.items():
            if mode == "full":
                p.trainable = True
            elif mode == "petl":
                p.trainable = is_adapter_param(name) or is_head_param(name)
            else:
                p.trainable = is_head_param(name)
            p.grad = None

    def __iter__(self) -> Iterator[tuple[str, Param]]:
        return iter(self.params.items())

    def trainable(self) -> dict[str, Param]:
        return {n: p for n, p in self.params.items() if p.trainable}

    def frozen(self) -> dict[str, Param]:
        return {n: p for n, p in self.params.items() if not p.trainable}

    def n_trainable(self) -> int:
        return sum(p.value.size for p in self.trainable().values())

    def n_total(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {n: (p.grad if p.grad is not None else np.zeros_like(p.value))
                for n, p in self.trainable().items()}

    def frozen_checksum(self) -> str:
        return checksum({n: p.value for n, p in self.frozen().items()})


def checksum(tensors: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(np.ascontiguousarray(tensors[name]).tobytes())
    return h.hexdigest()


def backbone_checksum(model: Backbone) -> str:
    return checksum({n: p.value for n, p in model.named_params()
                     if not is_adapter_param(n) and not is_head_param(n)})


class Adam:
    """Adam without weight decay; updates parameter values in place."""

    def __init__(self, store: ParamStore, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for name, p in self.store.trainable().items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m.setdefault(name, np.zeros_like(p.value))
            v = self.v.setdefault(name, np.zeros_like(p.value))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.value -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.value.dtype)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to ``logits``."""
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = logits.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over rows of the squared error summed across columns."""
    diff = pred - target
    n = pred.shape[0]
    return float((diff * diff).sum() / n), 2.0 * diff / n


def backward(model: Backbone, dloss: np.ndarray) -> None:
    """Propagate ``dloss`` (gradient w.r.t. the last ``forward_train`` output) into trainable params."""
    model.backward(dloss)


def loss_and_grads(model: Backbone, store: ParamStore, x: np.ndarray, y: np.ndarray) -> float:
    store.zero_grad()
    logits = model.forward_train(x)
    loss, dlogits = softmax_cross_entropy(logits, y)
    backward(model, dlogits)
    return loss


@dataclass
class SyntheticTask:
    """Images whose class is set by a mixture of Gaussians living in a hidden 2-D plane.

    Cluster centres sit on a circle and alternate between classes, so with
    ``clusters_per_class > 1`` no linear map of the raw pixels separates the
    classes while a two-layer map does. The plane is embedded into pixel
    space by a fixed random rotation; the remaining directions carry noise.
    ``clusters_per_class = 1`` gives a linearly separable task.
    """

    n_classes: int = 2
    clusters_per_class: int = 2
    image_size: int = 8
    channels: int = 3
    radius: float = 3.0
    spread: float = 0.5
    noise: float = 0.3
    n_train: int = 512
    n_val: int = 256
    seed: int = 0

    def _basis(self) -> np.ndarray:
        dim = self.channels * self.image_size ** 2
        rng = np.random.default_rng(self.seed)
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        return q

    def _sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        n_clusters = self.n_classes * self.clusters_per_class
        cluster = rng.integers(0, n_clusters, size=n)
        labels = cluster % self.n_classes
        angle = 2 * np.pi * cluster / n_clusters
        centres = self.radius * np.stack([np.cos(angle), np.sin(angle)], axis=1)
        plane = centres + self.spread * rng.standard_normal((n, 2))
        dim = self.channels * self.image_size ** 2
        z = np.concatenate([plane, self.noise * rng.standard_normal((n, dim - 2))], axis=1)
        pixels = z @ self._basis().T
        return pixels.reshape(n, self.channels, self.image_size, self.image_size), labels

    def split(self, dtype=np.float64):
        rng = np.random.default_rng(self.seed + 1)
        xtr, ytr = self._sample(self.n_train, rng)
        xva, yva = self._sample(self.n_val, rng)
        return (xtr.astype(dtype), ytr), (xva.astype(dtype), yva)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    mode: str = "petl"
    max_steps: int | None = None


@dataclass
class EpochRecord:
    epoch: int
    step: int
    loss: float
    train_acc: float
    val_acc: float


def accuracy(model: Backbone, x: np.ndarray, y: np.ndarray, batch: int = 256) -> float:
    correct = 0
    for i in range(0, len(x), batch):
        correct += int((model.forward(x[i:i + batch]).argmax(axis=-1) == y[i:i + batch]).sum())
    return correct / max(len(x), 1)


def train_adapters(model: Backbone, task: SyntheticTask, cfg: TrainConfig,
                   metrics_path: str | Path | None = None) -> tuple[Backbone, list[EpochRecord]]:
    """Train the trainable subset of ``model`` in place; backbone tensors stay bit-identical."""
    store = ParamStore(model, cfg.mode)
    if store.n_trainable() == 0:
        raise ValueError("no trainable parameters under mode " + repr(cfg.mode))
    if cfg.mode == "petl" and not any(is_adapter_param(n) for n in store.trainable()):
        raise ValueError("no trainable adapter parameters: petl mode needs adapters attached")
    frozen_before = store.frozen_checksum()
    (xtr, ytr), (xva, yva) = task.split(model.dtype)
    opt = Adam(store, cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    records: list[EpochRecord] = []
    step = 0
    sink = open(metrics_path, "w") if metrics_path is not None else None
    try:
        with T.fast_path():
            for epoch in range(cfg.epochs):
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
                order = rng.permutation(len(xtr))
                losses = []
                for i in range(0, len(order), cfg.batch_size):
                    if cfg.max_steps is not None and step >= cfg.max_steps:
                        break
                    idx = order[i:i + cfg.batch_size]
                    losses.append(loss_and_grads(model, store, xtr[idx], ytr[idx]))
                    opt.step()
                    step += 1
                rec = EpochRecord(epoch, step, float(np.mean(losses)) if losses else float("nan"),
                                  accuracy(model, xtr, ytr), accuracy(model, xva, yva))
                records.append(rec)
                log.info("epoch %d loss %.4f train %.3f val %.3f", epoch, rec.loss, rec.train_acc, rec.val_acc)
                if sink is not None:
                    sink.write(json.dumps(asdict(rec)) + "\n")
    finally:
        if sink is not None:
            sink.close()
        store.zero_grad()
    if store.frozen_checksum() != frozen_before:
        raise RuntimeError("frozen parameters changed during training")
    return model, records
