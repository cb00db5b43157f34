"""Seeded synthetic image classification data and a small training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .io import load_tensors, save_tensors
from .vit import ModelConfig, ToyViT, forward, init_weights


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    classes: int = 10
    train: int = 2048
    eval: int = 512
    height: int = 32
    width: int = 32
    channels: int = 3
    noise: float = 0.6
    blob_radius: float = 3.0
    jitter: float = 1.5

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx])

    def save(self, stem, meta: dict | None = None) -> Path:
        return save_tensors(stem, {"images": self.images, "labels": self.labels}, meta)

    @classmethod
    def load(cls, stem) -> "Dataset":
        tensors, _ = load_tensors(stem)
        return cls(tensors["images"], tensors["labels"])


def class_prototypes(cfg: SynthConfig, rng: np.random.Generator):
    """Blob center and channel color per class."""
    margin = cfg.blob_radius + cfg.jitter
    centers = np.column_stack([rng.uniform(margin, cfg.height - margin, cfg.classes),
                               rng.uniform(margin, cfg.width - margin, cfg.classes)])
    colors = rng.normal(size=(cfg.classes, cfg.channels))
    colors /= np.linalg.norm(colors, axis=1, keepdims=True)
    return centers, colors * 2.0


def render(cfg: SynthConfig, labels: np.ndarray, centers, colors,
           rng: np.random.Generator) -> np.ndarray:
    n = len(labels)
    yy, xx = np.meshgrid(np.arange(cfg.height), np.arange(cfg.width), indexing="ij")
    c = centers[labels] + rng.normal(scale=cfg.jitter, size=(n, 2))
    d2 = (yy[None] - c[:, 0, None, None]) ** 2 + (xx[None] - c[:, 1, None, None]) ** 2
    blob = np.exp(-d2 / (2.0 * cfg.blob_radius ** 2))
    img = blob[..., None] * colors[labels][:, None, None, :]
    img += rng.normal(scale=cfg.noise, size=img.shape)
    return img.astype(np.float32)


def make_synthetic(cfg: SynthConfig) -> tuple[Dataset, Dataset]:
    """Train and held-out eval splits drawn from the same class prototypes."""
    rng = np.random.default_rng(cfg.seed)
    centers, colors = class_prototypes(cfg, rng)
    out = []
    for n in (cfg.train, cfg.eval):
        labels = rng.integers(0, cfg.classes, size=n)
        out.append(Dataset(render(cfg, labels, centers, colors, rng), labels.astype(np.int64)))
    return out[0], out[1]


def sample_without_replacement(n: int, size: int, seed: int) -> np.ndarray:
    if size > n:
        raise ValueError(f"cannot draw {size} distinct samples from {n}")
    return np.sort(np.random.default_rng(seed).choice(n, size=size, replace=False))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    batch_size: int = 64
    lr: float = 3e-3
    seed: int = 0
    dtype: str = "single"

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            upd = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            params[k] = params[k] - upd.astype(params[k].dtype)


def train_model(config: ModelConfig, data: Dataset, train: TrainConfig = TrainConfig(),
                log=None) -> ToyViT:
    """Minibatch cross-entropy training with Adam; returns a float64 model."""
    dtype = T.DTYPES[train.dtype]
    model = init_weights(config, dtype)
    params = dict(model.weights)
    opt = Adam(params, train.lr)
    rng = np.random.default_rng(train.seed)
    steps = math.ceil(len(data) / train.batch_size)
    for epoch in range(train.epochs):
        order = rng.permutation(len(data))
        total = 0.0
        for s in range(steps):
            idx = order[s * train.batch_size:(s + 1) * train.batch_size]
            current = model.with_weights(params)
            with T.Tape() as tape:
                res = forward(current, data.images[idx], track=True)
                loss = T.cross_entropy(res.logits, data.labels[idx])
            grads = tape.backward(loss)
            opt.step(params, {k: grads[res.params[k]] for k in params})
            total += float(loss.data)
        if log is not None:
            log(f"epoch {epoch + 1}/{train.epochs} loss {total / steps:.4f}")
        model = model.with_weights(params)
    return model.astype(np.float64)


def accuracy(logits, labels) -> float:
    return float(np.mean(np.argmax(logits, axis=-1) == np.asarray(labels)))
