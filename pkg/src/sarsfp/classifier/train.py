"""Seeded mini-batch gradient descent on cross-entropy."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, TrainingDivergedError
from .model import ClassifierModel, build_model, loss_and_grads, predict_batch

log = logging.getLogger(__name__)


@dataclass
class LabeledDataset:
    images: np.ndarray            # (N, H, W) normalized
    labels: np.ndarray            # (N,)
    is_train: np.ndarray          # (N,) bool
    class_names: list[str]
    meta: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.is_train = np.asarray(self.is_train, dtype=bool)
        n = len(self.images)
        if len(self.labels) != n or len(self.is_train) != n:
            raise ConfigError("images, labels and split must have the same length")
        if n and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ConfigError("labels out of range for the class list")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def train_split(self):
        return self.images[self.is_train], self.labels[self.is_train]

    def test_split(self):
        return self.images[~self.is_train], self.labels[~self.is_train]


@dataclass
class TrainReport:
    train_accuracy: float
    test_accuracy: float
    loss_history: list[float]


def accuracy(model: ClassifierModel, images, labels, batch: int = 64) -> float:
    if len(labels) == 0:
        return float("nan")
    preds = np.concatenate([predict_batch(model, images[i:i + batch]) for i in range(0, len(labels), batch)])
    return float(np.mean(preds == labels))


def train(dataset: LabeledDataset, architecture_id: str, seed: int = 0, epochs: int = 20,
          lr: float = 0.05, batch_size: int = 16, **options) -> tuple[ClassifierModel, TrainReport]:
    counts = np.bincount(dataset.labels[dataset.is_train], minlength=dataset.n_classes)
    if dataset.n_classes < 2 or np.count_nonzero(counts >= 2) < 2:
        raise ConfigError("training needs at least 2 classes with at least 2 training samples each")
    rng = np.random.default_rng(seed)
    init_seed = int(rng.integers(2**63))
    model = build_model(architecture_id, dataset.n_classes, dataset.images.shape[1:], init_seed, **options)
    x, y = dataset.train_split()
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(y))
        total = 0.0
        for s in range(0, len(y), batch_size):
            idx = order[s:s + batch_size]
            loss, grads = loss_and_grads(model, x[idx], y[idx])
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss became {loss} at epoch {epoch + 1}; try a lower learning rate than {lr}")
            for p, g in zip(model.params, grads):
                p -= lr * g
            total += loss * len(idx)
        history.append(total / len(y))
        log.info("train %s epoch %d loss %.5f", architecture_id, epoch + 1, history[-1])
    xt, yt = dataset.test_split()
    report = TrainReport(accuracy(model, x, y), accuracy(model, xt, yt), history)
    return model, report
