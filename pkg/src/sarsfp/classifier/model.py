"""Stand-in image classifiers of increasing capacity and the loss."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, ValidationError
from .layers import AvgPool, Conv2D, Dense, Flatten, Layer, MaxPool2, ReLU

ARCHITECTURES = ("linear", "mlp", "cnn-small", "cnn-large")
PROB_FLOOR = 1e-12

DEFAULT_OPTIONS = {
    "linear": {"pool": 4},
    "mlp": {"pool": 4, "hidden": 64},
    "cnn-small": {"pool": 2, "widths": [8, 16]},
    "cnn-large": {"pool": 2, "widths": [8, 8, 16, 16]},
}


@dataclass
class ClassifierModel:
    architecture_id: str
    n_classes: int
    input_shape: tuple[int, int]
    layers: list[Layer]
    options: dict = field(default_factory=dict)

    @property
    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def logits(self, x: np.ndarray) -> np.ndarray:
        """x: (N, H, W) normalized images -> (N, n_classes) logits."""
        out = np.asarray(x, dtype=np.float64)[..., None]
        for layer in self.layers:
            out, _ = layer.forward(out)
        return out

    def forward_train(self, x: np.ndarray):
        caches = []
        out = np.asarray(x, dtype=np.float64)[..., None]
        for layer in self.layers:
            out, cache = layer.forward(out)
            caches.append(cache)
        return out, caches

    def backward(self, caches, dlogits) -> list[np.ndarray]:
        grads: list[list[np.ndarray]] = []
        d = dlogits
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            d, g = layer.backward(cache, d)
            grads.append(g)
        return [g for layer_grads in reversed(grads) for g in layer_grads]


def _layer_plan(arch: str, opts: dict) -> list:
    pool = int(opts.get("pool", 1))
    plan: list = [("avgpool", pool)] if pool > 1 else []
    if arch == "linear":
        plan += [("flatten",), ("dense_out",)]
    elif arch == "mlp":
        plan += [("flatten",), ("dense", int(opts["hidden"])), ("relu",), ("dense_out",)]
    elif arch == "cnn-small":
        w1, w2 = opts["widths"]
        plan += [("conv", w1), ("relu",), ("maxpool",), ("conv", w2), ("relu",), ("maxpool",),
                 ("flatten",), ("dense_out",)]
    elif arch == "cnn-large":
        w1, w2, w3, w4 = opts["widths"]
        plan += [("conv", w1), ("relu",), ("conv", w2), ("relu",), ("maxpool",),
                 ("conv", w3), ("relu",), ("conv", w4), ("relu",), ("maxpool",),
                 ("flatten",), ("dense_out",)]
    else:
        raise ConfigError(f"unknown architecture {arch!r}; valid ids: {', '.join(ARCHITECTURES)}")
    return plan


def assemble(arch: str, n_classes: int, input_shape, options: dict, tensors=None, rng=None) -> ClassifierModel:
    """Instantiate layers either from stored ``tensors`` or from a seeded
    fan-in-scaled uniform initialisation (``rng``)."""
    plan = _layer_plan(arch, options)
    shape = (int(input_shape[0]), int(input_shape[1]), 1)
    tensors = list(tensors) if tensors is not None else None
    layers: list[Layer] = []

    def take(*shapes, fan_in, gain):
        if tensors is not None:
            out = [tensors.pop(0) for _ in shapes]
            for t, s in zip(out, shapes):
                if t.shape != s:
                    raise ValidationError(f"weight shape {t.shape} does not match layer shape {s}")
            return out
        lim = gain * math.sqrt(3.0 / fan_in)
        return [rng.uniform(-lim, lim, size=shapes[0]), np.zeros(shapes[1])]

    for step in plan:
        kind = step[0]
        if kind == "avgpool":
            if shape[0] % step[1] or shape[1] % step[1]:
                raise ConfigError(f"input {shape[:2]} not divisible by pool factor {step[1]}")
            layer = AvgPool(step[1])
        elif kind == "conv":
            c, f = shape[2], step[1]
            layer = Conv2D(*take((c, 3, 3, f), (f,), fan_in=9 * c, gain=math.sqrt(2)))
        elif kind == "relu":
            layer = ReLU()
        elif kind == "maxpool":
            if shape[0] % 2 or shape[1] % 2:
                raise ConfigError(f"feature map {shape[:2]} not divisible by 2 for max pooling")
            layer = MaxPool2()
        elif kind == "flatten":
            layer = Flatten()
        elif kind == "dense":
            layer = Dense(*take((shape[0], step[1]), (step[1],), fan_in=shape[0], gain=math.sqrt(2)))
        else:  # dense_out
            layer = Dense(*take((shape[0], n_classes), (n_classes,), fan_in=shape[0], gain=1.0))
        shape = layer.output_shape(shape)
        layers.append(layer)
    if tensors:
        raise ValidationError(f"{len(tensors)} unused weight tensors for architecture {arch!r}")
    return ClassifierModel(arch, int(n_classes), (int(input_shape[0]), int(input_shape[1])), layers, dict(options))


def build_model(arch: str, n_classes: int, input_shape=(128, 128), seed: int = 0, **options) -> ClassifierModel:
    if arch not in ARCHITECTURES:
        raise ConfigError(f"unknown architecture {arch!r}; valid ids: {', '.join(ARCHITECTURES)}")
    if n_classes < 2:
        raise ConfigError("a classifier needs at least 2 classes")
    opts = {**DEFAULT_OPTIONS[arch], **options}
    return assemble(arch, n_classes, input_shape, opts, rng=np.random.default_rng(seed))


def zero_model(arch: str, n_classes: int, input_shape=(128, 128), **options) -> ClassifierModel:
    model = build_model(arch, n_classes, input_shape, 0, **options)
    for p in model.params:
        p[...] = 0.0
    return model


# --------------------------------------------------------------------------
# inference

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(model: ClassifierModel, images) -> np.ndarray:
    x = np.asarray(getattr(images, "pixels", images), dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1:] != tuple(model.input_shape):
        raise ValidationError(f"image shape {x.shape[1:]} does not match model input {tuple(model.input_shape)}")
    return x


def forward_batch(model: ClassifierModel, images) -> np.ndarray:
    return softmax(model.logits(_as_batch(model, images)))


def forward(model: ClassifierModel, image) -> np.ndarray:
    """Class probabilities for one normalized image (SarImage or array)."""
    if hasattr(image, "normalized") and not image.normalized:
        raise ValidationError("classifier input must be a normalized image")
    return forward_batch(model, image)[0]


def predict_batch(model: ClassifierModel, images) -> np.ndarray:
    # argmax returns the first maximum: ties go to the lowest class index
    return np.argmax(forward_batch(model, images), axis=-1)


def predict(model: ClassifierModel, image) -> int:
    return int(np.argmax(forward(model, image)))


def cross_entropy(probs, label) -> float:
    """``-ln(max(p[label], 1e-12))``."""
    return float(-math.log(max(float(np.asarray(probs)[label]), PROB_FLOOR)))


def batch_cross_entropy(probs: np.ndarray, labels) -> np.ndarray:
    labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (probs.shape[0],))
    return -np.log(np.maximum(probs[np.arange(len(labels)), labels], PROB_FLOOR))


def loss_and_grads(model: ClassifierModel, x: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy of a batch and its parameter gradients."""
    logits, caches = model.forward_train(x)
    probs = softmax(logits)
    n = len(labels)
    loss = float(np.mean(batch_cross_entropy(probs, labels)))
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, model.backward(caches, dlogits)
