"""Small from-scratch classifiers standing in for the attacked recognizer."""
from .io import load_model, loads_model, dumps_model, save_model
from .model import (ARCHITECTURES, ClassifierModel, batch_cross_entropy, build_model, cross_entropy,
                    forward, forward_batch, loss_and_grads, predict, predict_batch, softmax, zero_model)
from .train import LabeledDataset, TrainReport, accuracy, train

__all__ = [
    "load_model", "loads_model", "dumps_model", "save_model", "ARCHITECTURES", "ClassifierModel",
    "batch_cross_entropy", "build_model", "cross_entropy", "forward", "forward_batch", "loss_and_grads",
    "predict", "predict_batch", "softmax", "zero_model", "LabeledDataset", "TrainReport", "accuracy", "train",
]
