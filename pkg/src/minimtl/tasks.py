"""Per-task losses and evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import Tensor

LOSS_KINDS = ("mse", "cross_entropy", "l1")
METRIC_KINDS = ("mse", "mae", "accuracy")


@dataclass(frozen=True)
class TaskSpec:
    name: str
    loss_kind: str = "mse"
    metric_kind: str = "mse"
    output_dim: int = 1
    higher_is_better: bool = False

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"{self.name}: unknown loss {self.loss_kind!r}; valid: {LOSS_KINDS}")
        if self.metric_kind not in METRIC_KINDS:
            raise ValueError(f"{self.name}: unknown metric {self.metric_kind!r}; valid: {METRIC_KINDS}")
        if self.output_dim < 1:
            raise ValueError(f"{self.name}: output_dim must be positive")
        if self.loss_kind == "cross_entropy" and self.output_dim < 2:
            raise ValueError(f"{self.name}: cross_entropy needs output_dim >= 2")
        if self.metric_kind == "accuracy" and self.loss_kind != "cross_entropy":
            raise ValueError(f"{self.name}: accuracy is only defined for cross_entropy tasks")

    @property
    def is_classification(self) -> bool:
        return self.loss_kind == "cross_entropy"


def regression(name: str, output_dim: int = 1) -> TaskSpec:
    return TaskSpec(name, "mse", "mse", output_dim)


def classification(name: str, num_classes: int) -> TaskSpec:
    return TaskSpec(name, "cross_entropy", "accuracy", num_classes, higher_is_better=True)


def _class_indices(spec: TaskSpec, predictions, targets) -> np.ndarray:
    idx = np.asarray(targets).reshape(-1)
    if idx.size != predictions.shape[0]:
        raise ValueError(f"{spec.name}: {predictions.shape[0]} predictions but {idx.size} targets")
    if not np.all(idx == np.round(idx)):
        raise ValueError(f"{spec.name}: class targets must be integers")
    idx = idx.astype(int)
    if idx.min(initial=0) < 0 or idx.max(initial=0) >= spec.output_dim:
        raise ValueError(f"{spec.name}: class index out of range [0, {spec.output_dim})")
    return idx


def _matched(spec: TaskSpec, predictions, targets) -> np.ndarray:
    y = np.asarray(targets, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape != tuple(predictions.shape):
        raise ValueError(f"{spec.name}: prediction shape {predictions.shape} != target shape {y.shape}")
    return y


def compute_loss(spec: TaskSpec, predictions: Tensor, targets) -> Tensor:
    if predictions.ndim != 2 or predictions.shape[1] != spec.output_dim:
        raise ValueError(f"{spec.name}: predictions must be (batch, {spec.output_dim}), got {predictions.shape}")
    if spec.loss_kind == "cross_entropy":
        idx = _class_indices(spec, predictions, targets)
        onehot = np.zeros(predictions.shape)
        onehot[np.arange(idx.size), idx] = 1.0
        picked = (tn.log_softmax_rows(predictions) * Tensor(onehot)).sum()
        return picked * (-1.0 / idx.size)
    diff = predictions - Tensor(_matched(spec, predictions, targets))
    if spec.loss_kind == "mse":
        return (diff * diff).mean()
    return diff.abs().mean()


def compute_metric(spec: TaskSpec, predictions, targets) -> float:
    pred = predictions.data if isinstance(predictions, Tensor) else np.asarray(predictions, dtype=np.float64)
    if spec.metric_kind == "accuracy":
        idx = _class_indices(spec, pred, targets)
        # argmax keeps the first maximum, so ties go to the lowest index
        return float(np.mean(np.argmax(pred, axis=1) == idx))
    y = _matched(spec, pred, targets)
    if spec.metric_kind == "mse":
        return float(np.mean((pred - y) ** 2))
    return float(np.mean(np.abs(pred - y)))
