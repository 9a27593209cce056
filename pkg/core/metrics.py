"""Loss and classification metrics."""

from typing import Sequence

import numpy as np
from sklearn.metrics import accuracy_score, f1_score
from sklearn.metrics import confusion_matrix as sk_confusion_matrix

from core.errors import DimensionError, ParameterError
from core.tensor import Tensor, custom_op


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]; 1-D logits are one sample."""
    value = logits.value if logits.ndim == 2 else logits.value[None, :]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    batch, classes = value.shape
    if labels.shape != (batch,):
        raise DimensionError("cross_entropy", logits.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ParameterError(f"labels must lie in [0, {classes}), got {labels.min()}..{labels.max()}")

    log_probs = _log_softmax(value)
    rows = np.arange(batch)
    loss = -log_probs[rows, labels].mean()

    def backward_fn(g):
        d = np.exp(log_probs)
        d[rows, labels] -= 1.0
        return (g * d / batch).reshape(logits.value.shape),

    return custom_op(np.asarray(loss), (logits,), backward_fn, "cross_entropy")


def predictions(logits: Tensor) -> np.ndarray:
    return np.argmax(logits.value, axis=-1)


def accuracy(preds: Sequence[int], labels: Sequence[int]) -> float:
    preds, labels = _pair(preds, labels)
    return float(accuracy_score(labels, preds)) if labels.size else 0.0


def confusion_matrix(preds: Sequence[int], labels: Sequence[int], num_classes: int) -> np.ndarray:
    """Rows are true labels, columns predictions."""
    preds, labels = _pair(preds, labels)
    if not labels.size:
        return np.zeros((num_classes, num_classes), dtype=np.int64)
    return sk_confusion_matrix(labels, preds, labels=np.arange(num_classes)).astype(np.int64)


def macro_f1(preds: Sequence[int], labels: Sequence[int], num_classes: int) -> float:
    """Unweighted mean of per-class F1.  A class never predicted nor present scores 0."""
    preds, labels = _pair(preds, labels)
    if not labels.size:
        return 0.0
    return float(f1_score(labels, preds, labels=np.arange(num_classes), average="macro",
                          zero_division=0))


def spike_ratio(series: Sequence[float]) -> float:
    """max / median of a gradient-norm series."""
    values = np.asarray(series, dtype=np.float64)
    if values.size == 0:
        raise ParameterError("spike_ratio needs a non-empty series")
    median = float(np.median(values))
    return float(values.max() / median) if median > 0 else float("inf")


def _pair(preds: Sequence[int], labels: Sequence[int]):
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if preds.shape != labels.shape:
        raise DimensionError("metrics", preds.shape, labels.shape)
    return preds, labels
