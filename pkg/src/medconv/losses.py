"""Cross-entropy and inverse-frequency balanced cross-entropy."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, log_sigmoid, log_softmax, mean, mul, neg, pick, tsum

SOFTMAX = "softmax"
BINARY_PER_CLASS = "binary-per-class"


@dataclass(frozen=True)
class ClassWeights:
    weights: np.ndarray
    counts: tuple

    def __len__(self) -> int:
        return len(self.weights)

    def sample_mean(self) -> float:
        """Average weight over the training samples the counts describe; 1 for inverse frequency."""
        n = np.asarray(self.counts, dtype=np.float64)
        return float((n * self.weights).sum() / n.sum())


@dataclass
class LossValue:
    """A scalar loss plus the per-sample terms it averages."""

    tensor: Tensor
    per_sample: np.ndarray

    @property
    def value(self) -> float:
        return self.tensor.item()

    def backward(self):
        return self.tensor.backward()


def inverse_freq_weights(counts: Sequence[int]) -> ClassWeights:
    """w_c = N / (C * n_c); equal counts give all ones and the per-sample mean is 1."""
    counts = tuple(int(c) for c in counts)
    if not counts:
        raise ValueError("need at least one class count")
    for c, n in enumerate(counts):
        if n <= 0:
            raise ValueError(f"class {c} has count {n}; inverse-frequency weight is undefined")
    arr = np.asarray(counts, dtype=np.float64)
    return ClassWeights(arr.sum() / (len(arr) * arr), counts)


def _check_labels(logits: Tensor, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"logits {logits.shape} and labels {labels.shape} disagree")
    c = logits.shape[1]
    bad = (labels < 0) | (labels >= c)
    if bad.any():
        raise ValueError(f"label {int(labels[bad][0])} out of range for {c} classes")
    return labels


def cross_entropy(logits: Tensor, labels) -> LossValue:
    labels = _check_labels(logits, labels)
    per = neg(pick(log_softmax(logits), labels))
    return LossValue(mean(per), per.data.copy())


def balanced_cross_entropy(
    logits: Tensor,
    labels,
    weights: ClassWeights,
    variant: str = SOFTMAX,
) -> LossValue:
    """Mean over samples of ``w[label] * loss_i``.

    With ``variant="softmax"`` the per-sample loss is the softmax cross
    entropy. ``"binary-per-class"`` applies an independent sigmoid to every
    logit and sums the binary cross entropies against the one-hot target.
    """
    labels = _check_labels(logits, labels)
    w = np.asarray(weights.weights, dtype=np.float64)
    if w.shape != (logits.shape[1],) or np.any(w <= 0):
        raise ValueError(f"need {logits.shape[1]} positive class weights, got {w}")
    sample_w = w[labels].astype(logits.dtype)
    if variant == SOFTMAX:
        per = mul(pick(log_softmax(logits), labels), -sample_w)
    elif variant == BINARY_PER_CLASS:
        onehot = np.eye(logits.shape[1], dtype=logits.dtype)[labels]
        sign = (2 * onehot - 1).astype(logits.dtype)
        # y log s(z) + (1 - y) log(1 - s(z)) == log s(sign * z)
        per_class = log_sigmoid(mul(logits, sign))
        per = mul(tsum(per_class, axis=1), -sample_w)
    else:
        raise ValueError(f"unknown loss variant {variant!r}")
    return LossValue(mean(per), per.data.copy())


def make_loss(name: str, counts: Optional[Sequence[int]] = None, variant: str = SOFTMAX):
    """Return ``fn(logits, labels) -> LossValue`` for ``ce`` or ``balce``."""
    if name == "ce":
        if variant == SOFTMAX:
            return cross_entropy
        ones = ClassWeights(np.ones(len(counts)), tuple(counts))
        return lambda logits, labels: balanced_cross_entropy(logits, labels, ones, variant)
    if name == "balce":
        if counts is None:
            raise ValueError("balce needs training class counts")
        weights = inverse_freq_weights(counts)
        return lambda logits, labels: balanced_cross_entropy(logits, labels, weights, variant)
    raise ValueError(f"unknown loss {name!r}; expected 'ce' or 'balce'")
