"""Toy classifier training with staged retrieval pruning."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .attention import AttentionMode, LayerStack, backward, forward
from .divergence import DEFAULT_EPSILON
from .exceptions import ConfigError, NumericalError
from .pruning import AttentionTrace, PruneMask, StageResult, StageSchedule, flop_estimate, run_stage

__all__ = ["make_dataset", "Readout", "TrainingReport", "train_toy", "LayerAttentionClassifier"]


def make_dataset(n_classes=3, n_samples=300, dim=8, noise=0.5, seed=0):
    """Gaussian blobs around random unit-norm class centres."""
    rng = np.random.default_rng(seed)
    centres = rng.normal(size=(n_classes, dim))
    centres /= np.linalg.norm(centres, axis=1, keepdims=True)
    y = np.arange(n_samples) % n_classes
    rng.shuffle(y)
    X = centres[y] + noise * rng.normal(size=(n_samples, dim))
    return X, y


@dataclass
class Readout:
    weight: np.ndarray
    bias: np.ndarray

    @classmethod
    def init(cls, n_classes, dim, rng):
        bound = 1.0 / math.sqrt(dim)
        return cls(rng.uniform(-bound, bound, size=(n_classes, dim)), np.zeros(n_classes))

    def logits(self, h):
        return h @ self.weight.T + self.bias


def _cross_entropy(logits, y):
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    n = y.size
    loss = -np.mean(np.log(p[np.arange(n), y] + 1e-300))
    grad = p
    grad[np.arange(n), y] -= 1.0
    return loss, grad / n


@dataclass
class TrainingReport:
    losses: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)
    audit: list[StageResult] = field(default_factory=list)
    final_mask: PruneMask | None = None
    flops_before: tuple[int, int] = (0, 0)
    flops_after: tuple[int, int] = (0, 0)
    trace: AttentionTrace | None = None

    def stage_masks(self) -> list[tuple[int, ...]]:
        return [r.mask.bits for r in self.audit]


def train_toy(stack: LayerStack, X, y, schedule: StageSchedule | None = None, *, epochs=20,
              lr=0.1, batch_size=32, seed=0, epsilon=DEFAULT_EPSILON, probe_size=128,
              readout: Readout | None = None) -> tuple[TrainingReport, Readout]:
    """Minibatch SGD on ``stack`` plus a linear readout.

    During each stage window the batch- and head-averaged attention of a
    fixed probe subset is recorded at the end of every epoch; when a window
    closes, the stage is run and its mask replaces the stack's mask.
    """
    schedule = schedule or StageSchedule()
    if len(schedule) and stack.mode is AttentionMode.MRLA_L:
        raise ConfigError("pruning schedules need softmax layer attention, not the linear recurrence")
    if len(schedule) and stack.mode is AttentionMode.MRLA_B:
        stack.mode = AttentionMode.ELA
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    rng = np.random.default_rng(seed)
    n_classes = int(y.max()) + 1
    readout = readout or Readout.init(n_classes, stack.feature_dim, rng)
    probe = X[:probe_size]
    windows = {e: st for st in schedule for e in st.epochs}
    closing = {st.epoch_window[1]: st for st in schedule}
    report = TrainingReport(trace=AttentionTrace())
    report.flops_before = flop_estimate(stack, PruneMask.ones(stack.layer_count))

    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(X))
        total = 0.0
        for start in range(0, len(X), batch_size):
            idx = order[start:start + batch_size]
            t = forward(stack, X[idx])
            loss, dlogits = _cross_entropy(readout.logits(t.final), y[idx])
            if not math.isfinite(loss):
                raise NumericalError(f"loss became non-finite at epoch {epoch}, batch offset {start}")
            dfinal = dlogits @ readout.weight
            grads = backward(stack, t, dfinal)
            readout.weight -= lr * (dlogits.T @ t.final)
            readout.bias -= lr * dlogits.sum(axis=0)
            stack.sgd_step(grads, lr)
            total += loss * len(idx)
        report.losses.append(total / len(X))
        report.accuracies.append(float(np.mean(predict_labels(stack, readout, X) == y)))
        if epoch in windows:
            for dist in forward(stack, probe).distributions():
                report.trace.add(epoch, dist)
        if epoch in closing:
            result = run_stage(closing[epoch], report.trace, stack.mask, epsilon)
            stack.mask = result.mask
            report.audit.append(result)
    report.final_mask = stack.mask
    report.flops_after = flop_estimate(stack, stack.mask)
    return report, readout


def predict_labels(stack: LayerStack, readout: Readout, X) -> np.ndarray:
    return np.argmax(readout.logits(forward(stack, X).final), axis=1)


class LayerAttentionClassifier(ClassifierMixin, BaseEstimator):
    """Layer-attention network with staged retrieval pruning, as a classifier.

    Parameters
    ----------
    n_layers, n_heads : int
        Stack depth and head count; the feature dimension is taken from ``X``.
    mode : {"ela", "mrla_b", "mrla_l"}
    schedule : StageSchedule or None
        Pruning stages; ``None`` trains without pruning.
    tied_queries : dict or None
        ``{dst: src}`` query ties, 1-based.
    """

    def __init__(self, n_layers=4, n_heads=1, mode="ela", schedule=None, epochs=20, lr=0.1,
                 batch_size=32, seed=0, epsilon=DEFAULT_EPSILON, tied_queries=None, scale=None):
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.mode = mode
        self.schedule = schedule
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed
        self.epsilon = epsilon
        self.tied_queries = tied_queries
        self.scale = scale

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_ = unique_labels(y)
        y_idx = np.searchsorted(self.classes_, y)
        self.n_features_in_ = X.shape[1]
        self.stack_ = LayerStack.init(
            self.n_layers, X.shape[1], self.n_heads, AttentionMode(self.mode), seed=self.seed,
            scale=self.scale, tied_queries=self.tied_queries,
        )
        self.report_, self.readout_ = train_toy(
            self.stack_, X, y_idx, self.schedule, epochs=self.epochs, lr=self.lr,
            batch_size=self.batch_size, seed=self.seed, epsilon=self.epsilon,
        )
        self.mask_ = self.report_.final_mask
        return self

    def decision_function(self, X):
        check_is_fitted(self, "stack_")
        X = check_array(X)
        return self.readout_.logits(forward(self.stack_, X).final)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]
