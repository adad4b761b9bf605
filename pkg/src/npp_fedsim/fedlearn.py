"""Softmax contamination classifier, local SGD, FedAvg and session metrics.

Weight layout (flat float64 vector)::

    W[0, 0..F-1], W[1, 0..F-1], ..., W[K-1, 0..F-1], b[0..K-1]

i.e. the class-by-feature matrix in row-major order followed by the per-class
biases. ``serialize_weights`` prefixes it with ``<u4 K, <u4 F``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels

CLASSES = ("none", "co2", "co", "ch4", "multi")
CLASS_INDEX = {c: i for i, c in enumerate(CLASSES)}
N_FEATURES = 7


class NoProgressError(RuntimeError):
    """No update carried any samples, so the round cannot aggregate."""


class DeserializationError(ValueError):
    pass


class UndefinedMetricError(ValueError):
    """ROC AUC needs two classes. ``partial`` holds the metrics that are defined."""

    def __init__(self, message, partial):
        super().__init__(message)
        self.partial = partial


@dataclass(frozen=True)
class FeatureMap:
    """Fixed reference standardization shared by every client.

    ``u = asinh((x - center) / scale)`` per gas; the feature vector is
    ``(u, u**2, |u|)``, seven values in total.
    """

    center: tuple[float, float, float] = (420.0, 1.0, 2.0)
    # four times the gap between ambient air and the default alarm threshold
    scale: tuple[float, float, float] = (2320.0, 136.0, 3992.0)

    def __call__(self, gases) -> np.ndarray:
        g = np.asarray(gases, dtype=np.float64).reshape(-1, 3)
        u = np.arcsinh((g - np.asarray(self.center)) / np.asarray(self.scale))
        return np.column_stack([u, u * u, np.sqrt((u * u).sum(axis=1))])


@dataclass
class ModelWeights:
    values: np.ndarray
    n_classes: int = len(CLASSES)
    n_features: int = N_FEATURES
    version: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        expected = self.n_classes * self.n_features + self.n_classes
        if self.values.size != expected:
            raise ValueError(f"expected {expected} values for {self.n_classes}x{self.n_features}, got {self.values.size}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("weights must be finite")

    @classmethod
    def zeros(cls, n_classes=len(CLASSES), n_features=N_FEATURES, version=0):
        return cls(np.zeros(n_classes * n_features + n_classes), n_classes, n_features, version)

    @classmethod
    def from_parts(cls, W, b, version=0):
        W = np.asarray(W, dtype=np.float64)
        return cls(np.concatenate([W.ravel(), np.asarray(b, dtype=np.float64)]), W.shape[0], W.shape[1], version)

    @property
    def W(self) -> np.ndarray:
        return self.values[: self.n_classes * self.n_features].reshape(self.n_classes, self.n_features)

    @property
    def b(self) -> np.ndarray:
        return self.values[self.n_classes * self.n_features:]

    def copy(self, version=None):
        return ModelWeights(self.values.copy(), self.n_classes, self.n_features,
                            self.version if version is None else version)


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        X = np.asarray(self.X, dtype=np.float64)
        width = X.shape[-1] if X.ndim == 2 else N_FEATURES
        self.X = X.reshape(len(self.y), width) if len(self.y) else np.zeros((0, width))
        if not np.all(np.isfinite(self.X)):
            raise ValueError("features must be finite")

    def __len__(self):
        return len(self.y)

    def split(self, rng: np.random.Generator, train_fraction: float = 0.8) -> tuple[Dataset, Dataset]:
        order = rng.permutation(len(self))
        cut = int(round(train_fraction * len(self)))
        tr, te = order[:cut], order[cut:]
        return Dataset(self.X[tr], self.y[tr]), Dataset(self.X[te], self.y[te])

    @classmethod
    def concat(cls, parts) -> Dataset:
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls(np.zeros((0, N_FEATURES)), np.zeros(0, dtype=np.int64))
        return cls(np.vstack([p.X for p in parts]), np.concatenate([p.y for p in parts]))


@dataclass
class LocalUpdate:
    weights: ModelWeights
    n_samples: int
    robot_id: int = 0
    session_index: int = 0


def predict(weights: ModelWeights, features) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    single = X.ndim == 1
    X = X.reshape(-1, weights.n_features) if X.size else X.reshape(0, weights.n_features)
    if X.shape[1] != weights.n_features:
        raise ValueError(f"model expects {weights.n_features} features, got {X.shape[1]}")
    scores = X @ weights.W.T + weights.b
    scores -= scores.max(axis=1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=1, keepdims=True)
    return p[0] if single else p


def loss_and_grad(weights: ModelWeights, data: Dataset):
    """Mean cross-entropy and its gradient in the flat weight layout."""
    loss, gW, gb = kernels.softmax_xent_grad(weights.W, weights.b, data.X, data.y)
    return float(loss), np.concatenate([np.asarray(gW).ravel(), np.asarray(gb)])


def local_train(global_weights: ModelWeights, data: Dataset, lr: float = 0.05, epochs: int = 3,
                rng: np.random.Generator | None = None, batch_size: int | None = 32,
                robot_id: int = 0, session_index: int = 0) -> LocalUpdate:
    """Mini-batch SGD from the global weights. ``batch_size=None`` is full batch."""
    if lr < 0:
        raise ValueError("learning rate must be >= 0")
    if epochs < 1:
        raise ValueError("need at least one epoch")
    w = global_weights.copy()
    n = len(data)
    if n == 0:
        return LocalUpdate(w, 0, robot_id, session_index)
    rng = np.random.default_rng() if rng is None else rng
    bs = n if batch_size is None else batch_size
    values = w.values
    for _ in range(epochs):
        order = rng.permutation(n) if bs < n else np.arange(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            _, g = loss_and_grad(w, Dataset(data.X[idx], data.y[idx]))
            values -= lr * g
    return LocalUpdate(w, n, robot_id, session_index)


def fedavg(updates) -> ModelWeights:
    """Sample-weighted mean of client weights, summed in ascending robot_id order."""
    live = sorted((u for u in updates if u.n_samples > 0), key=lambda u: (u.robot_id, u.session_index))
    if not live:
        raise NoProgressError("no update carried samples; round skipped")
    ref = live[0].weights
    for u in live:
        if (u.weights.n_classes, u.weights.n_features) != (ref.n_classes, ref.n_features):
            raise ValueError("updates disagree on model dimensions")
    total = sum(u.n_samples for u in live)
    acc = np.zeros_like(ref.values)
    for u in live:
        acc += (u.n_samples / total) * u.weights.values
    version = max(u.weights.version for u in live) + 1
    return ModelWeights(acc, ref.n_classes, ref.n_features, version)


def local_loss(weights: ModelWeights, data: Dataset) -> float:
    return loss_and_grad(weights, data)[0]


def global_loss(weights: ModelWeights, datasets) -> float:
    datasets = [d for d in datasets if len(d)]
    if not datasets:
        raise ValueError("global loss needs at least one non-empty dataset")
    total = sum(len(d) for d in datasets)
    return float(sum(len(d) / total * local_loss(weights, d) for d in datasets))


@dataclass(frozen=True)
class SessionMetrics:
    accuracy: float
    f1: float
    precision: float
    recall: float
    roc_auc: float

    def as_row(self):
        return (self.accuracy, self.f1, self.precision, self.recall, self.roc_auc)


def roc_auc_binary(y_true, scores) -> float:
    """Area under the ROC curve by the trapezoid rule over distinct thresholds."""
    y = np.asarray(y_true, dtype=bool)
    s = np.asarray(scores, dtype=np.float64)
    pos = int(y.sum())
    neg = len(y) - pos
    if pos == 0 or neg == 0:
        raise ValueError("ROC AUC needs both positives and negatives")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    tpr = np.r_[0.0, tps / pos]
    fpr = np.r_[0.0, fps / neg]
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def evaluate(weights: ModelWeights, test: Dataset) -> SessionMetrics:
    """Accuracy plus support-weighted precision, recall, F1 and one-vs-rest AUC."""
    if len(test) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    probs = predict(weights, test.X)
    pred = probs.argmax(axis=1)
    y = test.y
    n = len(y)
    k = weights.n_classes
    support = np.bincount(y, minlength=k)
    predicted = np.bincount(pred, minlength=k)
    tp = np.bincount(y[pred == y], minlength=k)

    accuracy = float(tp.sum() / n)
    # support-weighted recall is sum(tp)/n term by term; computing it that way keeps it bitwise equal to accuracy
    recall = float(tp.sum() / n)
    precision = 0.0
    f1 = 0.0
    for c in np.flatnonzero(support):
        p_c = tp[c] / predicted[c] if predicted[c] else 0.0
        r_c = tp[c] / support[c]
        f_c = 2 * p_c * r_c / (p_c + r_c) if (p_c + r_c) else 0.0
        precision += support[c] / n * p_c
        f1 += support[c] / n * f_c

    present = np.flatnonzero(support)
    if len(present) < 2:
        partial = SessionMetrics(accuracy, float(f1), float(precision), recall, math.nan)
        raise UndefinedMetricError("ROC AUC undefined for a single-class test set", partial)
    auc = 0.0
    for c in present:
        auc += support[c] / n * roc_auc_binary(y == c, probs[:, c])
    return SessionMetrics(accuracy, float(f1), float(precision), recall, float(auc))


_HEADER = struct.Struct("<II")


def serialize_weights(weights: ModelWeights) -> bytes:
    return _HEADER.pack(weights.n_classes, weights.n_features) + weights.values.astype("<f8").tobytes()


def deserialize_weights(raw: bytes, version: int = 0) -> ModelWeights:
    if len(raw) < _HEADER.size:
        raise DeserializationError("payload shorter than the dimension header")
    k, f = _HEADER.unpack_from(raw)
    expected = _HEADER.size + 8 * (k * f + k)
    if k == 0 or f == 0 or len(raw) != expected:
        raise DeserializationError(f"header says {k}x{f} ({expected} bytes) but payload is {len(raw)} bytes")
    values = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise DeserializationError("non-finite weight values")
    return ModelWeights(values, k, f, version)
