"""Binary logistic regression: the compute workload that consumes batches.

All math is float64.  ``loss`` is the negative log-likelihood summed over
the batch, so ``gradient`` is a plain sum of per-sample gradients and shard
sums add up exactly to the full-data quantity.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .errors import DimMismatch, EmptyInput, InvalidArgument, SingularHessian, Unsupported
from .sample_store import permutation

MAX_NEWTON_DIM = 64


@dataclass
class FeatureBatch:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.ndim != 2 or self.y.ndim != 1 or len(self.x) != len(self.y):
            raise DimMismatch(f"x {self.x.shape} and y {self.y.shape} do not form a batch")
        if not np.all(np.isfinite(self.x)):
            raise InvalidArgument("features must be finite")
        if not np.all((self.y == 0) | (self.y == 1)):
            raise InvalidArgument("labels must be 0 or 1")

    @classmethod
    def from_batch(cls, batch) -> "FeatureBatch":
        """Flatten an image batch; class labels become binary via ``label % 2``."""
        n = len(batch.labels)
        return cls(batch.features.reshape(n, -1), np.asarray(batch.labels) % 2)

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def __len__(self):
        return len(self.y)


@dataclass(frozen=True)
class TrainConfig:
    eta: float = 0.1
    batch_size: int = 32
    epochs: int = 1
    d: int | None = None

    def __post_init__(self):
        if not self.eta > 0:
            raise InvalidArgument("learning rate must be > 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise InvalidArgument("batch_size must be >= 1 and epochs >= 0")


@dataclass
class LossStats:
    loss: float = 0.0
    grad_norm: float = 0.0
    samples_seen: int = 0


def sigmoid(x):
    """Logistic function without overflow for large |x|; scalar or array."""
    if np.ndim(x) == 0:
        x = float(x)
        if x >= 0:
            return 1.0 / (1.0 + math.exp(-x))
        e = math.exp(x)
        return e / (1.0 + e)
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _check_dims(w, batch: FeatureBatch) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.shape[0] != batch.d:
        raise DimMismatch(f"weights of length {w.shape} vs features of dimension {batch.d}")
    return w


def loss(w, batch: FeatureBatch) -> float:
    """Negative log-likelihood, written with softplus so it never takes log(0)."""
    w = _check_dims(w, batch)
    z = batch.x @ w
    # -log(sigmoid(z)) = softplus(-z), -log(1 - sigmoid(z)) = softplus(z)
    terms = batch.y * np.logaddexp(0.0, -z) + (1.0 - batch.y) * np.logaddexp(0.0, z)
    return math.fsum(terms)


def gradient(w, batch: FeatureBatch) -> np.ndarray:
    w = _check_dims(w, batch)
    return batch.x.T @ (sigmoid(batch.x @ w) - batch.y)


def sgd_step(w, grad, eta: float) -> np.ndarray:
    if not eta > 0:
        raise InvalidArgument("learning rate must be > 0")
    return np.asarray(w, dtype=np.float64) - eta * np.asarray(grad, dtype=np.float64)


def hessian(w, batch: FeatureBatch, ridge: float = 0.0) -> np.ndarray:
    """IRLS curvature: sum of s(1-s) x x^T plus ``ridge`` on the diagonal."""
    w = _check_dims(w, batch)
    s = sigmoid(batch.x @ w)
    h = batch.x.T @ ((s * (1.0 - s))[:, None] * batch.x)
    h[np.diag_indices_from(h)] += ridge
    return h


def newton_step(w, data: FeatureBatch, ridge: float = 0.0) -> np.ndarray:
    """One Newton/IRLS update ``w - H^-1 grad``.

    ``ridge`` also enters the gradient, so the step targets the optimum of
    ``loss + ridge/2 * |w|^2``.
    """
    if ridge < 0:
        raise InvalidArgument("ridge must be >= 0")
    w = _check_dims(w, data)
    if data.d > MAX_NEWTON_DIM:
        raise Unsupported(f"dense Newton steps are limited to d <= {MAX_NEWTON_DIM}")
    h = hessian(w, data, ridge)
    g = gradient(w, data) + ridge * w
    eig = np.linalg.eigvalsh(h)
    if eig[-1] <= 0 or eig[0] <= eig[-1] * data.d * np.finfo(np.float64).eps:
        raise SingularHessian("Hessian is singular; add a ridge term")
    return w - np.linalg.solve(h, g)


def partial_sum_gradient(w, shards: Iterable[FeatureBatch]) -> np.ndarray:
    """Gradient over the union of ``shards``, one shard in memory at a time."""
    total = None
    for shard in shards:
        g = gradient(w, shard)
        total = g if total is None else total + g
    if total is None:
        raise EmptyInput("no shards given")
    return total


def _as_feature_batch(batch) -> FeatureBatch:
    if isinstance(batch, FeatureBatch):
        return batch
    if isinstance(batch, tuple):
        return FeatureBatch(*batch)
    return FeatureBatch.from_batch(batch)


def _iter_batches(batches, epoch: int):
    if hasattr(batches, "next_batch"):
        while (batch := batches.next_batch(epoch)) is not None:
            yield batch
    else:
        yield from batches


def train_epoch(
    batches,
    w,
    config: TrainConfig,
    epoch: int = 0,
    compute_hook: Callable[[FeatureBatch], None] | None = None,
):
    """One SGD pass over ``batches`` (a Pipeline or an iterable of batches).

    ``w=None`` starts from zeros sized by the first batch.  Returns
    ``(w, LossStats, train_time_ns)``.  Only the per-batch compute
    (conversion, gradient, update, ``compute_hook``) counts as training time;
    time spent waiting for the next batch does not.
    """
    w = None if w is None else np.array(w, dtype=np.float64)
    stats = LossStats()
    grad_sum = None
    train_ns = 0
    for batch in _iter_batches(batches, epoch):
        t0 = time.perf_counter_ns()
        fb = _as_feature_batch(batch)
        if w is None:
            w = np.zeros(fb.d)
        g = gradient(w, fb)
        grad_sum = g.copy() if grad_sum is None else grad_sum + g
        stats.loss += loss(w, fb)
        w = sgd_step(w, g, config.eta)
        stats.samples_seen += len(fb)
        if compute_hook is not None:
            compute_hook(fb)
        train_ns += time.perf_counter_ns() - t0
    if grad_sum is not None:
        stats.grad_norm = float(np.linalg.norm(grad_sum))
    return w, stats, train_ns


def shuffled_batches(x, y, batch_size: int, seed: int, epoch: int):
    """Consecutive ``batch_size`` slices of the epoch permutation (last partial slice dropped)."""
    order = permutation(seed, epoch, len(y))
    for start in range(0, len(order) - batch_size + 1, batch_size):
        idx = order[start:start + batch_size]
        yield FeatureBatch(x[idx], y[idx])


class MiniBatchLogisticRegression(ClassifierMixin, BaseEstimator):
    """Logistic regression fit by plain mini-batch gradient descent.

    Parameters
    ----------
    eta : float
        Learning rate applied to the summed batch gradient.
    batch_size : int
        Mini-batch size; a trailing partial batch is dropped each epoch.
    epochs : int
        Passes over the data.
    seed : int
        Seed of the per-epoch shuffle.
    """

    def __init__(self, eta=0.1, batch_size=32, epochs=5, seed=0):
        self.eta = eta
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = np.unique(y)
        if not set(self.classes_.tolist()) <= {0, 1}:
            raise ValueError("MiniBatchLogisticRegression expects labels in {0, 1}")
        config = TrainConfig(self.eta, min(self.batch_size, len(y)), self.epochs, X.shape[1])
        self.classes_ = np.array([0, 1])
        w = np.zeros(X.shape[1])
        self.loss_curve_ = []
        for epoch in range(self.epochs):
            w, stats, _ = train_epoch(
                shuffled_batches(X, y, config.batch_size, self.seed, epoch), w, config
            )
            self.loss_curve_.append(loss(w, FeatureBatch(X, y)))
        self.coef_ = w
        self.n_features_in_ = X.shape[1]
        return self

    def partial_fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        if not hasattr(self, "coef_"):
            self.coef_ = np.zeros(X.shape[1])
            self.n_features_in_ = X.shape[1]
            self.classes_ = np.array([0, 1])
        fb = FeatureBatch(X, y)
        self.coef_ = sgd_step(self.coef_, gradient(self.coef_, fb), self.eta)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise DimMismatch(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X @ self.coef_

    def predict_proba(self, X):
        p = sigmoid(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.decision_function(X) >= 0).astype(np.int64)
