"""Evaluation metrics: Gaussian Frechet distance, a least-squares linear
class probe, and mean pairwise feature diversity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class GaussianStats:
    mean: np.ndarray  # (F,)
    cov: np.ndarray  # (F, F)


def gaussian_stats(features: np.ndarray) -> GaussianStats:
    if features.ndim != 2:
        raise ValueError("features must be (samples, dims)")
    mean = features.mean(axis=0)
    cov = np.cov(features, rowvar=False)
    cov = np.atleast_2d(cov)
    return GaussianStats(mean=mean, cov=cov)


def frechet_gaussian(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace of the matrix square root is the sum of the square roots of
    the eigenvalues of S_a S_b; eigenvalues pushed (numerically) below zero
    are clamped at zero.
    """
    if a.cov.shape != b.cov.shape or a.cov.shape[0] != a.cov.shape[1]:
        raise ValueError("covariances must be square and matching")
    if a.mean.shape != b.mean.shape:
        raise ValueError("means must match")
    diff = a.mean - b.mean
    eigvals = np.linalg.eigvals(a.cov @ b.cov)
    roots = np.sqrt(np.maximum(eigvals.real, 0.0))
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * roots.sum())
    return max(value, 0.0)


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @staticmethod
    def fit(features: np.ndarray) -> "Standardizer":
        return Standardizer(
            mean=features.mean(axis=0),
            std=np.maximum(features.std(axis=0), 1e-8),
        )

    def __call__(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mean) / self.std


@dataclass
class LinearProbe:
    """One-hot least-squares classifier over standardized features."""

    weights: np.ndarray  # (F + 1, K)
    norm: Standardizer

    @staticmethod
    def fit(features: np.ndarray, labels: np.ndarray, num_classes: int) -> "LinearProbe":
        norm = Standardizer.fit(features)
        x = _augment(norm(features))
        y = np.eye(num_classes)[labels]
        w, *_ = np.linalg.lstsq(x, y, rcond=None)
        return LinearProbe(weights=w, norm=norm)

    def predict(self, features: np.ndarray) -> np.ndarray:
        return _augment(self.norm(features)) @ self.weights

    def accuracy(self, features: np.ndarray, labels: np.ndarray) -> float:
        pred = self.predict(features).argmax(axis=1)
        return float(np.mean(pred == labels))


def _augment(x: np.ndarray) -> np.ndarray:
    return np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)


def probe_accuracy(
    train_x, train_y, test_x, test_y, num_classes: int
) -> float:
    probe = LinearProbe.fit(train_x, np.asarray(train_y), num_classes)
    return probe.accuracy(test_x, np.asarray(test_y))


def diversity(features: np.ndarray, rng: np.random.Generator, pairs: int = 2000) -> float:
    """Mean pairwise Euclidean distance over randomly drawn index pairs."""
    n = features.shape[0]
    if n < 2:
        return 0.0
    i = rng.integers(0, n, size=pairs)
    j = rng.integers(0, n, size=pairs)
    keep = i != j
    return float(np.linalg.norm(features[i[keep]] - features[j[keep]], axis=1).mean())
