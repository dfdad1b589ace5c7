"""Datasets: a synthetic Gaussian-mixture classification task and CSV loading."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Dataset:
    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray
    task: str = "classification"

    @property
    def X_all(self) -> np.ndarray:
        return np.concatenate([self.X_train, self.X_val], axis=0)


def synth_dataset(
    n_samples: int,
    seed: int,
    n_features: int = 16,
    n_classes: int = 5,
    separation: float = 2.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian mixture: one unit-covariance blob per class, means scaled by
    `separation`.  Deterministic in (seed, sizes)."""
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, 1.0, size=(n_classes, n_features))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True) * np.sqrt(n_features)
    y = rng.integers(0, n_classes, size=n_samples)
    X = means[y] + rng.normal(0.0, 1.0, size=(n_samples, n_features))
    return X, y


def split(X: np.ndarray, y: np.ndarray, val_fraction: float, seed: int,
          task: str = "classification") -> Dataset:
    n = X.shape[0]
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_val = int(round(n * val_fraction))
    vi, ti = perm[:n_val], perm[n_val:]
    return Dataset(X[ti], y[ti], X[vi], y[vi], task)


def load_csv(path: str, task: str = "classification") -> tuple[np.ndarray, np.ndarray]:
    """Rows of feature values with the target in the last column."""
    raw = np.loadtxt(path, delimiter=",", ndmin=2)
    X = raw[:, :-1]
    y = raw[:, -1]
    if task == "classification":
        y = y.astype(np.int64)
    return X, y
