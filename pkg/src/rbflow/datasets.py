"""Synthetic two-class dataset for the classification demo."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError

# target vector of each class
CIRCLE_TARGETS = np.array([[-1.0, 0.0], [0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class CirclesDataset:
    X: np.ndarray
    labels: np.ndarray
    noise: float
    seed: int

    @property
    def Y(self) -> np.ndarray:
        return CIRCLE_TARGETS[self.labels]

    def __len__(self) -> int:
        return self.X.shape[0]


def make_circles(n: int, noise: float = 0.08, seed: int = 0, stream: int = 0,
                 radii=(1.0, 2.0)) -> CirclesDataset:
    """Two concentric circles with Gaussian radial noise.

    Labels alternate so the classes are balanced; class 0 sits on the inner
    radius.  ``stream`` selects an independent substream of ``seed`` (the test
    split uses stream 1).
    """
    if n < 2:
        raise DomainError("need at least two points")
    rng = np.random.default_rng([seed, stream])
    labels = np.arange(n) % 2
    angles = rng.uniform(0.0, 2.0 * np.pi, size=n)
    r = np.asarray(radii, dtype=float)[labels] + noise * rng.standard_normal(size=n)
    X = np.stack([r * np.cos(angles), r * np.sin(angles)], axis=1)
    return CirclesDataset(X, labels, float(noise), int(seed))


def circles_train_test(n_train: int, seed: int, noise: float = 0.08, test_factor: int = 10):
    """Training set and a ``test_factor`` times larger test set from a disjoint stream."""
    return make_circles(n_train, noise, seed, 0), make_circles(test_factor * n_train, noise, seed, 1)
