"""Shared helpers for the test suite."""

import numpy as np

from sscent import ContrastiveBatch


def unit_rows(rng, n, d):
    z = rng.normal(size=(n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def random_batch(rng, max_size=16, max_dim=8, zero_weight=False):
    """Random valid batch with at least one guaranteed positive pair.

    Rows 0 and 1 always share a label and keep nonzero weight, so both loss
    variants have a nonzero normalizer even when ``zero_weight`` plants a
    dead sample elsewhere in the batch.
    """
    n = int(rng.integers(3, max_size + 1))
    d = int(rng.integers(2, max_dim + 1))
    z = unit_rows(rng, n, d)
    labels = rng.integers(0, max(2, n // 2), size=n)
    labels[1] = labels[0]
    weights = rng.uniform(0.05, 1.0, size=n)
    if zero_weight and n > 3:
        weights[int(rng.integers(2, n))] = 0.0
    temperature = float(rng.uniform(0.07, 1.5))
    return ContrastiveBatch(embeddings=z, labels=labels, weights=weights,
                            temperature=temperature)


def circle_batch(weights=None, temperature=0.5):
    """Four points on the unit circle at angles 0.3, 1.2, 2.1, 4.0 rad."""
    theta = np.array([0.3, 1.2, 2.1, 4.0])
    z = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    labels = np.array([0, 0, 1, 1])
    if weights is None:
        weights = np.ones(4)
    return ContrastiveBatch(embeddings=z, labels=labels,
                            weights=np.asarray(weights, dtype=float),
                            temperature=temperature)
