"""Vector and probability primitives shared across the package.

Everything here is pure double-precision numpy with explicit validation:
non-finite values are rejected rather than propagated, softmax is computed
in the max-shifted form, and entropy uses the 0 * log(0) = 0 convention
with natural logarithms.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "PROB_SUM_TOL",
    "as_finite_array",
    "cosine_similarity",
    "entropy",
    "log_sum_exp",
    "stable_softmax",
    "unit_normalize",
    "unit_normalize_rows",
    "validate_prob_vector",
]

# Tolerance on sum(p) == 1 for probability vectors.
PROB_SUM_TOL = 1e-9

# Norms below this are treated as zero (normalizing would lose all precision).
_ZERO_NORM = 1e-150


def as_finite_array(values, name: str = "values") -> np.ndarray:
    """Convert to a float64 array, rejecting NaN/Inf entries."""
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must contain only finite values")
    return arr


def unit_normalize(v) -> np.ndarray:
    """Scale a vector to Euclidean norm 1, preserving direction.

    Raises ValueError on zero (or effectively zero) norm instead of
    silently producing NaN.
    """
    arr = as_finite_array(v, "vector")
    if arr.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {arr.shape}")
    norm = float(np.linalg.norm(arr))
    if norm < _ZERO_NORM:
        raise ValueError("cannot normalize a zero-norm vector")
    return arr / norm


def unit_normalize_rows(matrix) -> np.ndarray:
    """Row-wise unit_normalize for a 2-d array."""
    arr = as_finite_array(matrix, "matrix")
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-d array, got shape {arr.shape}")
    norms = np.linalg.norm(arr, axis=1)
    if np.any(norms < _ZERO_NORM):
        raise ValueError("cannot normalize zero-norm rows")
    return arr / norms[:, None]


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors."""
    return float(np.dot(unit_normalize(a), unit_normalize(b)))


def stable_softmax(scores, temperature: float) -> np.ndarray:
    """softmax(scores / temperature), invariant to shifting all scores.

    Args:
        scores: finite 1-d array of raw scores.
        temperature: positive scale applied before the softmax.

    Returns:
        Probability vector of the same length (sums to 1).
    """
    arr = as_finite_array(scores, "scores")
    if arr.ndim != 1:
        raise ValueError(f"expected a 1-d score vector, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError("scores must be non-empty")
    if not np.isfinite(temperature) or temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    scaled = arr / float(temperature)
    if not np.all(np.isfinite(scaled)):
        raise ValueError("temperature too small for the given scores")
    shifted = scaled - scaled.max()
    exps = np.exp(shifted)
    return exps / exps.sum()


def log_sum_exp(values) -> float:
    """log(sum(exp(values))) computed in the max-shifted form."""
    arr = as_finite_array(values, "values")
    m = float(arr.max())
    return m + float(np.log(np.exp(arr - m).sum()))


def validate_prob_vector(p, name: str = "probabilities") -> np.ndarray:
    """Check that p is a valid probability vector and return it as float64."""
    arr = as_finite_array(p, name)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-d, got shape {arr.shape}")
    if np.any(arr < 0.0):
        raise ValueError(f"{name} must be non-negative")
    total = float(arr.sum())
    if abs(total - 1.0) > PROB_SUM_TOL:
        raise ValueError(f"{name} must sum to 1 (got {total})")
    return arr


def entropy(p) -> float:
    """Shannon entropy of a probability vector, in nats.

    Zero entries contribute nothing (0 * log 0 := 0). The result lies in
    [0, log C] for a C-class vector.
    """
    arr = validate_prob_vector(p)
    with np.errstate(divide="ignore"):
        terms = np.where(arr > 0.0, arr * np.log(np.where(arr > 0.0, arr, 1.0)), 0.0)
    return max(float(-terms.sum()), 0.0)
