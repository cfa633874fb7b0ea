"""Pseudo-label assignment for unlabeled samples.

Class probabilities are predicted from cosine similarity against a bank of
unit-norm class prototypes. Samples whose top probability clears a
confidence threshold are accepted with weight 1. With the entropy gate
enabled, the remaining samples whose predictive entropy falls below a
gate threshold are also accepted, carrying an adaptive confidence weight
that interpolates between 1 (entropy at or below the noisiest confident
sample) and a configurable floor (entropy at the gate threshold). Anything
else is rejected: it receives a unique per-sample label so its two
augmented views only pair with each other, and a small fixed weight.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .vecmath import as_finite_array, entropy, stable_softmax, validate_prob_vector

__all__ = [
    "DecisionKind",
    "EntropyGate",
    "GateDegenerateError",
    "PROTOTYPE_NORM_TOL",
    "PrototypeBank",
    "PseudoLabelDecision",
    "adaptive_weight",
    "assign_pseudo_labels",
    "class_probabilities",
    "compute_e_min",
]

PROTOTYPE_NORM_TOL = 1e-6


class GateDegenerateError(ValueError):
    """The adaptive-weight interpolation pivot is at or above the gate threshold."""


class DecisionKind(enum.Enum):
    CONFIDENT = "confident"
    ENTROPY_SELECTED = "entropy_selected"
    REJECTED = "rejected"


@dataclass
class PrototypeBank:
    """One unit vector per class.

    prototypes: (K, d) array with unit-norm rows.
    class_ids: (K,) array, a permutation of 0..K-1; class_ids[k] is the
        class represented by row k.
    """

    prototypes: np.ndarray
    class_ids: np.ndarray

    def __post_init__(self):
        self.prototypes = as_finite_array(self.prototypes, "prototypes")
        if self.prototypes.ndim != 2 or self.prototypes.shape[0] < 1:
            raise ValueError(f"prototypes must be a (K, d) matrix, got {self.prototypes.shape}")
        norms = np.linalg.norm(self.prototypes, axis=1)
        if np.any(np.abs(norms - 1.0) > PROTOTYPE_NORM_TOL):
            worst = float(np.abs(norms - 1.0).max())
            raise ValueError(f"prototype rows must be unit norm (worst deviation {worst:.2e})")
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        k = self.prototypes.shape[0]
        if self.class_ids.shape != (k,) or sorted(self.class_ids.tolist()) != list(range(k)):
            raise ValueError("class_ids must be a permutation of 0..K-1")

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    @classmethod
    def random(cls, num_classes: int, dim: int, rng: np.random.Generator) -> "PrototypeBank":
        """Seeded isotropic directions, unit-normalized, identity class ids."""
        raw = rng.normal(size=(num_classes, dim))
        raw /= np.linalg.norm(raw, axis=1)[:, None]
        return cls(prototypes=raw, class_ids=np.arange(num_classes))

    def scores_by_class(self, embeddings: np.ndarray) -> np.ndarray:
        """Cosine scores against each prototype, columns ordered by class id."""
        scores = np.atleast_2d(embeddings) @ self.prototypes.T
        order = np.argsort(self.class_ids)
        return scores[:, order]


@dataclass(frozen=True)
class EntropyGate:
    """Per-batch gating parameters.

    h_max is log(num_classes); h_base = tau_ent * h_max is the entropy
    threshold below which non-confident samples may still be selected.
    """

    tau: float
    tau_ent: float
    num_classes: int
    h_max: float
    h_base: float
    w_min: float

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must be in (0, 1], got {self.tau}")
        if not 0.0 < self.tau_ent <= 1.0:
            raise ValueError(f"tau_ent must be in (0, 1], got {self.tau_ent}")
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if not 0.0 <= self.w_min <= 1.0:
            raise ValueError(f"w_min must be in [0, 1], got {self.w_min}")
        if self.h_max != math.log(self.num_classes):
            raise ValueError("h_max must equal log(num_classes)")
        if self.h_base != self.tau_ent * self.h_max:
            raise ValueError("h_base must equal tau_ent * h_max")
        if not 0.0 < self.h_base <= self.h_max:
            raise ValueError("h_base must lie in (0, h_max]")

    @classmethod
    def for_classes(cls, num_classes: int, tau: float, tau_ent: float,
                    w_min: float = 0.2) -> "EntropyGate":
        h_max = math.log(num_classes)
        return cls(tau=tau, tau_ent=tau_ent, num_classes=num_classes,
                   h_max=h_max, h_base=tau_ent * h_max, w_min=w_min)


@dataclass(frozen=True)
class PseudoLabelDecision:
    """Outcome for one unlabeled sample within a batch."""

    sample_index: int
    kind: DecisionKind
    assigned_label: int
    weight: float
    entropy: float
    max_prob: float


def class_probabilities(z_w, bank: PrototypeBank, t_prime: float) -> np.ndarray:
    """Class probabilities for one unit embedding: softmax over prototype cosines.

    The returned vector is indexed by class id (not by prototype row).
    """
    z = as_finite_array(z_w, "embedding")
    if z.shape != (bank.dim,):
        raise ValueError(f"embedding has shape {z.shape}, prototypes expect ({bank.dim},)")
    norm = float(np.linalg.norm(z))
    if abs(norm - 1.0) > PROTOTYPE_NORM_TOL:
        raise ValueError(f"embedding must be unit norm (got {norm})")
    scores = bank.scores_by_class(z)[0]
    return stable_softmax(scores, t_prime)


def compute_e_min(decisions_pass1: Iterable[tuple[float, float]],
                  tau: float) -> Optional[float]:
    """Largest entropy among confident samples, or None when there are none.

    decisions_pass1 holds one (max_prob, entropy) pair per sample; a sample
    is confident when max_prob > tau (strict).
    """
    e_min: Optional[float] = None
    for max_prob, h in decisions_pass1:
        if max_prob > tau and (e_min is None or h > e_min):
            e_min = h
    return e_min


def adaptive_weight(h_i: float, e_min: float, h_base: float, w_min: float) -> float:
    """Confidence weight, linear in entropy between e_min (-> 1) and h_base (-> w_min).

    h_i is clamped into [e_min, h_base]; the boundary values are returned
    exactly. Raises GateDegenerateError when e_min >= h_base, where the
    interpolation is undefined.
    """
    if e_min >= h_base:
        raise GateDegenerateError(
            f"entropy pivot {e_min} is not below the gate threshold {h_base}")
    if h_i <= e_min:
        return 1.0
    if h_i >= h_base:
        return float(w_min)
    scale = (h_base - h_i) / (h_base - e_min)
    return float(w_min + (1.0 - w_min) * scale)


def assign_pseudo_labels(probs, gate: EntropyGate, lambda_reject: float,
                         entropy_gate_enabled: bool) -> list[PseudoLabelDecision]:
    """Turn per-sample class probabilities into pseudo-label decisions.

    Pass 1 accepts samples whose top probability strictly exceeds gate.tau
    (weight 1) and records the largest entropy among them (e_min). Pass 2,
    when the gate is enabled and e_min exists:

    * e_min < h_base: remaining samples with entropy below h_base are
      selected with the argmax class; weight 1 when entropy <= e_min, else
      the adaptive interpolated weight.
    * e_min >= h_base (degenerate gate): samples with entropy <= e_min are
      selected with weight 1; the interpolation branch is skipped.

    Everything else is rejected with a unique label num_classes + position
    and weight lambda_reject. Argmax ties break toward the lowest class
    index; output order matches input order.
    """
    if not 0.0 <= lambda_reject <= 1.0:
        raise ValueError(f"lambda_reject must be in [0, 1], got {lambda_reject}")
    mat = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if mat.shape[1] != gate.num_classes:
        raise ValueError(
            f"probability rows have {mat.shape[1]} classes, gate expects {gate.num_classes}")
    for row in mat:
        validate_prob_vector(row)

    n = mat.shape[0]
    max_prob = mat.max(axis=1)
    argmax = mat.argmax(axis=1)  # first maximum: lowest class index on ties
    entropies = np.array([entropy(row) for row in mat])
    confident = max_prob > gate.tau
    e_min = compute_e_min(zip(max_prob, entropies), gate.tau)

    decisions = []
    for i in range(n):
        h = float(entropies[i])
        mp = float(max_prob[i])
        if confident[i]:
            decisions.append(PseudoLabelDecision(i, DecisionKind.CONFIDENT,
                                                 int(argmax[i]), 1.0, h, mp))
            continue
        selected = False
        weight = lambda_reject
        if entropy_gate_enabled and e_min is not None:
            if e_min < gate.h_base:
                if h < gate.h_base:
                    selected = True
                    weight = 1.0 if h <= e_min else adaptive_weight(
                        h, e_min, gate.h_base, gate.w_min)
            elif h <= e_min:
                selected = True
                weight = 1.0
        if selected:
            decisions.append(PseudoLabelDecision(i, DecisionKind.ENTROPY_SELECTED,
                                                 int(argmax[i]), float(weight), h, mp))
        else:
            decisions.append(PseudoLabelDecision(i, DecisionKind.REJECTED,
                                                 gate.num_classes + i,
                                                 float(lambda_reject), h, mp))
    return decisions
