"""A small MLP encoder producing unit-norm embeddings, with exact backprop.

The network is hand-written numpy: configurable hidden widths, a smooth
activation between layers, a linear output layer, and a final row-wise
normalization. The backward pass includes the normalization Jacobian
(I - z z^T) / ||u||, where u is the pre-normalization output, so gradients
of any downstream loss w.r.t. the unit embeddings propagate exactly to all
parameters.

Optimization is plain momentum SGD (v <- m*v + g; p <- p - lr*v), shared by
the encoder parameters and the class prototypes; prototypes are re-unit-
normalized after each step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .pseudo import PrototypeBank

__all__ = [
    "ACTIVATIONS",
    "EncoderConfig",
    "ForwardCache",
    "MlpEncoder",
    "OptimizerState",
    "StaleCacheError",
    "sgd_momentum_step",
    "update_prototypes",
]


class StaleCacheError(RuntimeError):
    """A forward cache is reused after the encoder's parameters changed."""


def _softplus(x):
    return np.logaddexp(0.0, x)


def _softplus_grad(pre, _act):
    return 0.5 * (1.0 + np.tanh(0.5 * pre))


def _tanh_grad(_pre, act):
    return 1.0 - act * act


# name -> (function, derivative(pre_activation, activation_output))
ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "tanh": (np.tanh, _tanh_grad),
    "softplus": (_softplus, _softplus_grad),
}


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (64, 64)
    embed_dim: int = 16
    activation: str = "tanh"

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden_dims, self.embed_dim)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all layer widths must be >= 1, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(
                f"unknown activation {self.activation!r}, expected one of {sorted(ACTIVATIONS)}")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.embed_dim)


@dataclass
class ForwardCache:
    version: int
    inputs: np.ndarray
    pre_activations: list[np.ndarray]
    activations: list[np.ndarray]  # layer inputs: activations[l] feeds layer l
    pre_norm: np.ndarray
    norms: np.ndarray
    embeddings: np.ndarray


class MlpEncoder:
    """Multilayer perceptron ending in a row-normalized embedding."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        dims = config.layer_dims
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        self._version = 0

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def version(self) -> int:
        return self._version

    def parameters(self) -> list[np.ndarray]:
        """Live references, interleaved [W0, b0, W1, b1, ...]."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def mark_parameters_changed(self) -> None:
        self._version += 1

    def forward(self, inputs) -> tuple[np.ndarray, ForwardCache]:
        """Map (n, input_dim) rows to unit embeddings plus a backward cache."""
        x = np.asarray(inputs, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise ValueError(
                f"inputs must be (n, {self.config.input_dim}), got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("inputs must be finite")
        act_fn, _ = ACTIVATIONS[self.config.activation]
        pre_activations = []
        activations = [x]
        h = x
        for layer in range(self.num_layers - 1):
            pre = h @ self.weights[layer] + self.biases[layer]
            h = act_fn(pre)
            pre_activations.append(pre)
            activations.append(h)
        pre_norm = h @ self.weights[-1] + self.biases[-1]
        norms = np.linalg.norm(pre_norm, axis=1)
        if np.any(norms < 1e-150):
            raise ValueError("encoder produced a zero-norm embedding")
        embeddings = pre_norm / norms[:, None]
        cache = ForwardCache(self._version, x, pre_activations, activations,
                             pre_norm, norms, embeddings)
        return embeddings, cache

    def backward(self, cache: ForwardCache, grad_embeddings) -> list[np.ndarray]:
        """Parameter gradients given d(loss)/d(embeddings).

        Returns gradients in parameters() order. The normalization Jacobian
        is applied first: dL/du = (g - (g.z) z) / ||u|| per row.
        """
        if cache.version != self._version:
            raise StaleCacheError("forward cache predates a parameter update")
        g = np.asarray(grad_embeddings, dtype=np.float64)
        if g.shape != cache.embeddings.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match embeddings {cache.embeddings.shape}")
        z = cache.embeddings
        radial = (g * z).sum(axis=1, keepdims=True)
        grad_pre_norm = (g - radial * z) / cache.norms[:, None]

        _, act_grad = ACTIVATIONS[self.config.activation]
        grad_w = [None] * self.num_layers
        grad_b = [None] * self.num_layers
        upstream = grad_pre_norm
        for layer in range(self.num_layers - 1, -1, -1):
            grad_w[layer] = cache.activations[layer].T @ upstream
            grad_b[layer] = upstream.sum(axis=0)
            if layer > 0:
                grad_h = upstream @ self.weights[layer].T
                upstream = grad_h * act_grad(cache.pre_activations[layer - 1],
                                             cache.activations[layer])
        out = []
        for gw, gb in zip(grad_w, grad_b):
            out.extend((gw, gb))
        return out

    def apply_gradients(self, grads: list[np.ndarray], state: "OptimizerState") -> None:
        sgd_momentum_step(self.parameters(), grads, state)
        self.mark_parameters_changed()


@dataclass
class OptimizerState:
    """Velocity buffers for momentum SGD; lr is set per step by the schedule."""

    momentum: float
    lr: float
    velocities: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")

    @classmethod
    def for_params(cls, params: list[np.ndarray], momentum: float,
                   lr: float = 0.0) -> "OptimizerState":
        return cls(momentum=momentum, lr=lr,
                   velocities=[np.zeros_like(p) for p in params])


def sgd_momentum_step(params: list[np.ndarray], grads: list[np.ndarray],
                      state: OptimizerState) -> list[np.ndarray]:
    """In-place momentum SGD: v <- m*v + g, then p <- p - lr*v."""
    if len(params) != len(grads) or len(params) != len(state.velocities):
        raise ValueError("params, grads, and velocities must align")
    for p, g, v in zip(params, grads, state.velocities):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, vel {v.shape}")
        v *= state.momentum
        v += g
        p -= state.lr * v
    return params


def update_prototypes(bank: PrototypeBank, grads, state: OptimizerState) -> PrototypeBank:
    """Momentum-SGD step on the prototype matrix, then re-unit-normalize rows.

    A step that moves nothing (zero velocity or zero lr) leaves the bank
    bit-identical.
    """
    g = np.asarray(grads, dtype=np.float64)
    if g.shape != bank.prototypes.shape:
        raise ValueError(f"gradient shape {g.shape} does not match prototypes "
                         f"{bank.prototypes.shape}")
    vel = state.velocities[0]
    vel *= state.momentum
    vel += g
    if state.lr == 0.0 or not np.any(vel):
        return bank
    bank.prototypes -= state.lr * vel
    norms = np.linalg.norm(bank.prototypes, axis=1)
    if np.any(norms < 1e-150):
        raise ValueError("prototype collapsed to zero norm during update")
    bank.prototypes /= norms[:, None]
    return bank
