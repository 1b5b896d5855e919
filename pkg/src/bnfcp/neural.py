"""Small multilayer perceptrons with hand-written reverse-mode gradients.

Everything here works on float64 numpy arrays. Networks accept either a
single input vector of shape ``(d,)`` or a batch of shape ``(n, d)``;
parameter gradients are summed over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

LEAKY_SLOPE = 0.01
HIDDEN_ACTIVATIONS = ("leaky_relu", "tanh")
OUTPUT_ACTIVATIONS = ("identity", "tanh")


class DimensionError(ValueError):
    """Raised when an input does not match a network's layer sizes."""


class NonFiniteGradientError(ValueError):
    """Raised when an optimizer step receives NaN or infinite gradients."""


def _activate(z, kind):
    if kind == "identity":
        return z
    if kind == "tanh":
        return np.tanh(z)
    if kind == "leaky_relu":
        out = z * LEAKY_SLOPE
        return np.maximum(z, out, out=out)
    raise ValueError(f"unknown activation {kind!r}")


def _activate_grad(z, a, kind):
    # derivative of the activation, given pre-activation z and output a
    if kind == "identity":
        return np.ones_like(z)
    if kind == "tanh":
        return 1.0 - a * a
    if kind == "leaky_relu":
        return np.where(z > 0, 1.0, LEAKY_SLOPE)
    raise ValueError(f"unknown activation {kind!r}")


@dataclass
class Mlp:
    """Fully connected network ``layer_sizes[0] -> ... -> layer_sizes[-1]``.

    ``weights[i]`` has shape ``(out_i, in_i)``, ``biases[i]`` shape ``(out_i,)``.
    """

    layer_sizes: tuple
    weights: list
    biases: list
    hidden_activation: str = "leaky_relu"
    output_activation: str = "identity"

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ValueError("layer_sizes needs at least two positive entries")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"hidden_activation must be one of {HIDDEN_ACTIVATIONS}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"output_activation must be one of {OUTPUT_ACTIVATIONS}")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("need one weight matrix and bias per layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_sizes[i + 1], self.layer_sizes[i])
            if w.shape != shape or b.shape != (shape[0],):
                raise ValueError(f"layer {i}: expected weight {shape}, got {w.shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite parameters")

    @classmethod
    def create(
        cls,
        layer_sizes: Sequence[int],
        rng: np.random.Generator,
        hidden_activation: str = "leaky_relu",
        output_activation: str = "identity",
        last_layer_scale: float = 1.0,
    ) -> "Mlp":
        """Glorot-uniform weights, zero biases.

        ``last_layer_scale`` multiplies the final weight matrix; 0 gives a
        network whose output is identically zero.
        """
        sizes = [int(s) for s in layer_sizes]
        weights, biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            if i == len(sizes) - 2:
                w = w * last_layer_scale
            weights.append(w)
            biases.append(np.zeros(fan_out))
        return cls(tuple(sizes), weights, biases, hidden_activation, output_activation)

    @classmethod
    def zeros(cls, layer_sizes, hidden_activation="leaky_relu", output_activation="identity"):
        sizes = [int(s) for s in layer_sizes]
        weights = [np.zeros((o, i)) for i, o in zip(sizes[:-1], sizes[1:])]
        biases = [np.zeros(o) for o in sizes[1:]]
        return cls(tuple(sizes), weights, biases, hidden_activation, output_activation)

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    def parameters(self) -> list:
        """Parameter arrays in a fixed order (W0, b0, W1, b1, ...); mutable views."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "Mlp":
        return Mlp(
            self.layer_sizes,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.hidden_activation,
            self.output_activation,
        )

    # flat serialization ---------------------------------------------------

    def to_flat(self) -> tuple[list, np.ndarray]:
        """Return ``(shapes, vector)``: a shape header and all parameters as float64."""
        params = self.parameters()
        shapes = [list(p.shape) for p in params]
        flat = np.concatenate([p.ravel() for p in params]) if params else np.zeros(0)
        return shapes, flat

    @classmethod
    def from_flat(cls, layer_sizes, flat, hidden_activation="leaky_relu",
                  output_activation="identity") -> "Mlp":
        net = cls.zeros(layer_sizes, hidden_activation, output_activation)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != net.n_parameters():
            raise ValueError(f"expected {net.n_parameters()} parameters, got {flat.size}")
        pos = 0
        for p in net.parameters():
            p[...] = flat[pos:pos + p.size].reshape(p.shape)
            pos += p.size
        net.__post_init__()
        return net

    # forward / backward -----------------------------------------------------

    def _as_batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        batch = x[None, :] if single else x
        if batch.ndim != 2 or batch.shape[1] != self.n_in:
            raise DimensionError(f"expected input of size {self.n_in}, got shape {x.shape}")
        return batch, single

    def forward_cache(self, x):
        """Forward pass on a batch, keeping (pre-activation, activation) per layer."""
        a = x
        cache = [(None, x)]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w.T
            z += b
            a = _activate(z, self.output_activation if i == last else self.hidden_activation)
            cache.append((z, a))
        return a, cache

    def backward_cache(self, cache, upstream):
        """Backpropagate ``upstream`` (batch, n_out) through a cached forward pass.

        Returns ``(weight_grads, bias_grads, input_grad)``.
        """
        last = len(self.weights) - 1
        gw = [None] * len(self.weights)
        gb = [None] * len(self.weights)
        delta = upstream
        for i in range(last, -1, -1):
            z, a = cache[i + 1]
            kind = self.output_activation if i == last else self.hidden_activation
            if kind != "identity":
                delta = delta * _activate_grad(z, a, kind)
            a_prev = cache[i][1]
            gw[i] = delta.T @ a_prev
            gb[i] = delta.sum(axis=0)
            delta = delta @ self.weights[i]
        return gw, gb, delta

    def __call__(self, x):
        return mlp_forward(self, x)


@dataclass
class GradientTape:
    """Gradients mirroring an :class:`Mlp`'s parameter shapes, plus the input gradient."""

    weights: list
    biases: list
    input: np.ndarray

    def parameters(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    @classmethod
    def zeros_like(cls, mlp: Mlp) -> "GradientTape":
        return cls([np.zeros_like(w) for w in mlp.weights],
                   [np.zeros_like(b) for b in mlp.biases],
                   np.zeros(mlp.n_in))


def mlp_forward(mlp: Mlp, x) -> np.ndarray:
    """Evaluate the network on a vector or a batch of row vectors."""
    batch, single = mlp._as_batch(x)
    out, _ = mlp.forward_cache(batch)
    return out[0] if single else out


def mlp_backward(mlp: Mlp, x, upstream_grad) -> GradientTape:
    """Gradient of ``sum(upstream_grad * mlp(x))`` w.r.t. parameters and input.

    For a batch input the parameter gradients are summed over rows and the
    input gradient keeps one row per sample.
    """
    batch, single = mlp._as_batch(x)
    g = np.asarray(upstream_grad, dtype=np.float64)
    g = g[None, :] if g.ndim == 1 else g
    if g.shape != (batch.shape[0], mlp.n_out):
        raise DimensionError(f"upstream gradient must have shape ({batch.shape[0]}, {mlp.n_out})")
    _, cache = mlp.forward_cache(batch)
    gw, gb, gx = mlp.backward_cache(cache, g)
    return GradientTape(gw, gb, gx[0] if single else gx)


def pinball_loss(prediction, target, level):
    """Quantile (pinball) loss and its derivative w.r.t. the prediction.

    ``level * (target - prediction)`` when the target lies above the
    prediction, ``(1 - level) * (prediction - target)`` otherwise. At a tie
    the derivative takes the left value ``1 - level``.

    Works elementwise on arrays; returns ``(loss, grad)``.
    """
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    prediction = np.asarray(prediction, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    resid = target - prediction
    above = resid > 0
    loss = np.where(above, level * resid, (1.0 - level) * (-resid))
    grad = np.where(above, -level, 1.0 - level)
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


@dataclass
class Adam:
    """Adam optimizer state for a fixed list of parameter arrays."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: list, grads: list) -> None:
        """Apply one in-place update. Non-finite gradients reject the step."""
        if len(params) != len(grads):
            raise DimensionError("params and grads differ in length")
        for i, (p, g) in enumerate(zip(params, grads)):
            if p.shape != np.shape(g):
                raise DimensionError(f"parameter {i}: shape {p.shape} vs gradient {np.shape(g)}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(
                    f"parameter {i} received a non-finite gradient; step rejected "
                    f"(step count stays {self.step_count})")
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.epsilon)

    def state_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate, "beta1": self.beta1,
            "beta2": self.beta2, "epsilon": self.epsilon, "step_count": self.step_count,
        }


def optimizer_step(params: list, grads: list, state: Adam) -> Adam:
    """Functional spelling of :meth:`Adam.step`; updates ``params`` in place."""
    state.step(params, grads)
    return state
