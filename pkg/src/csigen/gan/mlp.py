"""Dense multilayer perceptrons: parameter containers, a fast forward pass
with cached pre-activations, the matching hand-written backward pass, and a
graph-building variant for the differentiation kernel.

The two backward routes (hand-written and :mod:`csigen.gan.autodiff`) are
independent implementations; the test suite checks both against central
finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from csigen.gan import autodiff as ad

ACTIVATIONS = ("relu", "linear")


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError("bias width must match the weight matrix output width")


@dataclass
class MlpParams:
    layers: list[DenseLayer]

    def __post_init__(self) -> None:
        for first, second in zip(self.layers, self.layers[1:]):
            if second.weights.shape[1] != first.weights.shape[0]:
                raise ValueError(
                    f"layer widths do not chain: {first.weights.shape} -> {second.weights.shape}"
                )

    @property
    def input_width(self) -> int:
        return self.layers[0].weights.shape[1]

    @property
    def output_width(self) -> int:
        return self.layers[-1].weights.shape[0]

    def num_parameters(self) -> int:
        return sum(l.weights.size + l.bias.size for l in self.layers)

    def copy(self) -> "MlpParams":
        return MlpParams(
            [DenseLayer(l.weights.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )

    def arrays(self) -> list[np.ndarray]:
        """Flat list [W0, b0, W1, b1, ...]; the canonical parameter order."""
        out: list[np.ndarray] = []
        for layer in self.layers:
            out.append(layer.weights)
            out.append(layer.bias)
        return out


def init_mlp(widths: list[int], activations: list[str], rng: np.random.Generator) -> MlpParams:
    """Glorot-uniform weights in +-sqrt(6 / (fan_in + fan_out)), zero biases."""
    if len(widths) != len(activations) + 1:
        raise ValueError("need one activation per layer")
    layers = []
    for fan_in, fan_out, activation in zip(widths[:-1], widths[1:], activations):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append(DenseLayer(weights, np.zeros(fan_out), activation))
    return MlpParams(layers)


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, list]:
    """Affine + activation chain; returns (output, cache) where the cache
    holds each layer's input and pre-activation for the backward pass."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[1] != params.input_width:
        raise ValueError(f"input width {x.shape[1]} != expected {params.input_width}")
    cache = []
    activation = x
    for layer in params.layers:
        pre = activation @ layer.weights.T + layer.bias
        cache.append((activation, pre))
        activation = np.maximum(pre, 0.0) if layer.activation == "relu" else pre
    return (activation[0] if squeeze else activation), cache


def mlp_backward(
    params: MlpParams, cache: list, adjoint: np.ndarray
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Exact reverse-mode pass from the cached forward.

    Returns (per-layer (dW, db) gradients, input gradient).  The ReLU
    subgradient at exactly 0 is 0.
    """
    if len(cache) != len(params.layers):
        raise ValueError("forward cache does not match the parameter stack")
    adjoint = np.asarray(adjoint, dtype=np.float64)
    squeeze = adjoint.ndim == 1
    if squeeze:
        adjoint = adjoint[None, :]
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(params.layers)
    for index in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[index]
        layer_input, pre = cache[index]
        if layer.activation == "relu":
            adjoint = adjoint * (pre > 0.0)
        grads[index] = (adjoint.T @ layer_input, adjoint.sum(axis=0))
        adjoint = adjoint @ layer.weights
    return grads, (adjoint[0] if squeeze else adjoint)


def mlp_vars(params: MlpParams) -> list[tuple[ad.Var, ad.Var]]:
    """Wrap parameters as graph leaves, one (weights, bias) pair per layer."""
    return [(ad.Var(layer.weights), ad.Var(layer.bias)) for layer in params.layers]


def mlp_apply(
    param_vars: list[tuple[ad.Var, ad.Var]], activations: list[str], x: ad.Var
) -> ad.Var:
    """Graph-building forward pass over wrapped parameters."""
    out = x
    for (weights, bias), activation in zip(param_vars, activations):
        out = ad.add(ad.matmul(out, ad.transpose(weights)), bias)
        if activation == "relu":
            out = ad.relu(out)
    return out


def flatten_grads(grads: list[tuple[np.ndarray, np.ndarray]]) -> list[np.ndarray]:
    out: list[np.ndarray] = []
    for dw, db in grads:
        out.append(dw)
        out.append(db)
    return out
