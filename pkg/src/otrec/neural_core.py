"""Minimal dense feedforward network: forward pass, backprop, Adam.

Parameters are immutable values (arrays are marked read-only); every update
returns fresh objects.  All arithmetic is float64; float32 appears only at
file boundaries.  Inputs may be single vectors or (batch, dim) matrices;
batched backward sums parameter gradients over the batch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import NumericalError

ACTIVATIONS = ("relu", "linear", "softmax")

# Gradients mirror parameter structure: one (dW, db) pair per layer.
MlpGrads = tuple[tuple[np.ndarray, np.ndarray], ...]


@dataclass(frozen=True)
class Layer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
            raise ValueError(f"layer shape mismatch: weights {w.shape}, bias {b.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("layer parameters must be finite")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class MlpParams:
    layers: tuple[Layer, ...]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("network needs at least one layer")
        object.__setattr__(self, "layers", tuple(self.layers))
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ValueError(
                    f"adjacent layers incompatible: {prev.out_dim} -> {nxt.in_dim}"
                )
        for layer in self.layers[:-1]:
            if layer.activation == "softmax":
                raise ValueError("softmax is permitted only as the final activation")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim


def init_mlp(dims: Sequence[int], activations: Sequence[str], rng: np.random.Generator) -> MlpParams:
    """He-uniform init for relu layers, Glorot-uniform otherwise; zero biases."""
    if len(dims) != len(activations) + 1:
        raise ValueError("need len(dims) == len(activations) + 1")
    layers = []
    for fan_in, fan_out, act in zip(dims, dims[1:], activations):
        if act == "relu":
            limit = np.sqrt(6.0 / fan_in)
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append(Layer(w, np.zeros(fan_out), act))
    return MlpParams(tuple(layers))


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _apply_activation(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "softmax":
        return _softmax(z)
    return z


def _forward_trace(params: MlpParams, x: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Returns (inputs to each layer, pre-activations); x is (batch, in)."""
    inputs, pre = [], []
    a = x
    for layer in params.layers:
        inputs.append(a)
        z = a @ layer.weights.T + layer.bias
        pre.append(z)
        a = _apply_activation(z, layer.activation)
    inputs.append(a)  # final output stored as last "input"
    return inputs, pre


def _promote(x: np.ndarray, in_dim: int, what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != in_dim:
        raise ValueError(f"{what} has shape {x.shape}, expected (*, {in_dim})")
    return x, single


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Forward pass; accepts a vector or a (batch, in_dim) matrix."""
    x, single = _promote(x, params.in_dim, "input")
    if not np.all(np.isfinite(x)):
        raise ValueError("input must be finite")
    inputs, _ = _forward_trace(params, x)
    out = inputs[-1]
    return out[0] if single else out


def mlp_backward(
    params: MlpParams, x: np.ndarray, output_grad: np.ndarray
) -> tuple[MlpGrads, np.ndarray]:
    """Backprop the scalar loss whose gradient at the output is `output_grad`.

    Returns per-layer (dW, db) gradients (summed over the batch when inputs
    are batched) and the gradient with respect to the input.
    """
    x, single = _promote(x, params.in_dim, "input")
    g, g_single = _promote(output_grad, params.out_dim, "output_grad")
    if single != g_single or (not single and x.shape[0] != g.shape[0]):
        raise ValueError("input and output_grad batch shapes disagree")
    inputs, pre = _forward_trace(params, x)

    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(params.layers)  # type: ignore
    for li in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[li]
        z = pre[li]
        if layer.activation == "relu":
            dz = g * (z > 0.0)
        elif layer.activation == "softmax":
            s = _softmax(z)
            dz = s * (g - (g * s).sum(axis=-1, keepdims=True))
        else:
            dz = g
        grads[li] = (dz.T @ inputs[li], dz.sum(axis=0))
        g = dz @ layer.weights
    return tuple(grads), (g[0] if single else g)


@dataclass(frozen=True)
class AdamState:
    step: int
    m: MlpGrads
    v: MlpGrads
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def init_adam(
    params: MlpParams,
    learning_rate: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
) -> AdamState:
    zeros = tuple(
        (np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in params.layers
    )
    return AdamState(0, zeros, zeros, learning_rate, beta1, beta2, epsilon)


def adam_step(
    params: MlpParams, grads: MlpGrads, state: AdamState
) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam update; returns new parameters and state."""
    if len(grads) != len(params.layers):
        raise ValueError("gradient structure does not match parameters")
    for (dw, db), layer in zip(grads, params.layers):
        if dw.shape != layer.weights.shape or db.shape != layer.bias.shape:
            raise ValueError("gradient shapes do not match parameters")
        if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
            raise NumericalError("non-finite gradients: training diverged")

    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    new_layers, new_m, new_v = [], [], []
    for layer, (dw, db), (mw, mb), (vw, vb) in zip(params.layers, grads, state.m, state.v):
        mw = b1 * mw + (1 - b1) * dw
        mb = b1 * mb + (1 - b1) * db
        vw = b2 * vw + (1 - b2) * dw**2
        vb = b2 * vb + (1 - b2) * db**2
        w = layer.weights - state.learning_rate * (mw / corr1) / (np.sqrt(vw / corr2) + state.epsilon)
        b = layer.bias - state.learning_rate * (mb / corr1) / (np.sqrt(vb / corr2) + state.epsilon)
        new_layers.append(Layer(w, b, layer.activation))
        new_m.append((mw, mb))
        new_v.append((vw, vb))
    return MlpParams(tuple(new_layers)), replace(
        state, step=t, m=tuple(new_m), v=tuple(new_v)
    )


def gradient_check(
    params: MlpParams,
    loss_fn: Callable[[MlpParams], tuple[float, MlpGrads]],
    h: float,
) -> float:
    """Max relative error between analytic gradients and central differences.

    `loss_fn(params)` must return the scalar loss and its analytic gradients;
    only the loss value is used at perturbed points.  Relative error per
    coordinate is |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    _, grads = loss_fn(params)

    def perturbed(li: int, which: int, index: tuple, delta: float) -> MlpParams:
        layers = list(params.layers)
        layer = layers[li]
        if which == 0:
            w = layer.weights.copy()
            w[index] += delta
            layers[li] = Layer(w, layer.bias, layer.activation)
        else:
            b = layer.bias.copy()
            b[index] += delta
            layers[li] = Layer(layer.weights, b, layer.activation)
        return MlpParams(tuple(layers))

    worst = 0.0
    for li, (dw, db) in enumerate(grads):
        for which, grad in ((0, dw), (1, db)):
            for index in np.ndindex(grad.shape):
                plus, _ = loss_fn(perturbed(li, which, index, h))
                minus, _ = loss_fn(perturbed(li, which, index, -h))
                numeric = (plus - minus) / (2.0 * h)
                analytic = grad[index]
                err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
                worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------
# JSON parameter documents: row-major weights, bias arrays, activation names.
# --------------------------------------------------------------------------


def params_to_json(params: MlpParams) -> dict:
    return {
        "layers": [
            {
                "weights": layer.weights.tolist(),
                "bias": layer.bias.tolist(),
                "activation": layer.activation,
            }
            for layer in params.layers
        ]
    }


def params_from_json(doc: dict) -> MlpParams:
    layers = tuple(
        Layer(np.array(l["weights"], dtype=np.float64), np.array(l["bias"], dtype=np.float64), l["activation"])
        for l in doc["layers"]
    )
    return MlpParams(layers)


def save_params(params: MlpParams, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(params_to_json(params), fh)
        fh.write("\n")


def load_params(path: str | Path) -> MlpParams:
    with open(path, encoding="utf-8") as fh:
        return params_from_json(json.load(fh))
