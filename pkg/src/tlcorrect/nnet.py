"""Fully connected network with hand-written backprop and Adam.

Each layer matrix stores its bias as row 0, so layer ``i`` has shape
``(fan_in + 1, fan_out)`` and maps ``h -> h @ W[1:] + W[0]``. The output layer
is therefore exactly the ``(d + 1) x n`` block the least-squares correction
solves for.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

FORMAT_VERSION = 1

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda z, a: 1.0 - a * a),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, a: (z > 0).astype(np.float64)),
    "sigmoid": (
        lambda z: 1.0 / (1.0 + np.exp(-z)),
        lambda z, a: a * (1.0 - a),
    ),
}


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    hidden_layers: int
    hidden_width: int
    activation: str = "tanh"
    residual: bool = True

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden_layers < 1 or self.hidden_width < 1:
            raise ShapeError(f"invalid architecture {self}")
        if self.activation not in _ACTIVATIONS:
            raise ShapeError(f"unknown activation {self.activation!r}")

    def layer_shapes(self) -> list[tuple[int, int]]:
        n, d, m = self.input_dim, self.hidden_width, self.hidden_layers
        sizes = [n] + [d] * m + [n]
        return [(sizes[i] + 1, sizes[i + 1]) for i in range(m + 1)]

    def n_params(self) -> int:
        return sum(a * b for a, b in self.layer_shapes())

    def to_dict(self) -> dict:
        return {
            "n": self.input_dim,
            "M": self.hidden_layers,
            "d": self.hidden_width,
            "activation": self.activation,
            "residual": self.residual,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(int(d["n"]), int(d["M"]), int(d["d"]), d["activation"], bool(d["residual"]))


@dataclass(frozen=True)
class NetParams:
    """Layer matrices ``W_0 .. W_M``; arrays are made read-only on construction."""

    layers: tuple[np.ndarray, ...]
    arch: Architecture

    def __post_init__(self):
        layers = []
        for i, (w, shape) in enumerate(zip(self.layers, self.arch.layer_shapes())):
            w = np.array(w, dtype=np.float64)
            if w.shape != shape:
                raise ShapeError(f"layer {i} has shape {w.shape}, architecture expects {shape}")
            w.flags.writeable = False
            layers.append(w)
        if len(self.layers) != self.arch.hidden_layers + 1:
            raise ShapeError(
                f"expected {self.arch.hidden_layers + 1} layers, got {len(self.layers)}"
            )
        object.__setattr__(self, "layers", tuple(layers))

    @property
    def M(self) -> int:
        return self.arch.hidden_layers

    def replace_layers(self, start: int, new_layers: Sequence[np.ndarray]) -> "NetParams":
        """Return a copy with layers ``start..M`` replaced."""
        return NetParams(tuple(self.layers[:start]) + tuple(new_layers), self.arch)

    def layer_bytes(self, i: int) -> bytes:
        return self.layers[i].tobytes()


@dataclass(frozen=True)
class FreezeSpec:
    """Layers ``0..split_index-1`` frozen, ``split_index..M`` trainable."""

    split_index: int

    def check(self, params: NetParams) -> None:
        if not 0 <= self.split_index <= params.M:
            raise ShapeError(f"split index {self.split_index} outside [0, {params.M}]")


@dataclass
class Cache:
    """Per-layer record from ``forward``: inputs ``h[i]`` and activations."""

    inputs: list  # h_0 = x, h_1 .. h_M post-activation
    pre: list  # pre-activations of hidden layers
    params_id: int = field(default=0)


def init_params(arch: Architecture, seed: int) -> NetParams:
    """Glorot-uniform weights with zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for rows, fan_out in arch.layer_shapes():
        fan_in = rows - 1
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = np.zeros((rows, fan_out))
        w[1:] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        layers.append(w)
    return NetParams(tuple(layers), arch)


def forward(params: NetParams, x) -> tuple[np.ndarray, Cache]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.arch.input_dim:
        raise ShapeError(f"input has {x.shape[-1]} components, network expects {params.arch.input_dim}")
    act, _ = _ACTIVATIONS[params.arch.activation]
    h = x
    inputs = [x]
    pre = []
    for w in params.layers[:-1]:
        z = h @ w[1:] + w[0]
        h = act(z)
        pre.append(z)
        inputs.append(h)
    w = params.layers[-1]
    y = h @ w[1:] + w[0]
    if params.arch.residual:
        y = y + x
    return y, Cache(inputs, pre, id(params))


def predict(params: NetParams, x) -> np.ndarray:
    return forward(params, x)[0]


def hidden_features(params: NetParams, x) -> np.ndarray:
    """Output of the last hidden layer."""
    return forward(params, x)[1].inputs[-1]


def backward(
    params: NetParams, cache: Cache, out_grad, start: int = 0, need_input_grad: bool = True
) -> tuple[list, np.ndarray | None]:
    """Reverse pass for the scalar ``sum(out_grad * y)``.

    Returns gradients for layers ``start..M`` (a list aligned with
    ``params.layers[start:]``) and, if requested, the gradient with respect to
    the input, identity path included. Batched inputs sum over the batch.
    """
    if cache.params_id != id(params) or len(cache.inputs) != len(params.layers):
        raise ShapeError("cache was not produced by forward() on these parameters")
    out_grad = np.asarray(out_grad, dtype=np.float64)
    _, dact = _ACTIVATIONS[params.arch.activation]
    M = params.M
    grads: list = [None] * (M + 1 - start)
    g = out_grad
    for i in range(M, -1, -1):
        h = cache.inputs[i]
        w = params.layers[i]
        if i >= start:
            gw = np.empty_like(w)
            if g.ndim == 1:
                gw[0] = g
                gw[1:] = np.outer(h, g)
            else:
                gw[0] = g.sum(axis=0)
                gw[1:] = h.T @ g
            grads[i - start] = gw
        if i == start and not need_input_grad:
            break
        g = g @ w[1:].T
        if i > 0:
            g = g * dact(cache.pre[i - 1], h)
    if not need_input_grad:
        return grads, None
    if params.arch.residual:
        g = g + out_grad
    return grads, g


@dataclass
class AdamState:
    first_moment: list
    second_moment: list
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_init(params: NetParams, freeze: FreezeSpec, lr: float = 1e-3, **kw) -> AdamState:
    freeze.check(params)
    trainable = params.layers[freeze.split_index:]
    return AdamState(
        [np.zeros_like(w) for w in trainable], [np.zeros_like(w) for w in trainable], 0, lr, **kw
    )


def adam_step(
    state: AdamState, params: NetParams, grads: Sequence[np.ndarray], freeze: FreezeSpec
) -> tuple[NetParams, AdamState]:
    """Bias-corrected Adam update of layers ``split_index..M``.

    ``grads`` may cover all layers or only the trainable ones. Frozen layers
    are passed through as the very same arrays.
    """
    freeze.check(params)
    ell = freeze.split_index
    n_train = params.M + 1 - ell
    if len(grads) == params.M + 1:
        grads = grads[ell:]
    if len(grads) != n_train or len(state.first_moment) != n_train:
        raise ShapeError(f"expected {n_train} trainable gradients, got {len(grads)}")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_m, new_v, new_layers = [], [], []
    for w, g, m, v in zip(params.layers[ell:], grads, state.first_moment, state.second_moment):
        if g.shape != w.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match layer {w.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_layers.append(w - state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon))
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(new_m, new_v, t, state.lr, b1, b2, state.epsilon)
    return params.replace_layers(ell, new_layers), new_state


# ---------------------------------------------------------------------------
# checkpoints

def params_to_dict(params: NetParams, seed=None, provenance=None) -> dict:
    layers = []
    for w in params.layers:
        layers.append(
            {
                "weights": [[float(v).hex() for v in row] for row in w[1:]],
                "bias": [float(v).hex() for v in w[0]],
            }
        )
    return {
        "format_version": FORMAT_VERSION,
        "arch": params.arch.to_dict(),
        "layers": layers,
        "seed": seed,
        "provenance": provenance or {},
    }


def params_from_dict(doc: dict) -> NetParams:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {doc.get('format_version')!r}")
    arch = Architecture.from_dict(doc["arch"])
    layers = []
    for entry in doc["layers"]:
        bias = np.array([float.fromhex(v) for v in entry["bias"]])
        weights = np.array([[float.fromhex(v) for v in row] for row in entry["weights"]])
        weights = weights.reshape(-1, bias.size)
        layers.append(np.vstack([bias[None, :], weights]))
    return NetParams(tuple(layers), arch)


def save_checkpoint(path, params: NetParams, seed=None, provenance=None) -> Path:
    path = Path(path)
    text = json.dumps(params_to_dict(params, seed, provenance), indent=1, sort_keys=True)
    path.write_text(text + "\n")
    return path


def load_checkpoint(path) -> tuple[NetParams, dict]:
    doc = json.loads(Path(path).read_text())
    return params_from_dict(doc), doc


def params_hash(params: NetParams) -> str:
    """SHA-256 over the architecture and the raw layer bytes."""
    import hashlib

    h = hashlib.sha256(json.dumps(params.arch.to_dict(), sort_keys=True).encode())
    for w in params.layers:
        h.update(w.tobytes())
    return h.hexdigest()
