"""Multi-layer perceptrons, the Adam update rule and model serialization.

Weights are stored [out, in]; a forward pass is x @ W.T + b followed by the
layer activation. Initialization is Xavier-uniform for tanh/identity layers
and He-uniform for relu.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, backward, exp, gather, log, matmul
from .autodiff import reduce_mean, reduce_sum, relu, sub, tanh

__all__ = [
    "ACTIVATIONS",
    "TrainConfig",
    "TrainingDiverged",
    "Layer",
    "Mlp",
    "adam_step",
    "cross_entropy",
    "train_step",
    "serialize_mlp",
    "deserialize_mlp",
    "FRAGMENT_MAGIC",
]

ACTIVATIONS = ("identity", "tanh", "relu")
_ACT_TAG = {name: tag for tag, name in enumerate(ACTIVATIONS)}

FRAGMENT_MAGIC = b"NNSB"
_FRAGMENT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """A training loss became non-finite."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 128
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        for name in ("adam_beta1", "adam_beta2"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must be in (0, 1)")
        if not self.adam_eps > 0:
            raise ValueError("adam_eps must be > 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in 64 bits")


class Layer:
    def __init__(self, weight: Tensor, bias: Tensor, activation: str):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if weight.values.ndim != 2 or bias.values.ndim != 1:
            raise ValueError("weight must be 2-D [out, in] and bias 1-D [out]")
        if weight.values.shape[0] != bias.values.shape[0]:
            raise ValueError("weight rows and bias length disagree")
        self.weight = weight
        self.bias = bias
        self.activation = activation

    @property
    def out_dim(self) -> int:
        return self.weight.values.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.values.shape[1]


class Mlp:
    """A stack of affine layers with per-parameter Adam state."""

    def __init__(self, layers: list[Layer]):
        if not layers:
            raise ValueError("Mlp needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ValueError(
                    f"layer dimensions do not chain: {prev.out_dim} -> {nxt.in_dim}"
                )
        self.layers = layers
        self.step_count = 0
        self._moments = [
            (np.zeros_like(p.values), np.zeros_like(p.values)) for p in self.parameters()
        ]

    @classmethod
    def create(cls, sizes, activations, rng: np.random.Generator) -> "Mlp":
        """Build from layer sizes [in, h1, ..., out] and one activation per layer."""
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        layers = []
        for fan_in, fan_out, act in zip(sizes, sizes[1:], activations):
            if act == "relu":
                limit = np.sqrt(6.0 / fan_in)
            else:
                limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            layers.append(
                Layer(
                    Tensor(w, requires_grad=True),
                    Tensor(np.zeros(fan_out), requires_grad=True),
                    act,
                )
            )
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> list[Tensor]:
        params = []
        for layer in self.layers:
            params.append(layer.weight)
            params.append(layer.bias)
        return params

    def forward(self, x) -> Tensor:
        """Recorded forward pass; x is [batch, in_dim]."""
        h = x if isinstance(x, Tensor) else Tensor(x)
        if h.values.ndim != 2 or h.values.shape[1] != self.in_dim:
            raise ValueError(
                f"expected input [batch, {self.in_dim}], got {h.values.shape}"
            )
        for layer in self.layers:
            h = add(matmul(h, layer.weight, transpose_b=True), layer.bias)
            if layer.activation == "tanh":
                h = tanh(h)
            elif layer.activation == "relu":
                h = relu(h)
        return h

    def forward_values(self, x: np.ndarray) -> np.ndarray:
        """Plain numpy forward pass (no graph); same arithmetic as forward."""
        h = np.asarray(x, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.in_dim:
            raise ValueError(f"expected input [batch, {self.in_dim}], got {h.shape}")
        for layer in self.layers:
            h = h @ layer.weight.values.T + layer.bias.values
            if layer.activation == "tanh":
                h = np.tanh(h)
            elif layer.activation == "relu":
                h = np.maximum(h, 0.0)
        return h

    def checksum_source(self) -> bytes:
        return serialize_mlp(self)


def adam_step(mlp: Mlp, grads: dict[int, np.ndarray], cfg: TrainConfig) -> Mlp:
    """One Adam update over all parameters of ``mlp``; mutates in place.

    ``grads`` is the node_id -> gradient map from autodiff.backward and must
    cover every parameter.
    """
    mlp.step_count += 1
    t = mlp.step_count
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    for i, p in enumerate(mlp.parameters()):
        g = grads.get(p.node_id)
        if g is None:
            raise ValueError(f"missing gradient for parameter {i} (node {p.node_id})")
        m, v = mlp._moments[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.values -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return mlp


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy; the row max is subtracted as a constant."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.values.shape
    row_max = logits.values.max(axis=1, keepdims=True)
    shifted = sub(logits, row_max)
    lse = log(reduce_sum(exp(shifted), axis=1))
    picked = gather(shifted, np.arange(n) * k + labels)
    return reduce_mean(sub(lse, picked))


def train_step(mlp: Mlp, loss: Tensor, cfg: TrainConfig) -> float:
    """backward + adam_step + divergence check; returns the loss value."""
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDiverged(f"loss became {value}")
    adam_step(mlp, backward(loss), cfg)
    return value


# --- checkpoint fragment format ---
# magic "NNSB" | u32 version | u32 n_layers
# per layer: u32 rows | u32 cols | u8 activation tag
#            rows*cols f64 weights (row-major) | rows f64 biases
# all integers and floats little-endian


def serialize_mlp(mlp: Mlp) -> bytes:
    parts = [FRAGMENT_MAGIC, struct.pack("<II", _FRAGMENT_VERSION, len(mlp.layers))]
    for layer in mlp.layers:
        rows, cols = layer.weight.values.shape
        parts.append(struct.pack("<IIB", rows, cols, _ACT_TAG[layer.activation]))
        parts.append(np.ascontiguousarray(layer.weight.values, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.bias.values, dtype="<f8").tobytes())
    return b"".join(parts)


def deserialize_mlp(data: bytes) -> Mlp:
    if data[:4] != FRAGMENT_MAGIC:
        raise ValueError("bad fragment magic")
    version, n_layers = struct.unpack_from("<II", data, 4)
    if version != _FRAGMENT_VERSION:
        raise ValueError(f"unsupported fragment version {version}")
    offset = 12
    layers = []
    for _ in range(n_layers):
        rows, cols, tag = struct.unpack_from("<IIB", data, offset)
        offset += 9
        if tag >= len(ACTIVATIONS):
            raise ValueError(f"unknown activation tag {tag}")
        w = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=offset)
        offset += rows * cols * 8
        b = np.frombuffer(data, dtype="<f8", count=rows, offset=offset)
        offset += rows * 8
        layers.append(
            Layer(
                Tensor(w.reshape(rows, cols).copy(), requires_grad=True),
                Tensor(b.copy(), requires_grad=True),
                ACTIVATIONS[tag],
            )
        )
    if offset != len(data):
        raise ValueError("trailing bytes in fragment")
    return Mlp(layers)
