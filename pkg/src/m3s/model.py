"""Late-fusion network over audio, video and language feature vectors.

Each modality runs through its own MLP encoder; encoder outputs are
concatenated and passed through a fusion MLP and a linear head.  Parameters
are a plain ``dict`` of float64 arrays whose insertion order is the canonical
enumeration order.
"""

from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .diffcore import Graph, ShapeMismatch

MODALITIES = ("audio", "video", "language")

Parameters = dict[str, np.ndarray]


class LabelOutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    dims: tuple[int, int, int] = (20, 20, 30)
    encoder_hidden: tuple[tuple[int, ...], ...] = ((16,), (16,), (16,))
    fusion_hidden: tuple[int, ...] = (32,)
    head: str = "regression"
    num_classes: int = 1
    activation: str = "relu"

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) < 1 for d in self.dims):
            raise ValueError(f"modality dims must be three positive ints, got {self.dims}")
        if len(self.encoder_hidden) != 3:
            raise ValueError("encoder_hidden needs one entry per modality")
        if self.head not in ("regression", "classification"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.head == "classification" and self.num_classes < 2:
            raise ValueError("classification needs num_classes >= 2")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        sizes = [h for enc in self.encoder_hidden for h in enc] + list(self.fusion_hidden)
        if any(int(h) < 1 for h in sizes):
            raise ValueError("hidden sizes must be positive")

    @property
    def out_dim(self) -> int:
        return 1 if self.head == "regression" else self.num_classes

    def layer_shapes(self) -> list[tuple[str, int, int]]:
        """(prefix, fan_in, fan_out) for every dense layer in enumeration order."""
        layers = []
        enc_out = 0
        for m, dim, hidden in zip(MODALITIES, self.dims, self.encoder_hidden):
            fan_in = dim
            for i, h in enumerate(hidden):
                layers.append((f"{m}.{i}", fan_in, h))
                fan_in = h
            enc_out += fan_in
        fan_in = enc_out
        for i, h in enumerate(self.fusion_hidden):
            layers.append((f"fusion.{i}", fan_in, h))
            fan_in = h
        layers.append(("head", fan_in, self.out_dim))
        return layers


def init_params(config: ModelConfig, seed: int) -> Parameters:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params: Parameters = {}
    for prefix, fan_in, fan_out in config.layer_shapes():
        s = math.sqrt(6.0 / (fan_in + fan_out))
        params[f"{prefix}.W"] = rng.uniform(-s, s, size=(fan_in, fan_out))
        params[f"{prefix}.b"] = np.zeros(fan_out)
    return params


def clone(params: Mapping[str, np.ndarray]) -> Parameters:
    return {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}


def zeros_like(params: Mapping[str, np.ndarray]) -> Parameters:
    return {k: np.zeros_like(v) for k, v in params.items()}


def _activate(g: Graph, node: int, activation: str) -> int:
    return g.relu(node) if activation == "relu" else g.tanh(node)


def build_forward(
    g: Graph,
    config: ModelConfig,
    ids: Mapping[str, int],
    features: tuple[np.ndarray, np.ndarray, np.ndarray],
) -> int:
    """Add the network to ``g``; returns the (batch, out_dim) output node."""
    if len(features) != 3:
        raise ShapeMismatch("expected audio, video and language features")
    batch = None
    encoded = []
    for m, x, dim, hidden in zip(MODALITIES, features, config.dims, config.encoder_hidden):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != dim:
            raise ShapeMismatch(f"{m} features have shape {x.shape}, expected (n, {dim})")
        if batch is None:
            batch = x.shape[0]
        elif x.shape[0] != batch:
            raise ShapeMismatch("modalities disagree on batch size")
        h = g.const(x)
        for i in range(len(hidden)):
            h = g.add(g.matmul(h, ids[f"{m}.{i}.W"]), ids[f"{m}.{i}.b"])
            h = _activate(g, h, config.activation)
        encoded.append(h)
    h = g.concat(encoded)
    for i in range(len(config.fusion_hidden)):
        h = g.add(g.matmul(h, ids[f"fusion.{i}.W"]), ids[f"fusion.{i}.b"])
        h = _activate(g, h, config.activation)
    return g.add(g.matmul(h, ids["head.W"]), ids["head.b"])


def build_loss(g: Graph, config: ModelConfig, out: int, labels: np.ndarray) -> int:
    """Mean squared error (regression) or mean cross-entropy (classification)."""
    labels = np.asarray(labels)
    n = g.shape(out)[0]
    if labels.shape != (n,):
        raise ShapeMismatch(f"{labels.shape[0] if labels.ndim else 0} labels for {n} predictions")
    if config.head == "regression":
        diff = g.sub(out, g.const(labels.astype(np.float64).reshape(n, 1)))
        return g.mean(g.square(diff))
    classes = labels.astype(np.int64)
    if np.any(classes != labels) or np.any(classes < 0) or np.any(classes >= config.num_classes):
        raise LabelOutOfRange(f"class labels must lie in [0, {config.num_classes})")
    onehot = np.zeros((n, config.num_classes))
    onehot[np.arange(n), classes] = 1.0
    picked = g.sum(g.mul(g.log_softmax(out), g.const(onehot)))
    return g.scale(picked, -1.0 / n)


def forward(params: Parameters, config: ModelConfig, features) -> np.ndarray:
    """Predictions: shape (n,) for regression, (n, C) logits for classification."""
    g = Graph()
    ids = {k: g.param(v) for k, v in params.items()}
    out = g.value(build_forward(g, config, ids, features))
    return out[:, 0].copy() if config.head == "regression" else out.copy()


def loss_value(params: Parameters, config: ModelConfig, features, labels) -> float:
    g = Graph()
    ids = {k: g.param(v) for k, v in params.items()}
    return float(g.value(build_loss(g, config, build_forward(g, config, ids, features), labels)))


def loss_and_grads(params: Parameters, config: ModelConfig, features, labels):
    """Return ``(loss, grads)`` with ``grads`` keyed like ``params``."""
    g = Graph()
    ids = {k: g.param(v) for k, v in params.items()}
    root = build_loss(g, config, build_forward(g, config, ids, features), labels)
    adj = g.backward(root)
    return float(g.value(root)), {k: adj[i] for k, i in ids.items()}


def predict_labels(params: Parameters, config: ModelConfig, features) -> np.ndarray:
    out = forward(params, config, features)
    return out if config.head == "regression" else np.argmax(out, axis=1)


# Checkpoint format (text, UTF-8):
#   line 1: "m3s-params v1 <count>"
#   then per tensor, in enumeration order:
#     "<name> <ndim> <d0> ... <dk>"
#     one line of space-separated values, each repr() of a float64
# repr() round-trips float64 exactly.

_MAGIC = "m3s-params v1"


def dump_params(params: Mapping[str, np.ndarray]) -> str:
    buf = io.StringIO()
    buf.write(f"{_MAGIC} {len(params)}\n")
    for name, value in params.items():
        if any(c.isspace() for c in name):
            raise ValueError(f"parameter name {name!r} contains whitespace")
        value = np.asarray(value, dtype=np.float64)
        buf.write(" ".join([name, str(value.ndim), *map(str, value.shape)]) + "\n")
        buf.write(" ".join(repr(float(x)) for x in value.ravel()) + "\n")
    return buf.getvalue()


def parse_params(text: str) -> Parameters:
    lines = text.splitlines()
    head = lines[0].rsplit(" ", 1) if lines else []
    if len(head) != 2 or head[0] != _MAGIC:
        raise ValueError("not an m3s parameter checkpoint")
    count = int(head[1])
    if len(lines) != 1 + 2 * count:
        raise ValueError(f"expected {count} tensors, found {(len(lines) - 1) / 2}")
    params: Parameters = {}
    for i in range(count):
        meta = lines[1 + 2 * i].split()
        name, ndim = meta[0], int(meta[1])
        shape = tuple(int(d) for d in meta[2 : 2 + ndim])
        values = [float(x) for x in lines[2 + 2 * i].split()]
        if len(values) != math.prod(shape):
            raise ValueError(f"tensor {name}: {len(values)} values for shape {shape}")
        params[name] = np.array(values, dtype=np.float64).reshape(shape)
    return params


def save_params(params: Mapping[str, np.ndarray], path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(dump_params(params))
    os.replace(tmp, path)


def load_params(path) -> Parameters:
    with open(path, encoding="utf-8") as fh:
        return parse_params(fh.read())
