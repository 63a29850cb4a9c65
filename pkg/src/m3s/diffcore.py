"""Small define-by-run reverse-mode autodiff over dense float64 arrays.

A :class:`Graph` records operations in append order.  Every operation returns
an integer node id; :meth:`Graph.backward` walks the record in exact reverse
order and accumulates adjoints.  Graphs are cheap and meant to be rebuilt for
every forward pass.

Broadcasting is limited to one case: in ``add``/``sub`` one operand may lack
the leading batch axis of the other (e.g. a bias row added to a batch).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

Tensor = np.ndarray


class DiffError(ValueError):
    pass


class ShapeMismatch(DiffError):
    pass


class NonFiniteInput(DiffError):
    pass


class NonScalarRoot(DiffError):
    pass


class EmptyBatch(DiffError):
    pass


def as_tensor(value) -> Tensor:
    """Return a read-only float64 copy of ``value``."""
    arr = np.array(value, dtype=np.float64)
    arr.setflags(write=False)
    return arr


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInput(f"non-finite values in {what}")


@dataclass
class _Node:
    kind: str
    inputs: tuple[int, ...]
    value: Tensor
    extra: dict = field(default_factory=dict)


class Graph:
    """Append-only operation record for a single forward/backward pass."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def value(self, node: int) -> Tensor:
        return self.nodes[node].value

    def shape(self, node: int) -> tuple[int, ...]:
        return self.nodes[node].value.shape

    def _push(self, kind, inputs, value, **extra) -> int:
        value = np.asarray(value, dtype=np.float64)
        _check_finite(value, f"output of {kind}")
        value.setflags(write=False)
        self.nodes.append(_Node(kind, tuple(inputs), value, extra))
        return len(self.nodes) - 1

    # leaves

    def leaf(self, value, kind: str = "param") -> int:
        arr = np.array(value, dtype=np.float64)
        if arr.size == 0:
            raise EmptyBatch(f"zero-size {kind} of shape {arr.shape}")
        _check_finite(arr, kind)
        return self._push(kind, (), arr)

    def param(self, value) -> int:
        return self.leaf(value, "param")

    def const(self, value) -> int:
        return self.leaf(value, "const")

    # operations

    def matmul(self, a: int, b: int) -> int:
        x, y = self.value(a), self.value(b)
        if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
            raise ShapeMismatch(f"matmul {x.shape} @ {y.shape}")
        return self._push("matmul", (a, b), x @ y)

    def _broadcast_ok(self, x: np.ndarray, y: np.ndarray) -> bool:
        if x.shape == y.shape:
            return True
        if x.ndim == y.ndim + 1 and x.shape[1:] == y.shape:
            return True
        return y.ndim == x.ndim + 1 and y.shape[1:] == x.shape

    def add(self, a: int, b: int) -> int:
        x, y = self.value(a), self.value(b)
        if not self._broadcast_ok(x, y):
            raise ShapeMismatch(f"add {x.shape} + {y.shape}")
        return self._push("add", (a, b), x + y)

    def sub(self, a: int, b: int) -> int:
        x, y = self.value(a), self.value(b)
        if not self._broadcast_ok(x, y):
            raise ShapeMismatch(f"sub {x.shape} - {y.shape}")
        return self._push("sub", (a, b), x - y)

    def mul(self, a: int, b: int) -> int:
        """Elementwise product of two equally shaped nodes."""
        x, y = self.value(a), self.value(b)
        if x.shape != y.shape:
            raise ShapeMismatch(f"mul {x.shape} * {y.shape}")
        return self._push("mul", (a, b), x * y)

    def scale(self, a: int, c: float) -> int:
        c = float(c)
        if not np.isfinite(c):
            raise NonFiniteInput("non-finite scale factor")
        return self._push("scale", (a,), self.value(a) * c, c=c)

    def relu(self, a: int) -> int:
        return self._push("relu", (a,), np.maximum(self.value(a), 0.0))

    def tanh(self, a: int) -> int:
        return self._push("tanh", (a,), np.tanh(self.value(a)))

    def concat(self, nodes: Sequence[int]) -> int:
        """Concatenate along the last axis."""
        vals = [self.value(n) for n in nodes]
        if not vals:
            raise ShapeMismatch("concat of nothing")
        lead = vals[0].shape[:-1]
        if any(v.ndim == 0 or v.shape[:-1] != lead for v in vals):
            raise ShapeMismatch(f"concat {[v.shape for v in vals]}")
        sizes = [v.shape[-1] for v in vals]
        return self._push("concat", nodes, np.concatenate(vals, axis=-1), sizes=sizes)

    def sum(self, a: int) -> int:
        return self._push("sum", (a,), np.sum(self.value(a)))

    def mean(self, a: int) -> int:
        x = self.value(a)
        if x.size == 0:
            raise EmptyBatch("mean of empty tensor")
        return self._push("mean", (a,), np.mean(x))

    def square(self, a: int) -> int:
        return self._push("square", (a,), np.square(self.value(a)))

    def log(self, a: int) -> int:
        x = self.value(a)
        if np.any(x <= 0.0):
            raise NonFiniteInput("log of non-positive value")
        return self._push("log", (a,), np.log(x))

    def softmax(self, a: int) -> int:
        """Softmax along the last axis."""
        x = self.value(a)
        if x.ndim == 0:
            raise ShapeMismatch("softmax of a scalar")
        e = np.exp(x - np.max(x, axis=-1, keepdims=True))
        return self._push("softmax", (a,), e / np.sum(e, axis=-1, keepdims=True))

    def log_softmax(self, a: int) -> int:
        x = self.value(a)
        if x.ndim == 0:
            raise ShapeMismatch("log_softmax of a scalar")
        shifted = x - np.max(x, axis=-1, keepdims=True)
        out = shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
        return self._push("log_softmax", (a,), out)

    # reverse pass

    def backward(self, root: int) -> dict[int, Tensor]:
        """Adjoints of ``root`` with respect to every node in the graph.

        Nodes that ``root`` does not depend on get zero gradients.
        """
        if self.value(root).size != 1:
            raise NonScalarRoot(f"root has shape {self.shape(root)}")
        grads: list[np.ndarray] = [np.zeros_like(n.value) for n in self.nodes]
        grads[root] = np.ones_like(self.nodes[root].value)
        for i in range(root, -1, -1):
            node = self.nodes[i]
            if not node.inputs:
                continue
            g = grads[i]
            for j, contrib in zip(node.inputs, self._vjp(node, g)):
                grads[j] = grads[j] + _unbroadcast(contrib, grads[j].shape)
        for g in grads:
            g.setflags(write=False)
        return dict(enumerate(grads))

    def _vjp(self, node: _Node, g: np.ndarray) -> list[np.ndarray]:
        kind = node.kind
        ins = [self.nodes[j].value for j in node.inputs]
        if kind == "matmul":
            x, y = ins
            return [g @ y.T, x.T @ g]
        if kind == "add":
            return [g, g]
        if kind == "sub":
            return [g, -g]
        if kind == "mul":
            return [g * ins[1], g * ins[0]]
        if kind == "scale":
            return [g * node.extra["c"]]
        if kind == "relu":
            return [g * (ins[0] > 0.0)]
        if kind == "tanh":
            return [g * (1.0 - node.value**2)]
        if kind == "concat":
            cuts = np.cumsum(node.extra["sizes"])[:-1]
            return np.split(g, cuts, axis=-1)
        if kind == "sum":
            return [np.broadcast_to(g, ins[0].shape).copy()]
        if kind == "mean":
            return [np.broadcast_to(g / ins[0].size, ins[0].shape).copy()]
        if kind == "square":
            return [2.0 * ins[0] * g]
        if kind == "log":
            return [g / ins[0]]
        if kind == "softmax":
            s = node.value
            return [s * (g - np.sum(g * s, axis=-1, keepdims=True))]
        if kind == "log_softmax":
            s = np.exp(node.value)
            return [g - s * np.sum(g, axis=-1, keepdims=True)]
        raise AssertionError(f"no vjp for {kind}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if g.ndim == len(shape) + 1 and g.shape[1:] == shape:
        return g.sum(axis=0)
    raise ShapeMismatch(f"gradient {g.shape} does not fit {shape}")


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    worst: tuple[str, tuple[int, ...]] | None
    per_param: dict[str, float]

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(
    f: Callable[[Graph, Mapping[str, int]], int],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare backward gradients of ``f`` with central finite differences.

    ``f(graph, ids)`` must build a scalar root from the parameter nodes
    ``ids[name]`` and return its id.  The per-coordinate error is
    ``|ad - fd| / max(|ad|, |fd|, floor)``; ``floor`` keeps coordinates whose
    true gradient is ~0 from turning rounding noise into huge ratios.
    """
    if not 0.0 < h <= 1e-2:
        raise ValueError(f"step h={h} outside (0, 1e-2]")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(values):
        g = Graph()
        ids = {k: g.param(v) for k, v in values.items()}
        root = f(g, ids)
        return g, ids, root

    g, ids, root = evaluate(params)
    grads = g.backward(root)

    per_param: dict[str, float] = {}
    worst, worst_err = None, 0.0
    for name, value in params.items():
        analytic = grads[ids[name]]
        err_max = 0.0
        for idx in np.ndindex(value.shape):
            saved = value[idx]
            value[idx] = saved + h
            gp, _, rp = evaluate(params)
            value[idx] = saved - h
            gm, _, rm = evaluate(params)
            value[idx] = saved
            fd = (gp.value(rp).item() - gm.value(rm).item()) / (2.0 * h)
            ad = analytic[idx]
            err = abs(ad - fd) / max(abs(ad), abs(fd), floor)
            if err > err_max:
                err_max = err
            if err > worst_err or worst is None:
                worst, worst_err = (name, idx), max(err, worst_err)
        per_param[name] = err_max
    return GradCheckReport(worst_err, tol, worst, per_param)
