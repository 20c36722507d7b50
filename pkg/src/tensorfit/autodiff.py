"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

The op set is exactly what the attention models need: matrix multiply,
broadcast add, scaling by a constant, row-wise softmax, layer normalization,
rectified-linear, concatenation, reshape, and a mean-squared-error reduction.

Graphs are built define-by-run: every op accepts plain ndarrays, Nodes, or a
mix, and returns a Node whenever a Node (or Parameter) is involved and
gradients are enabled. Inside ``no_grad()`` the same ops run value-only,
which is the inference and finite-difference fast path. ``backward(loss)``
zeroes the gradient buffers of every reachable trainable Parameter and then
accumulates gradients in reverse topological order, each node visited once,
with additive accumulation at fan-out.
"""

from __future__ import annotations

import contextlib
import json
import os
from typing import Callable

import numpy as np

LAYERNORM_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes incompatible with the op; message names the op."""


class GraphStateError(RuntimeError):
    """Backward invoked on an unusable graph (non-scalar loss, or a graph
    whose backward pass already ran)."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run ops value-only: no graph, raw ndarray results."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    """One value in the computation graph.

    Holds the forward activation, references to parent nodes, and a closure
    computing the parents' gradient contributions from this node's gradient.
    """

    __slots__ = ("value", "grad", "parents", "op", "_vjp", "_backward_done")

    def __init__(self, value: np.ndarray, parents: tuple = (),
                 op: str = "leaf", vjp: Callable | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.op = op
        self._vjp = vjp
        self._backward_done = False

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"


class Parameter(Node):
    """A named trainable leaf with a persistent gradient buffer.

    ``init`` tags how the parameter is (re)initialized: "weight" draws from
    the fan-in-scaled normal, "zero" and "one" are constants.
    """

    __slots__ = ("name", "trainable", "init")

    def __init__(self, name: str, shape: tuple[int, ...],
                 init: str = "weight", trainable: bool = True):
        if init not in ("weight", "zero", "one"):
            raise ValueError(f"unknown init kind {init!r}")
        value = np.ones(shape) if init == "one" else np.zeros(shape)
        super().__init__(value, op="parameter")
        self.name = name
        self.trainable = trainable
        self.init = init
        self.grad = np.zeros(shape)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def _value(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def _tracing(*args) -> bool:
    return _grad_enabled and any(isinstance(a, Node) for a in args)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _node(value, parents, op, vjp) -> Node:
    kept = tuple(p if isinstance(p, Node) else None for p in parents)
    return Node(value, parents=kept, op=op, vjp=vjp)


def matmul(a, b, transpose_b: bool = False) -> Node | np.ndarray:
    """a @ b (or a @ swapaxes(b, -1, -2)), with numpy stacking semantics."""
    av, bv = _value(a), _value(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, "
                         f"got {av.shape} and {bv.shape}")
    bt = np.swapaxes(bv, -1, -2) if transpose_b else bv
    if av.shape[-1] != bt.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {av.shape} @ "
                         f"{bt.shape}" + (" (transposed)" if transpose_b else ""))
    out = av @ bt
    if not _tracing(a, b):
        return out

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bt, -1, -2), av.shape)
        gb = np.swapaxes(av, -1, -2) @ g
        if transpose_b:
            gb = np.swapaxes(gb, -1, -2)
        return ga, _unbroadcast(gb, bv.shape)

    return _node(out, (a, b), "matmul", vjp)


def add(a, b) -> Node | np.ndarray:
    av, bv = _value(a), _value(b)
    try:
        out = av + bv
    except ValueError as exc:
        raise ShapeError(f"add: {av.shape} and {bv.shape} do not broadcast") from exc
    if not _tracing(a, b):
        return out

    def vjp(g):
        return _unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)

    return _node(out, (a, b), "add", vjp)


def scale(a, c: float) -> Node | np.ndarray:
    av = _value(a)
    out = av * c
    if not _tracing(a):
        return out
    return _node(out, (a,), "scale", lambda g: (g * c,))


def relu(a) -> Node | np.ndarray:
    av = _value(a)
    out = np.maximum(av, 0.0)
    if not _tracing(a):
        return out
    mask = av > 0
    return _node(out, (a,), "relu", lambda g: (g * mask,))


def softmax(a) -> Node | np.ndarray:
    """Row-wise softmax over the last axis, max-subtracted for stability."""
    av = _value(a)
    shifted = av - av.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    if not _tracing(a):
        return out

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _node(out, (a,), "softmax", vjp)


def layernorm(a, gamma, beta, eps: float = LAYERNORM_EPS) -> Node | np.ndarray:
    """Normalize the last axis to zero mean and unit variance, then apply the
    learnable affine gamma * xhat + beta."""
    av, gv, bv = _value(a), _value(gamma), _value(beta)
    d = av.shape[-1]
    if gv.shape != (d,) or bv.shape != (d,):
        raise ShapeError(f"layernorm: affine shapes {gv.shape}/{bv.shape} "
                         f"do not match feature width {d}")
    mu = av.mean(axis=-1, keepdims=True)
    xc = av - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gv * xhat + bv
    if not _tracing(a, gamma, beta):
        return out

    def vjp(g):
        gxhat = g * gv
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(av.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(out, (a, gamma, beta), "layernorm", vjp)


def concat(a, b, axis: int = -1) -> Node | np.ndarray:
    av, bv = _value(a), _value(b)
    if av.ndim != bv.ndim:
        raise ShapeError(f"concat: ranks differ, {av.shape} vs {bv.shape}")
    out = np.concatenate([av, bv], axis=axis)
    if not _tracing(a, b):
        return out
    split = av.shape[axis]

    def vjp(g):
        ga, gb = np.split(g, [split], axis=axis)
        return ga, gb

    return _node(out, (a, b), "concat", vjp)


def reshape(a, shape: tuple[int, ...]) -> Node | np.ndarray:
    av = _value(a)
    try:
        out = av.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {av.shape} as {shape}") from exc
    if not _tracing(a):
        return out
    return _node(out, (a,), "reshape", lambda g: (g.reshape(av.shape),))


def mse(pred, ref) -> Node | np.ndarray:
    """Squared error summed over sequence and channels, averaged over the
    leading batch axis when the input is 3-D."""
    pv, rv = _value(pred), _value(ref)
    if pv.shape != rv.shape:
        raise ShapeError(f"mse: shapes differ, {pv.shape} vs {rv.shape}")
    batch = pv.shape[0] if pv.ndim == 3 else 1
    diff = pv - rv
    out = np.asarray(float(np.sum(diff * diff)) / batch)
    if not _tracing(pred, ref):
        return out

    def vjp(g):
        gd = (2.0 / batch) * g * diff
        return gd, -gd

    return _node(out, (pred, ref), "mse", vjp)


def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p is not None and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(parameter) into every reachable trainable
    Parameter's ``grad`` buffer (zeroed first). The loss must be scalar, and
    a graph can only be walked once."""
    if not isinstance(loss, Node):
        raise GraphStateError("backward needs a graph Node; got a plain value "
                              "(was the forward pass run under no_grad?)")
    if loss.value.ndim != 0 and loss.value.size != 1:
        raise GraphStateError(f"loss must be scalar, got shape {loss.value.shape}")
    if loss._backward_done:
        raise GraphStateError("backward already ran on this graph; "
                              "rebuild the graph with a fresh forward pass")
    loss._backward_done = True

    order = _toposort(loss)
    for node in order:
        if isinstance(node, Parameter) and node.trainable:
            node.grad[...] = 0.0
        elif not isinstance(node, Parameter):
            node.grad = None

    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node.grad is None or node._vjp is None:
            continue
        for parent, g in zip(node.parents, node._vjp(node.grad)):
            if parent is None:
                continue
            if isinstance(parent, Parameter):
                if parent.trainable:
                    parent.grad += g
            elif parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                parent.grad = parent.grad + g


# --- parameter checkpoints ---------------------------------------------------

CHECKPOINT_FORMAT = "tensorfit-checkpoint-v1"


def save_checkpoint(path: str | os.PathLike, params, extra: dict | None = None) -> None:
    """Single-file checkpoint: one JSON manifest line (names, shapes, and any
    ``extra`` metadata) followed by the concatenated little-endian float64
    payload in manifest order. Written atomically."""
    if isinstance(params, dict):
        items = list(params.items())
    else:
        items = [(p.name, p.value) for p in params]
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "params": [{"name": name, "shape": list(np.shape(v))} for name, v in items],
        "extra": extra or {},
    }
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(json.dumps(manifest).encode() + b"\n")
        for _, v in items:
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        manifest = json.loads(f.readline().decode())
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        values: dict[str, np.ndarray] = {}
        for entry in manifest["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = np.frombuffer(f.read(count * 8), dtype="<f8", count=count)
            values[entry["name"]] = buf.reshape(shape).astype(np.float64)
    return values, manifest.get("extra", {})
