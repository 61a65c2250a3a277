"""Reverse-mode autodiff over dense numpy buffers.

Tensors are immutable after creation except for their grad buffer. Every
operation validates that its output is finite; NaN/Inf raises NumericError
instead of propagating silently. Ops record Nodes onto their output tensors,
so the graph is topologically ordered by construction and can be replayed
backwards from any scalar loss.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionError, NumericError

DTYPES = {"f32": np.float32, "f64": np.float64}

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable node recording inside the block (inference / numeric probes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Node:
    """One recorded operation: tag, input tensors, output tensor, backward closure.

    backward_fn maps the incoming output gradient to a tuple of gradients
    aligned with `inputs` (None for inputs that need no gradient).
    """

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: Sequence["Tensor"], output: "Tensor",
                 backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn


class Tensor:
    """N-dimensional real array with optional grad buffer.

    data is a C-contiguous float32/float64 ndarray; grad, when present, has
    the same shape. Tensors produced by ops carry the Node that made them.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "node")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=None, _check: bool = True):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.node: Optional[Node] = None
        if _check and not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values in tensor {name or '<unnamed>'}")

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numel(self) -> int:
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name, _check=False)

    def __repr__(self):
        return (f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, "
                f"requires_grad={self.requires_grad}, name={self.name!r})")


def parameter(data, name: Optional[str] = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name, dtype=dtype)


def constant(data, name: Optional[str] = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, name=name, dtype=dtype)


def make_op_output(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
                   backward_fn) -> Tensor:
    """Wrap an op result, validate finiteness, and record the Node if needed."""
    if not np.all(np.isfinite(out_data)):
        names = ", ".join(t.name or "<unnamed>" for t in inputs)
        raise NumericError(f"non-finite values in output of op '{op}' (inputs: {names})")
    needs = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data if out_data.flags["C_CONTIGUOUS"] else np.ascontiguousarray(out_data)
    out.grad = None
    out.requires_grad = needs
    out.name = None
    out.node = Node(op, inputs, out, backward_fn) if needs else None
    return out


class Graph:
    """Topologically ordered node list reachable from one output tensor."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        # iterative post-order DFS; creation order already guarantees acyclicity
        nodes: list[Node] = []
        seen: set[int] = set()
        stack: list[tuple[Node, bool]] = []
        if output.node is not None:
            stack.append((output.node, False))
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for t in node.inputs:
                if t.node is not None and id(t.node) not in seen:
                    stack.append((t.node, False))
        return cls(nodes)

    def __len__(self):
        return len(self.nodes)

    def first_nonfinite(self) -> Optional[str]:
        """Name of the earliest node whose output holds NaN/Inf, if any."""
        for i, node in enumerate(self.nodes):
            if not np.all(np.isfinite(node.output.data)):
                return f"node {i} op '{node.op}'"
        return None


def backward(loss: Tensor, graph: Optional[Graph] = None) -> Graph:
    """Reverse sweep from a scalar loss, accumulating grads additively.

    Returns the traced graph so callers can inspect it (e.g. NaN diagnostics).
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward requires a scalar loss, got shape {tuple(loss.shape)}")
    if graph is None:
        graph = Graph.trace(loss)
    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(graph.nodes):
        g = node.output.grad
        if g is None:
            continue
        grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, grads):
            if gi is None:
                continue
            if t.requires_grad or t.node is not None:
                if gi.shape != t.data.shape:
                    raise DimensionError(
                        f"op '{node.op}' produced grad shape {gi.shape} for input shape {t.data.shape}")
                t.accumulate_grad(gi)
    return graph


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic grad of f at x and central differences.

    Relative error per coordinate is |analytic - numeric| / max(1, |numeric|).
    """
    x.zero_grad()
    loss = f(x)
    backward(loss)
    if x.grad is None:
        analytic = np.zeros_like(x.data)
    else:
        analytic = x.grad.copy()

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data)
            flat[i] = orig - h
            fm = float(f(x).data)
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * h)
    x.zero_grad()
    num = numeric.reshape(x.data.shape)
    err = np.abs(analytic - num) / np.maximum(1.0, np.abs(num))
    return float(err.max(initial=0.0))


def check_all_finite(arrs: Iterable[np.ndarray]) -> bool:
    return all(np.all(np.isfinite(a)) for a in arrs)


def rng_from_seed(seed: int, stream: int = 0) -> np.random.Generator:
    """Deterministic generator; distinct streams never overlap."""
    ss = np.random.SeedSequence([seed, stream])
    return np.random.Generator(np.random.PCG64(ss))


def head_dim_scale(channels: int, heads: int) -> float:
    return 1.0 / math.sqrt(channels / heads)
