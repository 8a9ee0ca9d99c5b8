"""Tensor storage, parameters, and the recording tape used for reverse-mode gradients.

Tensors are thin wrappers over contiguous numpy arrays of rank <= 3
(batch N x channels C x time T, or N x features).  Operations in
:mod:`ddxnet.ops` are pure; when handed a :class:`Tape` they append a
:class:`Node` holding the vector-Jacobian product closure for that call.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InvalidArgumentError, ShapeError

_default_dtype = np.dtype(np.float32)


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    """Select the element kind for newly created tensors (float32 or float64)."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise InvalidArgumentError(f"unsupported element kind {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """Dense rank-<=3 array.  Rank 0 is reserved for scalar losses."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _default_dtype
        arr = np.asarray(data, dtype=dtype, order="C")
        if arr.ndim > 3:
            raise ShapeError(f"tensor rank {arr.ndim} exceeds 3")
        if any(n < 1 for n in arr.shape):
            raise ShapeError(f"tensor extents must be >= 1, got {arr.shape}")
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def item(self) -> float:
        if self.data.size != 1:
            raise InvalidArgumentError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


class Parameter(Tensor):
    """A named trainable leaf.  ``grad`` accumulates across backward calls."""

    __slots__ = ("name", "grad")

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad.fill(0)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


@dataclass
class Node:
    op: str
    fn: Callable
    inputs: tuple[Tensor, ...]
    kwargs: dict
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered trace of recorded operations for one training step."""

    nodes: list[Node] = field(default_factory=list)

    def record(self, op, fn, inputs, kwargs, output, vjp) -> None:
        self.nodes.append(Node(op, fn, tuple(inputs), dict(kwargs), output, vjp))

    def __len__(self):
        return len(self.nodes)

    def replay(self) -> list[np.ndarray]:
        """Re-run every node's forward from its recorded inputs.

        Intermediate nodes are re-fed the replayed values of their producers, so
        the result checks that the trace reproduces itself from the leaves.
        """
        produced: dict[int, Tensor] = {}
        outputs = []
        for node in self.nodes:
            inputs = [produced.get(id(t), t) for t in node.inputs]
            out = node.fn(*inputs, **node.kwargs)
            if isinstance(out, tuple):
                out = out[0]
            produced[id(node.output)] = out
            outputs.append(out.data)
        return outputs


def backward(tape: Tape, loss: Tensor, inputs: Iterable[Tensor] = ()) -> dict:
    """Propagate d(loss)/d(.) through ``tape`` in reverse order.

    Parameter gradients are added into ``Parameter.grad``.  The returned dict maps
    parameter names to those accumulated gradients; tensors listed in ``inputs``
    additionally get an entry keyed by the tensor object itself (their gradient
    for this call only).  Other leaf gradients are dropped.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise InvalidArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    params: dict[int, Parameter] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None:
                continue
            if isinstance(t, Parameter):
                params[id(t)] = t
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    result = {}
    for key, p in params.items():
        p.grad += grads[key]
    for p in params.values():
        result[p.name] = p.grad
    for t in inputs:
        result[t] = grads.get(id(t), np.zeros_like(t.data))
    return result
