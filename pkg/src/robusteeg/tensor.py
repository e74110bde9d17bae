"""Tensor values and the recording tape used for reverse-mode differentiation.

Operations in :mod:`robusteeg.functional` record themselves on the innermost
active :class:`Tape`. Nothing is recorded when no tape is active, so plain
inference runs without bookkeeping::

    with Tape() as tape:
        loss = F.softmax_cross_entropy(model(x), y)
    tape.backward(loss)
"""

from __future__ import annotations

from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class Tensor:
    """Dense real array with an optional gradient slot."""

    __slots__ = ("data", "grad", "track")

    def __init__(self, data, track: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.track = track

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, track=False)

    def __repr__(self) -> str:
        flag = ", track=True" if self.track else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        if dtype is not None and x.dtype != dtype:
            return Tensor(x.data.astype(dtype), track=x.track)
        return x
    return Tensor(x, dtype=dtype)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class _Node:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: BackwardFn


class TapeError(RuntimeError):
    pass


_ACTIVE: ContextVar["Tape | None"] = ContextVar("robusteeg_active_tape", default=None)


class Tape:
    """Ordered record of the differentiable operations executed under it.

    Nodes are appended in execution order, which is already a topological
    order. A tape supports exactly one backward pass.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._token)
        self._token = None

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward: BackwardFn) -> None:
        if self.consumed:
            raise TapeError("cannot record on a tape that has already run backward")
        self.nodes.append(_Node(output, tuple(inputs), backward))

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(.) to every tracked leaf tensor on the tape.

        Leaves that the loss does not depend on receive an exact zero
        gradient. Intermediate gradients are discarded.
        """
        if self.consumed:
            raise TapeError("backward already ran on this tape")
        if loss.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        self.consumed = True

        produced = {id(n.output) for n in self.nodes}
        leaves: dict[int, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.track and id(t) not in produced:
                    leaves[id(t)] = t

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.track:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi

        for key, t in leaves.items():
            g = grads.get(key)
            t.grad = np.zeros_like(t.data) if g is None else g.astype(t.dtype, copy=False)
        # a tracked leaf that is itself the loss
        if loss.track and id(loss) not in produced:
            loss.grad = np.ones_like(loss.data)
        self.nodes.clear()


def active_tape() -> Tape | None:
    return _ACTIVE.get()


def record(output: Tensor, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Attach ``output`` to the active tape when any input is tracked."""
    tape = _ACTIVE.get()
    if tape is not None and any(t.track for t in inputs):
        output.track = True
        tape.record(output, inputs, backward)
    return output
