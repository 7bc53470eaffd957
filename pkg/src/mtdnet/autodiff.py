"""Reverse-mode differentiation over a dynamically recorded tape.

A :class:`Tape` is built fresh for every forward pass. Each operator below
computes its forward value with the kernels from :mod:`mtdnet.ops` and
appends a node holding its parents and a vector-Jacobian closure. Calling
:meth:`Tape.backward` walks the nodes once in reverse order.

>>> tape = Tape()
>>> w = Parameter("w", np.array([[2.0]]))
>>> y = linear(tape.constant(np.array([[3.0]])), tape.watch(w), tape.constant(np.zeros(1)))
>>> grads = tape.backward(mse_loss(y, np.array([[0.0]])), [w])
>>> float(grads["w"][0, 0])
36.0
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import ops
from .errors import ShapeError
from .tensor import channel_bands
from .tensor import concat_channels as _concat


@dataclass(eq=False)
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.value.shape


class Var:
    """A value recorded on a tape."""

    __slots__ = ("value", "tape", "index")

    def __init__(self, value: np.ndarray, tape: "Tape", index: int):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.shape})"


@dataclass
class Node:
    kind: str
    parents: tuple[int, ...]
    vjp: Callable | None = None
    param: Parameter | None = None


class Tape:
    """Ordered list of nodes; parents always precede their children."""

    def __init__(self, enabled: bool = True):
        # A disabled tape keeps no nodes or closures, for inference.
        self.enabled = enabled
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def _push(self, value, node: Node) -> Var:
        if not self.enabled:
            return Var(value, self, -1)
        self.nodes.append(node)
        return Var(value, self, len(self.nodes) - 1)

    def constant(self, value) -> Var:
        return self._push(np.asarray(value, dtype=np.float64), Node("constant", ()))

    def watch(self, param: Parameter) -> Var:
        return self._push(param.value, Node("param", (), param=param))

    def record(self, kind: str, value, parents: Sequence[Var], vjp: Callable) -> Var:
        for p in parents:
            if p.tape is not self:
                raise ValueError(f"{kind}: input recorded on a different tape")
        return self._push(value, Node(kind, tuple(p.index for p in parents), vjp))

    def backward(self, loss: Var, params: Iterable[Parameter] = ()) -> dict[str, np.ndarray]:
        """Accumulate d(loss)/d(param) for every parameter.

        Parameters that the loss does not reach get zero gradients. The
        result is also stored on each ``Parameter.grad``.
        """
        if not self.enabled:
            raise RuntimeError("backward on a disabled tape")
        if np.size(loss.value) != 1:
            raise ValueError(f"loss must be a scalar, got shape {np.shape(loss.value)}")
        params = list(params)
        grads: list = [None] * len(self.nodes)
        grads[loss.index] = np.ones_like(loss.value, dtype=np.float64)
        by_param: dict[int, np.ndarray] = {}
        for i in range(loss.index, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = self.nodes[i]
            if node.param is not None:
                key = id(node.param)
                by_param[key] = by_param[key] + g if key in by_param else g
                continue
            if node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None:
                    continue
                grads[parent] = pg if grads[parent] is None else grads[parent] + pg
        out = {}
        for p in params:
            p.grad = np.array(by_param.get(id(p), np.zeros_like(p.value)), dtype=np.float64)
            out[p.name] = p.grad
        return out


# -- recorded operators ---------------------------------------------------------

def conv3d(x: Var, w: Var, b: Var, stride=(1, 1, 1), padding=(0, 0, 0)) -> Var:
    p = ops.Conv3dParams(w.value, b.value, stride, padding)
    y = ops.conv3d_forward(x.value, p)
    xv = x.value
    return x.tape.record("conv3d", y, (x, w, b), lambda g: ops.conv3d_backward(g, xv, p))


def relu(x: Var) -> Var:
    xv = x.value
    return x.tape.record("relu", ops.relu(xv), (x,), lambda g: (ops.relu_backward(g, xv),))


def avg_pool3d(x: Var, kernel, stride=None, padding=0) -> Var:
    shape = x.shape
    y = ops.avg_pool3d(x.value, kernel, stride, padding)
    return x.tape.record(
        "avg_pool3d", y, (x,),
        lambda g: (ops.avg_pool3d_backward(g, shape, kernel, stride, padding),))


def concat_channels(parts: Sequence[Var]) -> Var:
    y = _concat([p.value for p in parts])
    widths = [p.shape[1] for p in parts]
    return parts[0].tape.record("concat", y, tuple(parts), lambda g: ops.concat_backward(g, widths))


def reshape(x: Var, shape) -> Var:
    old = x.shape
    y = np.reshape(x.value, shape)
    return x.tape.record("reshape", y, (x,), lambda g: (np.reshape(g, old),))


def flatten(x: Var) -> Var:
    """(batch, ...) -> (batch, features), row-major."""
    return reshape(x, (x.shape[0], -1))


def fold_time(x: Var) -> Var:
    """Move the time axis into channels: (B, C, T, H, W) -> (B, C*T, 1, H, W)."""
    B, C, T, H, W = x.shape
    return reshape(x, (B, C * T, 1, H, W))


def linear(x: Var, w: Var, b: Var) -> Var:
    xv, wv = x.value, w.value
    y = ops.linear(xv, wv, b.value)
    return x.tape.record("linear", y, (x, w, b), lambda g: ops.linear_backward(g, xv, wv))


def mse_loss(pred: Var, target) -> Var:
    """Loss node; ``target`` is a plain array (no gradient flows into it)."""
    target = np.asarray(target, dtype=np.float64)
    pv = pred.value
    if pv.shape != target.shape:
        raise ShapeError(f"prediction shape {pv.shape} != target shape {target.shape}")
    loss = np.array(ops.mse_loss(pv, target))
    return pred.tape.record(
        "mse", loss, (pred,), lambda g: (ops.mse_loss_backward(pv, target, float(g)),))


def add(a: Var, b: Var) -> Var:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return a.tape.record("add", a.value + b.value, (a, b), lambda g: (g, g))


def band(x: Var, channels: slice) -> Var:
    """Channel band of ``x`` (used by tests and analysis; differentiable)."""
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        full[:, channels] = g
        return (full,)

    return x.tape.record("band", np.ascontiguousarray(x.value[:, channels]), (x,), vjp)


__all__ = [
    "Parameter", "Var", "Tape", "conv3d", "relu", "avg_pool3d", "concat_channels",
    "reshape", "flatten", "fold_time", "linear", "mse_loss", "add", "band", "channel_bands",
]
