"""Static-graph reverse-mode differentiation over dense float64 arrays.

A :class:`Tape` is built once (placeholders, constants and primitive ops) and
then evaluated many times with :meth:`Tape.forward`.  Leading dimensions are
free, so the same graph serves a training batch of 16 and a validation set of
1024.  Complex quantities never appear on the tape; callers carry real and
imaginary channels as separate nodes.
"""
from __future__ import annotations

from typing import Any, Callable

import numpy as np


class TapeError(RuntimeError):
    """Raised for shape errors, non-finite values or misuse of a tape."""

    def __init__(self, message: str, node_id: int | None = None, op: str | None = None):
        if node_id is not None:
            message = f"node {node_id} ({op}): {message}"
        super().__init__(message)
        self.node_id = node_id
        self.op = op


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _mm_fwd(a, b):
    return np.matmul(a, b)


def _mm_bwd(g, a, b):
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b
    g2 = g
    if a.ndim == 1:
        g2 = np.expand_dims(g2, -2)
    if b.ndim == 1:
        g2 = np.expand_dims(g2, -1)
    ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
    gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
    if a.ndim == 1:
        ga = unbroadcast(ga, (1,) * (ga.ndim - 2) + a2.shape).reshape(a.shape)
    else:
        ga = unbroadcast(ga, a.shape)
    if b.ndim == 1:
        gb = unbroadcast(gb, (1,) * (gb.ndim - 2) + b2.shape).reshape(b.shape)
    else:
        gb = unbroadcast(gb, b.shape)
    return ga, gb


def _dft_fwd(re, im, inverse=False):
    z = re + 1j * im
    if inverse:
        y = np.fft.ifft(np.fft.ifftshift(z, axes=-1), axis=-1, norm="ortho")
    else:
        y = np.fft.fftshift(np.fft.fft(z, axis=-1, norm="ortho"), axes=-1)
    return np.stack([y.real, y.imag], axis=-2)


def _dft_bwd(g, re, im, inverse=False):
    # The adjoint of a unitary map is its inverse.
    out = _dft_fwd(g[..., 0, :], g[..., 1, :], inverse=not inverse)
    return out[..., 0, :], out[..., 1, :]


def _resolve_shape(x, shape):
    # (Ellipsis, a, b) reshapes only the last axis and keeps leading dims.
    if shape and shape[0] is Ellipsis:
        return x.shape[:-1] + tuple(shape[1:])
    return shape


def _slice_bwd(g, x, index):
    gx = np.zeros_like(x)
    gx[index] += g
    return (gx,)


def _concat_bwd(g, *xs, axis):
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, splits, axis=axis))


def _sum_bwd(g, x, axis=None, keepdims=False):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


# op -> (forward(*inputs, **attrs), backward(g, *inputs, out=..., **attrs))
_OPS: dict[str, tuple[Callable, Callable]] = {
    "add": (np.add, lambda g, a, b, out: (unbroadcast(g, a.shape), unbroadcast(g, b.shape))),
    "sub": (np.subtract, lambda g, a, b, out: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape))),
    "mul": (np.multiply, lambda g, a, b, out: (unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape))),
    "div": (np.divide, lambda g, a, b, out: (unbroadcast(g / b, a.shape), unbroadcast(-g * out / b, b.shape))),
    "matmul": (_mm_fwd, lambda g, a, b, out: _mm_bwd(g, a, b)),
    "tanh": (np.tanh, lambda g, x, out: (g * (1.0 - out * out),)),
    "softplus": (_softplus, lambda g, x, out: (g * _sigmoid(x),)),
    "exp": (np.exp, lambda g, x, out: (g * out,)),
    "log": (np.log, lambda g, x, out: (g / x,)),
    "sin": (np.sin, lambda g, x, out: (g * np.cos(x),)),
    "cos": (np.cos, lambda g, x, out: (-g * np.sin(x),)),
    "sum": (
        lambda x, axis=None, keepdims=False: np.sum(x, axis=axis, keepdims=keepdims),
        lambda g, x, out, axis=None, keepdims=False: _sum_bwd(g, x, axis, keepdims),
    ),
    "slice": (lambda x, index: x[index], lambda g, x, out, index: _slice_bwd(g, x, index)),
    "concat": (
        lambda *xs, axis: np.concatenate(xs, axis=axis),
        lambda g, *xs, out, axis: _concat_bwd(g, *xs, axis=axis),
    ),
    "broadcast": (
        lambda x, shape: np.broadcast_to(x, shape),
        lambda g, x, out, shape: (unbroadcast(g, x.shape),),
    ),
    "reshape": (
        lambda x, shape: np.reshape(x, _resolve_shape(x, shape)),
        lambda g, x, out, shape: (g.reshape(x.shape),),
    ),
    "dft": (_dft_fwd, lambda g, re, im, out, inverse=False: _dft_bwd(g, re, im, inverse)),
}

PRIMITIVES = tuple(_OPS)


class Node:
    """Handle to one value on a tape.  Supports arithmetic operators."""

    __slots__ = ("tape", "id")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, tape: "Tape", node_id: int):
        self.tape = tape
        self.id = node_id

    def __repr__(self):
        op = self.tape._ops[self.id]
        return f"Node({self.id}, {op})"

    def _wrap(self, other):
        return other if isinstance(other, Node) else self.tape.const(other)

    def __add__(self, other):
        return self.tape.add(self, self._wrap(other))

    def __radd__(self, other):
        return self.tape.add(self._wrap(other), self)

    def __sub__(self, other):
        return self.tape.sub(self, self._wrap(other))

    def __rsub__(self, other):
        return self.tape.sub(self._wrap(other), self)

    def __mul__(self, other):
        return self.tape.mul(self, self._wrap(other))

    def __rmul__(self, other):
        return self.tape.mul(self._wrap(other), self)

    def __truediv__(self, other):
        return self.tape.div(self, self._wrap(other))

    def __rtruediv__(self, other):
        return self.tape.div(self._wrap(other), self)

    def __matmul__(self, other):
        return self.tape.matmul(self, self._wrap(other))

    def __rmatmul__(self, other):
        return self.tape.matmul(self._wrap(other), self)

    def __neg__(self):
        return self.tape.mul(self, self.tape.const(-1.0))

    def __getitem__(self, index):
        return self.tape.slice(self, index)


class Tape:
    """A closed set of differentiable primitives recorded in topological order.

    Nodes are created by ``input`` (named placeholder), ``const`` and the
    primitive methods.  ``forward`` binds placeholders and evaluates every
    node; ``backward`` propagates a seed adjoint from one node back to every
    placeholder.

    >>> t = Tape()
    >>> x = t.input("x")
    >>> y = t.sum(t.tanh(x))
    >>> t.mark_output("y", y)
    >>> float(t.forward({"x": np.zeros(3)})["y"])
    0.0
    """

    def __init__(self, check_finite: bool = True):
        self.check_finite = check_finite
        self._ops: list[str] = []
        self._inputs: list[tuple[int, ...]] = []
        self._attrs: list[dict[str, Any]] = []
        self._needs_grad: list[bool] = []
        self._consts: dict[int, np.ndarray] = {}
        self._placeholders: dict[str, int] = {}
        self._outputs: dict[str, int] = {}
        self.values: list[np.ndarray | None] = []
        self.adjoints: list[np.ndarray | None] = []
        self._evaluated = False

    def __len__(self):
        return len(self._ops)

    # -- graph construction -------------------------------------------------

    def _record(self, op, inputs=(), attrs=None, needs_grad=None):
        for node in inputs:
            if not isinstance(node, Node) or node.tape is not self:
                raise TapeError(f"operand of {op} does not belong to this tape")
        ids = tuple(n.id for n in inputs)
        if needs_grad is None:
            needs_grad = any(self._needs_grad[i] for i in ids)
        self._ops.append(op)
        self._inputs.append(ids)
        self._attrs.append(attrs or {})
        self._needs_grad.append(needs_grad)
        self._evaluated = False
        return Node(self, len(self._ops) - 1)

    def input(self, name: str, requires_grad: bool = True) -> Node:
        """Named placeholder; data inputs can skip gradient accumulation."""
        if name in self._placeholders:
            return Node(self, self._placeholders[name])
        node = self._record("input", attrs={"name": name}, needs_grad=requires_grad)
        self._placeholders[name] = node.id
        return node

    def const(self, value) -> Node:
        node = self._record("const", needs_grad=False)
        self._consts[node.id] = np.asarray(value, dtype=np.float64)
        return node

    def mark_output(self, name: str, node: Node) -> None:
        self._outputs[name] = node.id

    @property
    def input_names(self) -> list[str]:
        return list(self._placeholders)

    def _op(self, name, *nodes, **attrs):
        nodes = tuple(n if isinstance(n, Node) else self.const(n) for n in nodes)
        return self._record(name, nodes, attrs)

    def add(self, a, b):
        return self._op("add", a, b)

    def sub(self, a, b):
        return self._op("sub", a, b)

    def mul(self, a, b):
        return self._op("mul", a, b)

    def div(self, a, b):
        return self._op("div", a, b)

    def matmul(self, a, b):
        return self._op("matmul", a, b)

    def tanh(self, x):
        return self._op("tanh", x)

    def softplus(self, x):
        return self._op("softplus", x)

    def exp(self, x):
        return self._op("exp", x)

    def log(self, x):
        return self._op("log", x)

    def sin(self, x):
        return self._op("sin", x)

    def cos(self, x):
        return self._op("cos", x)

    def sum(self, x, axis=None, keepdims=False):
        return self._op("sum", x, axis=axis, keepdims=keepdims)

    def slice(self, x, index):
        return self._op("slice", x, index=index)

    def concat(self, nodes, axis=-1):
        return self._op("concat", *nodes, axis=axis)

    def broadcast(self, x, shape):
        return self._op("broadcast", x, shape=tuple(shape))

    def reshape(self, x, shape):
        """Reshape; a leading ``Ellipsis`` splits only the last axis."""
        return self._op("reshape", x, shape=tuple(shape))

    def dft(self, re, im, inverse=False):
        """Unitary DFT of ``re + i*im`` along the last axis.

        The result has shape ``(..., 2, N)`` holding real and imaginary
        channels; forward output is fftshifted (ascending frequency).
        """
        return self._op("dft", re, im, inverse=inverse)

    # -- evaluation -----------------------------------------------------------

    def forward(self, inputs: dict[str, Any]) -> dict[str, np.ndarray]:
        missing = set(self._placeholders) - set(inputs)
        if missing:
            raise TapeError(f"unbound inputs: {sorted(missing)}")
        values: list[np.ndarray | None] = [None] * len(self._ops)
        check = self.check_finite
        for i, op in enumerate(self._ops):
            if op == "const":
                values[i] = self._consts[i]
                continue
            if op == "input":
                v = np.asarray(inputs[self._attrs[i]["name"]], dtype=np.float64)
            else:
                args = [values[j] for j in self._inputs[i]]
                try:
                    with np.errstate(all="ignore"):
                        v = _OPS[op][0](*args, **self._attrs[i])
                except (ValueError, IndexError) as exc:
                    shapes = [a.shape for a in args]
                    raise TapeError(f"shape mismatch {shapes}: {exc}", i, op) from exc
            if check and not np.all(np.isfinite(v)):
                raise TapeError("non-finite value", i, op)
            values[i] = v
        self.values = values
        self.adjoints = [None] * len(self._ops)
        self._evaluated = True
        return {name: values[i] for name, i in self._outputs.items()}

    def value(self, node: Node | str) -> np.ndarray:
        idx = self._outputs[node] if isinstance(node, str) else node.id
        if not self._evaluated:
            raise TapeError("tape has not been evaluated")
        return self.values[idx]

    def backward(self, output: Node | str, seed=None) -> dict[str, np.ndarray]:
        """Reverse sweep from ``output``; returns gradients for every input."""
        if not self._evaluated:
            raise TapeError("backward called before forward")
        out_id = self._outputs[output] if isinstance(output, str) else output.id
        out_val = self.values[out_id]
        if seed is None:
            seed = np.ones_like(out_val)
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != out_val.shape:
            raise TapeError(f"seed shape {seed.shape} != value shape {out_val.shape}", out_id, self._ops[out_id])
        adj: list[np.ndarray | None] = [None] * len(self._ops)
        adj[out_id] = seed
        values = self.values
        for i in range(out_id, -1, -1):
            g = adj[i]
            op = self._ops[i]
            if g is None or op in ("input", "const"):
                continue
            ins = self._inputs[i]
            if not any(self._needs_grad[j] for j in ins):
                continue
            args = [values[j] for j in ins]
            grads = _OPS[op][1](g, *args, out=values[i], **self._attrs[i])
            for j, gj in zip(ins, grads):
                if not self._needs_grad[j]:
                    continue
                adj[j] = gj if adj[j] is None else adj[j] + gj
        self.adjoints = adj
        result = {}
        for name, i in self._placeholders.items():
            a = adj[i]
            result[name] = np.zeros_like(values[i]) if a is None else np.array(a, dtype=np.float64)
        return result

    def adjoint(self, node: Node) -> np.ndarray:
        a = self.adjoints[node.id]
        return np.zeros_like(self.values[node.id]) if a is None else a
