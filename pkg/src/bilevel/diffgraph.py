"""Minimal differentiable computation core.

A :class:`Tape` is an immutable, topologically ordered list of primitive
operations over array-valued slots.  It supports plain evaluation,
reverse-mode vector-Jacobian products and forward-mode Jacobian-vector
products (optionally for a batch of tangents at once).

Tapes are built with a :class:`TapeBuilder`::

    tb = TapeBuilder()
    x = tb.input("x", ())
    tape = tb.build(x * x)
    forward_eval(tape, FlatVector.from_groups({"x": 3.0})).values  # [9.]

Every primitive lives in :data:`PRIMITIVES` with a value, VJP and JVP rule.
Derivatives of ``relu``/``maximum`` at the kink are taken as 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Iterable, Mapping

import numpy as np

from .exceptions import ConfigurationError, NumericError, ShapeError

Shape = tuple


def _norm_shape(shape) -> Shape:
    if isinstance(shape, (tuple, list, np.ndarray)):
        return tuple(int(s) for s in shape)
    return (int(shape),)


class Layout:
    """Ordered named groups addressing one contiguous vector."""

    def __init__(self, shapes: Mapping[str, Any] | Iterable[tuple[str, Any]] = ()):
        items = shapes.items() if isinstance(shapes, Mapping) else shapes
        self._shapes: dict[str, Shape] = {}
        self._offsets: dict[str, int] = {}
        offset = 0
        for name, shape in items:
            if name in self._shapes:
                raise ConfigurationError(f"duplicate group name {name!r}")
            shape = _norm_shape(shape)
            self._shapes[name] = shape
            self._offsets[name] = offset
            offset += int(np.prod(shape, dtype=np.int64))
        self.size = offset

    @property
    def names(self) -> list[str]:
        return list(self._shapes)

    def shape(self, name: str) -> Shape:
        return self._shapes[name]

    def offset(self, name: str) -> int:
        return self._offsets[name]

    def slice(self, name: str) -> slice:
        start = self._offsets[name]
        return slice(start, start + int(np.prod(self._shapes[name], dtype=np.int64)))

    def items(self):
        return self._shapes.items()

    def subset(self, names: Iterable[str]) -> "Layout":
        return Layout([(n, self._shapes[n]) for n in names])

    def merge(self, other: "Layout") -> "Layout":
        return Layout(list(self.items()) + list(other.items()))

    def to_json(self) -> list:
        return [[name, list(shape)] for name, shape in self.items()]

    @classmethod
    def from_json(cls, data) -> "Layout":
        return cls([(name, tuple(shape)) for name, shape in data])

    def __contains__(self, name) -> bool:
        return name in self._shapes

    def __iter__(self):
        return iter(self._shapes)

    def __len__(self) -> int:
        return len(self._shapes)

    def __eq__(self, other) -> bool:
        return isinstance(other, Layout) and list(self.items()) == list(other.items())

    def __hash__(self) -> int:
        return hash(tuple(self.items()))

    def __repr__(self) -> str:
        inner = ", ".join(f"{n}{list(s)}" for n, s in self.items())
        return f"Layout({inner})"


class FlatVector:
    """Contiguous float64 vector with a named-group :class:`Layout`.

    All entries must be finite.
    """

    __slots__ = ("values", "layout")

    def __init__(self, values, layout: Layout):
        values = np.array(values, dtype=np.float64).reshape(-1)
        if values.size != layout.size:
            raise ShapeError(f"vector of length {values.size} does not match layout of size {layout.size}")
        if not np.all(np.isfinite(values)):
            raise NumericError("FlatVector entries must be finite")
        self.values = values
        self.layout = layout

    @classmethod
    def from_groups(cls, groups: Mapping[str, Any]) -> "FlatVector":
        arrays = {k: np.asarray(v, dtype=np.float64) for k, v in groups.items()}
        layout = Layout([(k, a.shape) for k, a in arrays.items()])
        if not arrays:
            return cls(np.zeros(0), layout)
        return cls(np.concatenate([a.reshape(-1) for a in arrays.values()]), layout)

    @classmethod
    def zeros(cls, layout: Layout) -> "FlatVector":
        return cls(np.zeros(layout.size), layout)

    @classmethod
    def concat(cls, *vectors: "FlatVector") -> "FlatVector":
        layout = Layout([item for v in vectors for item in v.layout.items()])
        values = np.concatenate([v.values for v in vectors]) if vectors else np.zeros(0)
        return cls(values, layout)

    def group(self, name: str) -> np.ndarray:
        if name not in self.layout:
            raise ConfigurationError(f"no group named {name!r}; have {self.layout.names}")
        return self.values[self.layout.slice(name)].reshape(self.layout.shape(name))

    __getitem__ = group

    def groups(self) -> dict[str, np.ndarray]:
        return {name: self.group(name) for name in self.layout}

    def select(self, names: Iterable[str]) -> "FlatVector":
        names = list(names)
        layout = self.layout.subset(names)
        if not names:
            return FlatVector(np.zeros(0), layout)
        return FlatVector(np.concatenate([self.values[self.layout.slice(n)] for n in names]), layout)

    def with_values(self, values) -> "FlatVector":
        return FlatVector(values, self.layout)

    def updated(self, groups: Mapping[str, Any]) -> "FlatVector":
        values = self.values.copy()
        for name, arr in groups.items():
            if name not in self.layout:
                raise ConfigurationError(f"no group named {name!r}")
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != self.layout.shape(name):
                raise ShapeError(f"group {name!r} expects shape {self.layout.shape(name)}, got {arr.shape}")
            values[self.layout.slice(name)] = arr.reshape(-1)
        return FlatVector(values, self.layout)

    def copy(self) -> "FlatVector":
        return FlatVector(self.values.copy(), self.layout)

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other) -> bool:
        return (isinstance(other, FlatVector) and self.layout == other.layout
                and np.array_equal(self.values, other.values))

    def __repr__(self) -> str:
        return f"FlatVector({self.layout!r}, values={self.values!r})"


# ---------------------------------------------------------------------------
# primitives


@dataclass(frozen=True)
class Primitive:
    """Value, VJP and JVP rules of one operation.

    ``vjp(g, out, attr, *args)`` returns one cotangent per argument.
    ``jvp(tangents, out, attr, *args)`` receives one tangent per argument,
    each either ``None`` (identically zero) or an array with a leading batch
    axis, and returns the batched output tangent (or ``None``).
    """

    value: Callable
    vjp: Callable
    jvp: Callable


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _lift(t, ndim):
    # right-align a batched tangent (B, *shape) against an output of rank ndim
    pad = ndim - (t.ndim - 1)
    if pad > 0:
        t = t.reshape((t.shape[0],) + (1,) * pad + t.shape[1:])
    return t


def _batched(t, out):
    return np.broadcast_to(t, (t.shape[0],) + out.shape) if t.shape[1:] != out.shape else t


def _sum_tangents(*terms):
    terms = [t for t in terms if t is not None]
    if not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def _add_jvp(ts, out, attr, a, b):
    ta, tb = ts
    r = _sum_tangents(None if ta is None else _lift(ta, out.ndim),
                      None if tb is None else _lift(tb, out.ndim))
    return None if r is None else _batched(r, out)


def _sub_jvp(ts, out, attr, a, b):
    ta, tb = ts
    r = _sum_tangents(None if ta is None else _lift(ta, out.ndim),
                      None if tb is None else -_lift(tb, out.ndim))
    return None if r is None else _batched(r, out)


def _mul_jvp(ts, out, attr, a, b):
    ta, tb = ts
    r = _sum_tangents(None if ta is None else _lift(ta, out.ndim) * b,
                      None if tb is None else a * _lift(tb, out.ndim))
    return None if r is None else _batched(r, out)


def _div_jvp(ts, out, attr, a, b):
    ta, tb = ts
    r = _sum_tangents(None if ta is None else _lift(ta, out.ndim) / b,
                      None if tb is None else -out * _lift(tb, out.ndim) / b)
    return None if r is None else _batched(r, out)


def _matmul_vjp(g, out, attr, a, b):
    if b.ndim == 1:
        return np.outer(g, b), a.T @ g
    return g @ b.T, a.T @ g


def _matmul_jvp(ts, out, attr, a, b):
    ta, tb = ts
    terms = []
    if ta is not None:
        terms.append(ta @ b)
    if tb is not None:
        terms.append(tb @ a.T if b.ndim == 1 else a @ tb)
    return _sum_tangents(*terms)


def _unary(f_jvp):
    return lambda ts, out, attr, a: None if ts[0] is None else f_jvp(ts[0], out, a)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _max_vjp(g, out, attr, a, b):
    return _unbroadcast(g * (a > b), a.shape), _unbroadcast(g * (b > a), b.shape)


def _max_jvp(ts, out, attr, a, b):
    ta, tb = ts
    r = _sum_tangents(None if ta is None else _lift(ta, out.ndim) * (a > b),
                      None if tb is None else _lift(tb, out.ndim) * (b > a))
    return None if r is None else _batched(r, out)


def _sum_value(attr, a):
    return np.sum(a) if attr is None else np.sum(a, axis=attr)


def _sum_vjp(g, out, attr, a):
    if attr is None:
        return (np.broadcast_to(g, a.shape),)
    return (np.broadcast_to(np.expand_dims(g, attr), a.shape),)


def _sum_jvp(ts, out, attr, a):
    t = ts[0]
    if t is None:
        return None
    if attr is None:
        return t.reshape(t.shape[0], -1).sum(axis=1)
    return t.sum(axis=attr + 1)


def _gather_value(idx, a):
    return np.take_along_axis(a, idx[..., None], axis=-1)[..., 0]


def _gather_vjp(g, out, idx, a):
    full = np.zeros(a.shape)
    np.put_along_axis(full, idx[..., None], np.asarray(g)[..., None], axis=-1)
    return (full,)


def _gather_jvp(ts, out, idx, a):
    t = ts[0]
    if t is None:
        return None
    bidx = np.broadcast_to(idx[None, ..., None], (t.shape[0],) + idx.shape + (1,))
    return np.take_along_axis(t, bidx, axis=-1)[..., 0]


def _concat_vjp(g, out, attr, *xs):
    parts, start = [], 0
    for x in xs:
        parts.append(g[start:start + x.size].reshape(x.shape))
        start += x.size
    return tuple(parts)


def _concat_jvp(ts, out, attr, *xs):
    if all(t is None for t in ts):
        return None
    batch = next(t.shape[0] for t in ts if t is not None)
    return np.concatenate([np.zeros((batch, x.size)) if t is None else t.reshape(batch, -1)
                           for t, x in zip(ts, xs)], axis=1)


PRIMITIVES: dict[str, Primitive] = {
    "add": Primitive(
        lambda attr, a, b: a + b,
        lambda g, out, attr, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        _add_jvp),
    "sub": Primitive(
        lambda attr, a, b: a - b,
        lambda g, out, attr, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        _sub_jvp),
    "mul": Primitive(
        lambda attr, a, b: a * b,
        lambda g, out, attr, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        _mul_jvp),
    "div": Primitive(
        lambda attr, a, b: a / b,
        lambda g, out, attr, a, b: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)),
        _div_jvp),
    "neg": Primitive(
        lambda attr, a: -a,
        lambda g, out, attr, a: (-g,),
        _unary(lambda t, out, a: -t)),
    "matmul": Primitive(lambda attr, a, b: a @ b, _matmul_vjp, _matmul_jvp),
    "transpose": Primitive(
        lambda attr, a: a.T,
        lambda g, out, attr, a: (g.T,),
        _unary(lambda t, out, a: np.swapaxes(t, -1, -2))),
    "reshape": Primitive(
        lambda attr, a: a.reshape(attr),
        lambda g, out, attr, a: (g.reshape(a.shape),),
        lambda ts, out, attr, a: None if ts[0] is None else ts[0].reshape((ts[0].shape[0],) + out.shape)),
    "exp": Primitive(
        lambda attr, a: np.exp(a),
        lambda g, out, attr, a: (g * out,),
        _unary(lambda t, out, a: t * out)),
    "log": Primitive(
        lambda attr, a: np.log(a),
        lambda g, out, attr, a: (g / a,),
        _unary(lambda t, out, a: t / a)),
    "sigmoid": Primitive(
        lambda attr, a: _sigmoid(a),
        lambda g, out, attr, a: (g * out * (1.0 - out),),
        _unary(lambda t, out, a: t * (out * (1.0 - out)))),
    "relu": Primitive(
        lambda attr, a: np.maximum(a, 0.0),
        lambda g, out, attr, a: (g * (a > 0),),
        _unary(lambda t, out, a: t * (a > 0))),
    "maximum": Primitive(lambda attr, a, b: np.maximum(a, b), _max_vjp, _max_jvp),
    "sum": Primitive(_sum_value, _sum_vjp, _sum_jvp),
    "softmax": Primitive(
        lambda attr, a: _softmax(a),
        lambda g, out, attr, a: (out * (g - (g * out).sum(axis=-1, keepdims=True)),),
        _unary(lambda t, out, a: out * (t - (t * out).sum(axis=-1, keepdims=True)))),
    "log_softmax": Primitive(
        lambda attr, a: _log_softmax(a),
        lambda g, out, attr, a: (g - np.exp(out) * g.sum(axis=-1, keepdims=True),),
        _unary(lambda t, out, a: t - (np.exp(out) * t).sum(axis=-1, keepdims=True))),
    "gather": Primitive(_gather_value, _gather_vjp, _gather_jvp),
    "concat": Primitive(
        lambda attr, *xs: np.concatenate([np.reshape(x, -1) for x in xs]),
        _concat_vjp, _concat_jvp),
}


# ---------------------------------------------------------------------------
# tapes


@dataclass(frozen=True)
class Node:
    op: str
    args: tuple
    shape: Shape
    attr: Any = None


class Tape:
    """Immutable recorded computation.

    ``input_layout`` names the input slots, ``output`` is the index of the
    result node.  Evaluation workspaces are allocated per call, so one tape
    may be evaluated concurrently.
    """

    def __init__(self, nodes: tuple[Node, ...], input_layout: Layout, output: int):
        self.nodes = nodes
        self.input_layout = input_layout
        self.output = output
        self.output_shape = nodes[output].shape
        self.output_layout = Layout([("output", self.output_shape)])

    def __len__(self) -> int:
        return len(self.nodes)

    def _read_inputs(self, inputs) -> dict[str, np.ndarray]:
        values = {}
        for name, shape in self.input_layout.items():
            try:
                v = inputs[name]
            except (KeyError, ConfigurationError):
                raise ConfigurationError(f"missing input slot {name!r}") from None
            v = np.asarray(v, dtype=np.float64)
            if v.shape != shape:
                if v.size == int(np.prod(shape, dtype=np.int64)):
                    v = v.reshape(shape)
                else:
                    raise ShapeError(f"slot {name!r} expects shape {shape}, got {v.shape}")
            values[name] = v
        return values

    def evaluate(self, inputs) -> list:
        """Run the tape; returns the workspace of every node value."""
        values = self._read_inputs(inputs)
        work = []
        for i, node in enumerate(self.nodes):
            if node.op == "input":
                v = values[node.attr]
            elif node.op == "const":
                v = node.attr
            else:
                args = [work[j] for j in node.args]
                with np.errstate(all="ignore"):
                    v = PRIMITIVES[node.op].value(node.attr, *args)
                v = np.asarray(v, dtype=np.float64)
                if not np.all(np.isfinite(v)):
                    raise NumericError(f"node {i} ({node.op}) produced a non-finite value", node=i)
            work.append(v)
        return work

    def backward(self, work: list, cotangent) -> dict[str, np.ndarray]:
        """Propagate ``cotangent`` from the output; returns gradients per input slot."""
        cot = np.asarray(cotangent, dtype=np.float64)
        if cot.size != int(np.prod(self.output_shape, dtype=np.int64)):
            raise ShapeError(f"cotangent of size {cot.size} does not match output shape {self.output_shape}")
        grads: list = [None] * len(self.nodes)
        grads[self.output] = cot.reshape(self.output_shape)
        result = {name: np.zeros(shape) for name, shape in self.input_layout.items()}
        for i in range(self.output, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = self.nodes[i]
            if node.op == "input":
                result[node.attr] = result[node.attr] + g
                continue
            if node.op == "const":
                continue
            args = [work[j] for j in node.args]
            parts = PRIMITIVES[node.op].vjp(g, work[i], node.attr, *args)
            for j, part in zip(node.args, parts):
                if self.nodes[j].op == "const":
                    continue
                part = np.asarray(part, dtype=np.float64)
                grads[j] = part if grads[j] is None else grads[j] + part
        return result

    def tangents(self, work: list, seeds: Mapping[str, np.ndarray | None], batch: int) -> np.ndarray:
        """Push batched input tangents forward; returns ``(batch, *output_shape)``."""
        tans: list = [None] * len(self.nodes)
        for i, node in enumerate(self.nodes[: self.output + 1]):
            if node.op == "input":
                tans[i] = seeds.get(node.attr)
            elif node.op == "const":
                continue
            else:
                ts = [tans[j] for j in node.args]
                if all(t is None for t in ts):
                    continue
                args = [work[j] for j in node.args]
                tans[i] = PRIMITIVES[node.op].jvp(ts, work[i], node.attr, *args)
        out = tans[self.output]
        if out is None:
            return np.zeros((batch,) + self.output_shape)
        return np.ascontiguousarray(np.broadcast_to(out, (batch,) + self.output_shape))

    def __repr__(self) -> str:
        return f"Tape({len(self.nodes)} nodes, inputs={self.input_layout!r}, output={self.output_shape})"


class Var:
    """Handle to a node while a tape is being built."""

    __slots__ = ("builder", "index", "shape")

    def __init__(self, builder: "TapeBuilder", index: int, shape: Shape):
        self.builder = builder
        self.index = index
        self.shape = shape

    @property
    def T(self) -> "Var":
        return self.builder.op("transpose", self)

    def sum(self, axis=None) -> "Var":
        return self.builder.sum(self, axis)

    def __add__(self, other):
        return self.builder.op("add", self, other)

    def __radd__(self, other):
        return self.builder.op("add", other, self)

    def __sub__(self, other):
        return self.builder.op("sub", self, other)

    def __rsub__(self, other):
        return self.builder.op("sub", other, self)

    def __mul__(self, other):
        return self.builder.op("mul", self, other)

    def __rmul__(self, other):
        return self.builder.op("mul", other, self)

    def __truediv__(self, other):
        return self.builder.op("div", self, other)

    def __rtruediv__(self, other):
        return self.builder.op("div", other, self)

    def __matmul__(self, other):
        return self.builder.op("matmul", self, other)

    def __neg__(self):
        return self.builder.op("neg", self)

    def __repr__(self) -> str:
        return f"Var(#{self.index}, shape={self.shape})"


class TapeBuilder:
    """Records primitive operations in evaluation order."""

    def __init__(self):
        self._nodes: list[Node] = []
        self._inputs: dict[str, Shape] = {}

    def input(self, name: str, shape=()) -> Var:
        if name in self._inputs:
            raise ConfigurationError(f"input slot {name!r} declared twice")
        shape = _norm_shape(shape)
        self._inputs[name] = shape
        return self._append(Node("input", (), shape, name))

    def inputs(self, layout: Layout) -> dict[str, Var]:
        return {name: self.input(name, shape) for name, shape in layout.items()}

    def const(self, value) -> Var:
        arr = np.array(value, dtype=np.float64)
        arr.setflags(write=False)
        return self._append(Node("const", (), arr.shape, arr))

    def _coerce(self, x) -> Var:
        if isinstance(x, Var):
            if x.builder is not self:
                raise ConfigurationError("Var belongs to another TapeBuilder")
            return x
        return self.const(x)

    def _append(self, node: Node) -> Var:
        self._nodes.append(node)
        return Var(self, len(self._nodes) - 1, node.shape)

    def op(self, name: str, *args, attr=None) -> Var:
        if name not in PRIMITIVES:
            raise ConfigurationError(f"unknown primitive {name!r}")
        vars_ = [self._coerce(a) for a in args]
        if name == "matmul" and not (len(vars_[0].shape) == 2 and len(vars_[1].shape) in (1, 2)):
            raise ShapeError(f"matmul needs a matrix on the left, got {vars_[0].shape} @ {vars_[1].shape}")
        if name == "transpose" and len(vars_[0].shape) != 2:
            raise ShapeError("transpose is defined for matrices only")
        try:
            with np.errstate(all="ignore"):
                probe = PRIMITIVES[name].value(attr, *[np.ones(v.shape) for v in vars_])
        except (ValueError, IndexError) as exc:
            raise ShapeError(f"{name} rejected shapes {[v.shape for v in vars_]}: {exc}") from None
        return self._append(Node(name, tuple(v.index for v in vars_), np.shape(probe), attr))

    # named helpers for the non-operator primitives
    def exp(self, x):
        return self.op("exp", x)

    def log(self, x):
        return self.op("log", x)

    def sigmoid(self, x):
        return self.op("sigmoid", x)

    def relu(self, x):
        return self.op("relu", x)

    def maximum(self, a, b):
        return self.op("maximum", a, b)

    def softmax(self, x):
        return self.op("softmax", x)

    def log_softmax(self, x):
        return self.op("log_softmax", x)

    def sum(self, x, axis=None):
        x = self._coerce(x)
        if axis is not None:
            axis = int(axis) % len(x.shape)
        return self.op("sum", x, attr=axis)

    def mean(self, x, axis=None):
        x = self._coerce(x)
        count = int(np.prod(x.shape)) if axis is None else x.shape[axis]
        return self.sum(x, axis) * (1.0 / count)

    def gather(self, x, index):
        x = self._coerce(x)
        idx = np.array(index, dtype=np.int64)
        if idx.shape != x.shape[:-1]:
            raise ShapeError(f"gather index shape {idx.shape} does not match {x.shape[:-1]}")
        if idx.size and (idx.min() < 0 or idx.max() >= x.shape[-1]):
            raise ShapeError("gather index out of range")
        idx.setflags(write=False)
        return self.op("gather", x, attr=idx)

    def reshape(self, x, shape):
        return self.op("reshape", x, attr=tuple(shape))

    def concat(self, *xs):
        return self.op("concat", *xs)

    def build(self, output: Var) -> Tape:
        """Freeze the recording; nodes the output does not depend on are dropped."""
        output = self._coerce(output)
        needed = [False] * len(self._nodes)
        needed[output.index] = True
        for i in range(output.index, -1, -1):
            if needed[i]:
                for j in self._nodes[i].args:
                    needed[j] = True
        remap, nodes = {}, []
        for i, node in enumerate(self._nodes[: output.index + 1]):
            if needed[i] or node.op == "input":
                remap[i] = len(nodes)
                nodes.append(Node(node.op, tuple(remap[j] for j in node.args), node.shape, node.attr))
        return Tape(tuple(nodes), Layout(list(self._inputs.items())), remap[output.index])


# ---------------------------------------------------------------------------
# public functional surface


def _as_vector(x, layout: Layout, what: str) -> np.ndarray:
    if isinstance(x, FlatVector):
        if x.layout.size != layout.size:
            raise ShapeError(f"{what} has size {x.layout.size}, expected {layout.size}")
        return x.values
    arr = np.asarray(x, dtype=np.float64).reshape(-1)
    if arr.size != layout.size:
        raise ShapeError(f"{what} has size {arr.size}, expected {layout.size}")
    return arr


def forward_eval(tape: Tape, inputs) -> FlatVector:
    """Evaluate the tape; ``inputs`` is a FlatVector (or mapping) covering every slot."""
    work = tape.evaluate(inputs)
    return FlatVector(work[tape.output], tape.output_layout)


def value_and_vjp(tape: Tape, inputs, cotangent) -> tuple[np.ndarray, FlatVector]:
    work = tape.evaluate(inputs)
    cot = _as_vector(cotangent, tape.output_layout, "cotangent")
    grads = tape.backward(work, cot)
    flat = np.concatenate([grads[n].reshape(-1) for n in tape.input_layout]) if len(tape.input_layout) else np.zeros(0)
    return work[tape.output], FlatVector(flat, tape.input_layout)


def vjp(tape: Tape, inputs, cotangent) -> FlatVector:
    """Return ``cotangent^T . d(output)/d(inputs)`` aligned with ``tape.input_layout``."""
    return value_and_vjp(tape, inputs, cotangent)[1]


def jvp_batch(tape: Tape, inputs, tangents) -> np.ndarray:
    """Push a ``(batch, input_size)`` block of tangents; returns ``(batch, output_size)``."""
    tangents = np.asarray(tangents, dtype=np.float64)
    if tangents.ndim != 2 or tangents.shape[1] != tape.input_layout.size:
        raise ShapeError(f"tangents must have shape (batch, {tape.input_layout.size}), got {tangents.shape}")
    return push_tangents(tape, tape.evaluate(inputs), tangents)


def push_tangents(tape: Tape, work: list, tangents: np.ndarray) -> np.ndarray:
    """Like :func:`jvp_batch` but reuses a workspace from ``tape.evaluate``."""
    batch = tangents.shape[0]
    seeds = {}
    for name, shape in tape.input_layout.items():
        block = tangents[:, tape.input_layout.slice(name)]
        seeds[name] = block.reshape((batch,) + shape) if np.any(block) else None
    return tape.tangents(work, seeds, batch).reshape(batch, -1)


def jvp(tape: Tape, inputs, tangent) -> FlatVector:
    """Return ``d(output)/d(inputs) . tangent``."""
    t = _as_vector(tangent, tape.input_layout, "tangent")
    return FlatVector(jvp_batch(tape, inputs, t[None, :])[0], tape.output_layout)
