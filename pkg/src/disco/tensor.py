"""Dense real arrays with define-by-run reverse-mode differentiation.

A :class:`Graph` records every operation applied to its leaves as an ordered
list of nodes. Insertion order is a topological order, so the graph can be
replayed with new leaf values (:func:`evaluate`), differentiated
(:func:`backward`) and checked against central differences
(:func:`finite_diff_check`).

Only scalar-times-tensor broadcasting is supported; every other operand pair
must agree exactly in shape. Bias addition lives inside :meth:`Graph.affine`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, NumericOverflowError, ShapeError

NORM_EPS = 1e-9
_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    attrs: dict
    value: np.ndarray
    name: str | None = None
    trainable: bool = False


class Tensor:
    """Handle to one node of a :class:`Graph`."""

    __slots__ = ("graph", "index")

    def __init__(self, graph: "Graph", index: int):
        self.graph = graph
        self.index = index

    @property
    def node(self) -> Node:
        return self.graph.nodes[self.index]

    @property
    def value(self) -> np.ndarray:
        return self.graph.nodes[self.index].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def __repr__(self) -> str:
        n = self.node
        return f"Tensor(#{self.index} {n.op} shape={self.shape})"

    def __add__(self, other):
        return self.graph.add(self, other)

    def __sub__(self, other):
        return self.graph.sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return self.graph.mul(self, other)
        return self.graph.scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return NotImplemented
        return self.graph.scale(self, 1.0 / float(other))

    def __neg__(self):
        return self.graph.scale(self, -1.0)

    def __matmul__(self, other):
        return self.graph.matmul(self, other)

    @property
    def T(self):
        return self.graph.transpose(self)


# --------------------------------------------------------------------------
# forward / vector-Jacobian product kernels, keyed by op name
# --------------------------------------------------------------------------


def _l2n_forward(x, eps=NORM_EPS):
    norms = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    degenerate = norms < eps
    safe = np.where(degenerate, 1.0, norms)
    y = np.where(degenerate, 0.0, x / safe)
    return y


def _l2n_vjp(g, ins, y, attrs):
    (x,) = ins
    norms = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    degenerate = norms < attrs.get("eps", NORM_EPS)
    safe = np.where(degenerate, 1.0, norms)
    gx = (g - y * np.sum(g * y, axis=-1, keepdims=True)) / safe
    return (np.where(degenerate, 0.0, gx),)


def _softmax(x):
    z = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def _log_softmax(x):
    z = x - np.max(x, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_K * (x + _GELU_C * x**3)))


def _gelu_vjp(g, ins, y, attrs):
    (x,) = ins
    t = np.tanh(_GELU_K * (x + _GELU_C * x**3))
    dt = (1.0 - t * t) * _GELU_K * (1.0 + 3.0 * _GELU_C * x * x)
    return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)


def _expand(g, shape, axis):
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def _take_rows_vjp(g, ins, y, attrs):
    out = np.zeros_like(ins[0])
    np.add.at(out, np.asarray(attrs["index"]), g)
    return (out,)


def _concat_vjp(g, ins, y, attrs):
    axis = attrs["axis"]
    bounds = np.cumsum([a.shape[axis] for a in ins])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


_FORWARD: dict[str, Callable] = {
    "matmul": lambda a, b: a @ b,
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "scale": lambda a, factor: factor * a,
    "softmax": _softmax,
    "log_softmax": _log_softmax,
    "l2_normalize": _l2n_forward,
    "renormalize": lambda a: a / np.sum(a, axis=-1, keepdims=True),
    "mean": lambda a, axis: np.mean(a, axis=axis),
    "sum": lambda a, axis: np.sum(a, axis=axis),
    "concat": lambda *xs, axis: np.concatenate(xs, axis=axis),
    "affine": lambda x, w, b: x @ w + b,
    "gelu": _gelu,
    "tanh": np.tanh,
    "softplus": lambda a: np.logaddexp(0.0, a),
    "log": np.log,
    "exp": np.exp,
    "reshape": lambda a, shape: a.reshape(shape),
    "transpose": lambda a: a.T,
    "take_rows": lambda a, index: a[np.asarray(index)],
}

_VJP: dict[str, Callable] = {
    "matmul": lambda g, ins, y, at: (g @ ins[1].T, ins[0].T @ g),
    "add": lambda g, ins, y, at: (g, g),
    "sub": lambda g, ins, y, at: (g, -g),
    "mul": lambda g, ins, y, at: (g * ins[1], g * ins[0]),
    "scale": lambda g, ins, y, at: (at["factor"] * g,),
    "softmax": lambda g, ins, y, at: (y * (g - np.sum(g * y, axis=-1, keepdims=True)),),
    "log_softmax": lambda g, ins, y, at: (g - np.exp(y) * np.sum(g, axis=-1, keepdims=True),),
    "l2_normalize": _l2n_vjp,
    "renormalize": lambda g, ins, y, at: (
        (g - np.sum(g * y, axis=-1, keepdims=True)) / np.sum(ins[0], axis=-1, keepdims=True),
    ),
    "mean": lambda g, ins, y, at: (
        _expand(g, ins[0].shape, at["axis"])
        / (ins[0].size if at["axis"] is None else ins[0].shape[at["axis"]]),
    ),
    "sum": lambda g, ins, y, at: (_expand(g, ins[0].shape, at["axis"]),),
    "concat": _concat_vjp,
    "affine": lambda g, ins, y, at: (g @ ins[1].T, ins[0].T @ g, np.sum(g, axis=0)),
    "gelu": _gelu_vjp,
    "tanh": lambda g, ins, y, at: (g * (1.0 - y * y),),
    "softplus": lambda g, ins, y, at: (g * np.exp(ins[0] - y),),
    "log": lambda g, ins, y, at: (g / ins[0],),
    "exp": lambda g, ins, y, at: (g * y,),
    "reshape": lambda g, ins, y, at: (g.reshape(ins[0].shape),),
    "transpose": lambda g, ins, y, at: (g.T,),
    "take_rows": _take_rows_vjp,
}

LEAF_OPS = ("param", "input", "const")


class Graph:
    """Recorder of operations on named leaves.

    ``dtype`` selects storage precision; float32 is an opt-in mode and the
    gradient checker is only meaningful at the float64 default.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self.params: dict[str, int] = {}
        self.inputs: dict[str, int] = {}
        self.flags: list[str] = []

    def __len__(self) -> int:
        return len(self.nodes)

    # ---- leaves -----------------------------------------------------------

    def _leaf(self, op, value, name=None, trainable=False) -> Tensor:
        arr = np.array(value, dtype=self.dtype)
        if not np.all(np.isfinite(arr)):
            raise NumericOverflowError(f"leaf {name or len(self.nodes)}")
        self.nodes.append(Node(op, (), {}, arr, name, trainable))
        return Tensor(self, len(self.nodes) - 1)

    def param(self, name: str, value) -> Tensor:
        if name in self.params or name in self.inputs:
            raise ContractError(f"duplicate leaf name {name!r}")
        t = self._leaf("param", value, name, True)
        self.params[name] = t.index
        return t

    def input(self, name: str, value) -> Tensor:
        if name in self.params or name in self.inputs:
            raise ContractError(f"duplicate leaf name {name!r}")
        t = self._leaf("input", value, name)
        self.inputs[name] = t.index
        return t

    def constant(self, value) -> Tensor:
        return self._leaf("const", value)

    def bind(self, arrays: Mapping[str, np.ndarray], prefix: str = "") -> dict[str, Tensor]:
        """Register every array of ``arrays`` as a trainable parameter."""
        return {k: self.param(prefix + k, v) for k, v in arrays.items()}

    # ---- recording ----------------------------------------------------------

    def _as_tensor(self, x) -> Tensor:
        if isinstance(x, Tensor):
            if x.graph is not self:
                raise ContractError("tensor belongs to a different graph")
            return x
        return self.constant(x)

    def _record(self, op: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
        values = [t.value for t in inputs]
        with np.errstate(all="ignore"):  # non-finite results are reported below
            out = _FORWARD[op](*values, **attrs)
        out = np.asarray(out, dtype=self.dtype)
        label = f"node {len(self.nodes)} ({op})"
        if not np.all(np.isfinite(out)):
            raise NumericOverflowError(label)
        if op == "l2_normalize":
            norms = np.sqrt(np.sum(values[0] ** 2, axis=-1))
            if np.any(norms < NORM_EPS):
                self.flags.append(f"{label}: degenerate vector normalized to zero")
        self.nodes.append(Node(op, tuple(t.index for t in inputs), attrs, out))
        return Tensor(self, len(self.nodes) - 1)

    def _label(self, op: str) -> str:
        return f"node {len(self.nodes)} ({op})"

    def _same_shape(self, op, a, b):
        if a.shape != b.shape:
            raise ShapeError(self._label(op), [a.shape, b.shape])

    # ---- operations ---------------------------------------------------------

    def matmul(self, a, b) -> Tensor:
        a, b = self._as_tensor(a), self._as_tensor(b)
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(self._label("matmul"), [a.shape, b.shape], "expected (m,k) @ (k,n)")
        return self._record("matmul", [a, b])

    def add(self, a, b) -> Tensor:
        a, b = self._as_tensor(a), self._as_tensor(b)
        self._same_shape("add", a, b)
        return self._record("add", [a, b])

    def sub(self, a, b) -> Tensor:
        a, b = self._as_tensor(a), self._as_tensor(b)
        self._same_shape("sub", a, b)
        return self._record("sub", [a, b])

    def mul(self, a, b) -> Tensor:
        a, b = self._as_tensor(a), self._as_tensor(b)
        self._same_shape("mul", a, b)
        return self._record("mul", [a, b])

    def scale(self, a, factor: float) -> Tensor:
        return self._record("scale", [self._as_tensor(a)], factor=float(factor))

    def softmax(self, a) -> Tensor:
        return self._record("softmax", [self._as_tensor(a)])

    def log_softmax(self, a) -> Tensor:
        return self._record("log_softmax", [self._as_tensor(a)])

    def l2_normalize(self, a) -> Tensor:
        return self._record("l2_normalize", [self._as_tensor(a)], eps=NORM_EPS)

    def renormalize(self, a) -> Tensor:
        """Divide each last-axis slice of a positive tensor by its sum."""
        a = self._as_tensor(a)
        if np.any(a.value < 0):
            raise ContractError(f"{self._label('renormalize')}: negative entries")
        return self._record("renormalize", [a])

    def mean(self, a, axis: int | None = None) -> Tensor:
        return self._record("mean", [self._as_tensor(a)], axis=axis)

    def sum(self, a, axis: int | None = None) -> Tensor:
        return self._record("sum", [self._as_tensor(a)], axis=axis)

    def concat(self, tensors: Iterable, axis: int = -1) -> Tensor:
        ts = [self._as_tensor(t) for t in tensors]
        ref = ts[0].shape
        ax = axis % len(ref)
        for t in ts[1:]:
            s = t.shape
            if len(s) != len(ref) or any(s[d] != ref[d] for d in range(len(ref)) if d != ax):
                raise ShapeError(self._label("concat"), [t.shape for t in ts])
        return self._record("concat", ts, axis=ax)

    def affine(self, x, w, b) -> Tensor:
        x, w, b = self._as_tensor(x), self._as_tensor(w), self._as_tensor(b)
        if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
            raise ShapeError(self._label("affine"), [x.shape, w.shape, b.shape])
        return self._record("affine", [x, w, b])

    def gelu(self, a) -> Tensor:
        return self._record("gelu", [self._as_tensor(a)])

    def tanh(self, a) -> Tensor:
        return self._record("tanh", [self._as_tensor(a)])

    def softplus(self, a) -> Tensor:
        return self._record("softplus", [self._as_tensor(a)])

    def log(self, a) -> Tensor:
        return self._record("log", [self._as_tensor(a)])

    def exp(self, a) -> Tensor:
        return self._record("exp", [self._as_tensor(a)])

    def reshape(self, a, shape) -> Tensor:
        a = self._as_tensor(a)
        shape = tuple(int(s) for s in shape)
        if math.prod(shape) != a.value.size:
            raise ShapeError(self._label("reshape"), [a.shape, shape])
        return self._record("reshape", [a], shape=shape)

    def transpose(self, a) -> Tensor:
        a = self._as_tensor(a)
        if a.value.ndim != 2:
            raise ShapeError(self._label("transpose"), [a.shape], "expected a matrix")
        return self._record("transpose", [a])

    def take_rows(self, a, index: Sequence[int]) -> Tensor:
        a = self._as_tensor(a)
        index = tuple(int(i) for i in index)
        if any(i < 0 or i >= a.shape[0] for i in index):
            raise ShapeError(self._label("take_rows"), [a.shape], f"row index out of range: {index}")
        return self._record("take_rows", [a], index=index)

    # ---- replay -------------------------------------------------------------

    def _resolve(self, name: str) -> int:
        if name in self.params:
            return self.params[name]
        if name in self.inputs:
            return self.inputs[name]
        raise ContractError(f"unknown leaf {name!r}")

    def downstream(self, leaf: int) -> list[int]:
        """Indices of non-leaf nodes whose value depends on ``leaf``."""
        dep = np.zeros(len(self.nodes), dtype=bool)
        dep[leaf] = True
        out = []
        for i in range(leaf + 1, len(self.nodes)):
            node = self.nodes[i]
            if node.inputs and any(dep[j] for j in node.inputs):
                dep[i] = True
                out.append(i)
        return out

    def replay(self, overrides: Mapping[str, np.ndarray] | None = None,
               only: Sequence[int] | None = None,
               base: list[np.ndarray] | None = None) -> list[np.ndarray]:
        """Recompute node values with some leaves replaced.

        ``only`` restricts recomputation to the listed nodes; everything else
        is taken from ``base`` (default: the recorded values).
        """
        values = list(base) if base is not None else [n.value for n in self.nodes]
        for name, v in (overrides or {}).items():
            i = self._resolve(name)
            arr = np.asarray(v, dtype=self.dtype)
            if arr.shape != self.nodes[i].value.shape:
                raise ShapeError(f"leaf {name}", [self.nodes[i].value.shape, arr.shape])
            values[i] = arr
        order = only if only is not None else range(len(self.nodes))
        for i in order:
            node = self.nodes[i]
            if node.op in LEAF_OPS:
                continue
            with np.errstate(all="ignore"):
                out = _FORWARD[node.op](*(values[j] for j in node.inputs), **node.attrs)
            if not np.all(np.isfinite(out)):
                raise NumericOverflowError(f"node {i} ({node.op})")
            values[i] = out
        return values


def _output_index(graph: Graph, output) -> int:
    if output is None:
        if not graph.nodes:
            raise ContractError("empty graph")
        return len(graph.nodes) - 1
    if isinstance(output, Tensor):
        return output.index
    return int(output)


def evaluate(graph: Graph, inputs: Mapping[str, np.ndarray] | None = None, output=None) -> np.ndarray:
    """Forward value of ``output`` (default: last node) with leaves overridden by ``inputs``."""
    idx = _output_index(graph, output)
    return graph.replay(inputs)[idx]


def backward(graph: Graph, output=None, values: list[np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """Gradient of a scalar node with respect to every trainable parameter.

    Parameters the output does not depend on receive zero arrays.
    """
    idx = _output_index(graph, output)
    vals = values if values is not None else [n.value for n in graph.nodes]
    if vals[idx].size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {vals[idx].shape}")

    needs = np.zeros(len(graph.nodes), dtype=bool)
    for i, node in enumerate(graph.nodes[: idx + 1]):
        needs[i] = node.trainable or any(needs[j] for j in node.inputs)

    grads: list[np.ndarray | None] = [None] * len(graph.nodes)
    grads[idx] = np.ones_like(vals[idx])
    for i in range(idx, -1, -1):
        g = grads[i]
        node = graph.nodes[i]
        if g is None or node.op in LEAF_OPS:
            continue
        ins = [vals[j] for j in node.inputs]
        parts = _VJP[node.op](g, ins, vals[i], node.attrs)
        for j, gj in zip(node.inputs, parts):
            if not needs[j]:
                continue
            grads[j] = gj if grads[j] is None else grads[j] + gj

    return {
        name: (np.array(grads[i]) if grads[i] is not None else np.zeros_like(vals[i]))
        for name, i in graph.params.items()
    }


@dataclass
class GradientReport:
    analytic: dict[str, np.ndarray]
    numeric: dict[str, np.ndarray]
    max_rel_error: float
    worst: tuple[str, tuple[int, ...]] | None = None
    per_param: dict[str, float] = field(default_factory=dict)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol


def relative_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return np.abs(a - n) / denom


_STENCILS = {
    2: ((1.0, 0.5), (-1.0, -0.5)),
    4: ((2.0, -1.0 / 12), (1.0, 8.0 / 12), (-1.0, -8.0 / 12), (-2.0, 1.0 / 12)),
}


def finite_diff_check(graph: Graph, inputs: Mapping[str, np.ndarray] | None = None,
                      step: float = 1e-6, output=None,
                      params: Sequence[str] | None = None, order: int = 2) -> GradientReport:
    """Compare :func:`backward` with central differences on every parameter entry.

    ``order=2`` is the plain (f(x+h) - f(x-h)) / 2h quotient; ``order=4`` uses
    the five-point central stencil, which tolerates a larger step and so
    loses less to cancellation when gradients are tiny.
    """
    if step <= 0:
        raise ContractError("finite-difference step must be positive")
    if order not in _STENCILS:
        raise ContractError(f"stencil order must be one of {sorted(_STENCILS)}")
    stencil = _STENCILS[order]
    idx = _output_index(graph, output)
    base = graph.replay(inputs)
    analytic = backward(graph, idx, values=base)
    names = list(params) if params is not None else list(graph.params)
    feeds = np.zeros(len(graph.nodes), dtype=bool)
    feeds[idx] = True
    for i in range(idx, -1, -1):
        if feeds[i]:
            feeds[list(graph.nodes[i].inputs)] = True

    numeric: dict[str, np.ndarray] = {}
    per_param: dict[str, float] = {}
    worst_err, worst = 0.0, None
    for name in names:
        leaf = graph.params[name]
        affected = [i for i in graph.downstream(leaf) if feeds[i]]
        x0 = base[leaf]
        num = np.zeros_like(x0)
        if idx in affected:
            for pos in np.ndindex(x0.shape):
                vals = list(base)
                acc = 0.0
                for offset, weight in stencil:
                    xs = x0.copy()
                    xs[pos] += offset * step
                    vals[leaf] = xs
                    acc += weight * float(graph.replay(only=affected, base=vals)[idx].reshape(-1)[0])
                num[pos] = acc / step
        numeric[name] = num
        err = relative_error(analytic[name], num)
        per_param[name] = float(err.max()) if err.size else 0.0
        if err.size and (worst is None or per_param[name] > worst_err):
            worst_err = per_param[name]
            worst = (name, tuple(int(v) for v in np.unravel_index(int(np.argmax(err)), err.shape)))
    return GradientReport(analytic, numeric, worst_err, worst, per_param)
