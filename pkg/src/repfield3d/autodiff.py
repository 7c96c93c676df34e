"""Tape-based reverse-mode differentiation over the package's primitives.

A :class:`Graph` records nodes in creation order, which is already a
topological order.  Each node keeps the primitive that produced it, the ids of
its inputs and the values saved by the forward pass.  :func:`backward` walks
the tape once in reverse, so fan-out contributions accumulate in a fixed order
and results are bitwise reproducible.

Graphs can be replayed with substituted parameter values, which is what the
finite-difference checker uses.

Example::

    g = Graph()
    w = g.param("w", np.ones(3))
    loss = ops.sum(w * w)
    grads = backward(g, loss)        # {"w": array([2., 2., 2.])}
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from . import conv3d as _conv
from .tensor import (
    LN_EPS,
    NonFiniteError,
    as_tensor,
    check_finite,
    gelu as _gelu,
    gelu_grad as _gelu_grad,
    layer_norm_stats,
    sigmoid as _sigmoid,
)


class Prim(NamedTuple):
    name: str
    # forward(*input_values, **attrs) -> (output, saved)
    forward: Callable
    # backward(saved, upstream, *input_values, **attrs) -> per-input grads (None = no path)
    backward: Callable


class Node:
    __slots__ = ("graph", "id", "value", "prim", "inputs", "attrs", "saved", "name", "needs_grad")

    def __init__(self, graph, nid, value, prim=None, inputs=(), attrs=None, saved=None, name=None):
        self.graph = graph
        self.id = nid
        self.value = value
        self.prim = prim
        self.inputs = inputs
        self.attrs = attrs or {}
        self.saved = saved
        self.name = name
        self.needs_grad = name is not None or any(graph.nodes[i].needs_grad for i in inputs)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = self.name or (self.prim.name if self.prim else "const")
        return f"Node(#{self.id} {label} {self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)


class Graph:
    """Append-only tape of nodes.  Parameters are leaves registered by name."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, int] = {}

    def param(self, name: str, value) -> Node:
        if name in self.params:
            raise ValueError(f"parameter {name!r} already registered")
        node = Node(self, len(self.nodes), check_finite(as_tensor(value).copy(), name), name=name)
        self.nodes.append(node)
        self.params[name] = node.id
        return node

    def const(self, value) -> Node:
        node = Node(self, len(self.nodes), as_tensor(value))
        self.nodes.append(node)
        return node

    def lift(self, x) -> Node:
        if isinstance(x, Node):
            if x.graph is not self:
                raise ValueError("node belongs to a different graph")
            return x
        return self.const(x)

    def apply(self, prim: Prim, *inputs: Node, **attrs) -> Node:
        vals = [n.value for n in inputs]
        out, saved = prim.forward(*vals, **attrs)
        out = check_finite(as_tensor(out), prim.name)
        node = Node(self, len(self.nodes), out, prim, tuple(n.id for n in inputs), attrs, saved)
        self.nodes.append(node)
        return node

    def replay(self, overrides: dict[str, np.ndarray], output: Node) -> np.ndarray:
        """Re-run the forward pass with some parameter values substituted."""
        vals: list[np.ndarray] = []
        for node in self.nodes[: output.id + 1]:
            if node.prim is None:
                v = overrides.get(node.name, node.value) if node.name is not None else node.value
            else:
                v, _ = node.prim.forward(*(vals[i] for i in node.inputs), **node.attrs)
            vals.append(as_tensor(v))
        return vals[output.id]

    def param_values(self) -> dict[str, np.ndarray]:
        return {name: self.nodes[i].value for name, i in self.params.items()}


def _graph_of(*xs) -> Graph:
    for x in xs:
        if isinstance(x, Node):
            return x.graph
    raise TypeError("at least one operand must be a graph node")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    # only scalar broadcasting is supported
    if g.shape == tuple(shape):
        return g
    return np.asarray(g.sum()).reshape(shape)


def _check_binary(a, b):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


# -- primitive table ----------------------------------------------------------


def _add_f(a, b):
    _check_binary(a, b)
    return a + b, None


def _add_b(saved, g, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _sub_f(a, b):
    _check_binary(a, b)
    return a - b, None


def _sub_b(saved, g, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _mul_f(a, b):
    _check_binary(a, b)
    return a * b, None


def _mul_b(saved, g, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _div_f(a, b):
    _check_binary(a, b)
    if np.any(b == 0):
        raise NonFiniteError("division by zero")
    return a / b, None


def _div_b(saved, g, a, b):
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


def _scale_f(a, *, k):
    return a * k, None


def _scale_b(saved, g, a, *, k):
    return (g * k,)


def _sum_f(a):
    return np.asarray(a.sum()), None


def _sum_b(saved, g, a):
    return (np.full(a.shape, float(g)),)


def _square_f(a):
    return a * a, None


def _square_b(saved, g, a):
    return (2.0 * a * g,)


def _sqrt_f(a):
    out = np.sqrt(a)
    return out, out


def _sqrt_b(out, g, a):
    return (g / (2.0 * out),)


def _clamp_min_f(a, *, floor):
    return np.maximum(a, floor), None


def _clamp_min_b(saved, g, a, *, floor):
    return (np.where(a >= floor, g, 0.0),)


def _reshape_f(a, *, shape):
    return a.reshape(shape), None


def _reshape_b(saved, g, a, *, shape):
    return (g.reshape(a.shape),)


def _tile_f(a, *, shape):
    # scalar or exact-shape broadcast to a full tensor
    if a.ndim and a.shape != tuple(shape):
        if a.shape != tuple(shape)[-a.ndim:]:
            raise ValueError(f"cannot tile {a.shape} to {shape}")
    return np.broadcast_to(a, shape).copy(), None


def _tile_b(saved, g, a, *, shape):
    lead = g.ndim - a.ndim
    out = g.sum(axis=tuple(range(lead))) if lead else g
    return (out.reshape(a.shape),)


def _sigmoid_f(a):
    s = _sigmoid(a)
    return s, s


def _sigmoid_b(s, g, a):
    return (g * s * (1.0 - s),)


def _gelu_f(a):
    return _gelu(a), None


def _gelu_b(saved, g, a):
    return (g * _gelu_grad(a),)


def _ln_f(x, gain, bias, *, axes, eps):
    xhat, inv = layer_norm_stats(x, axes, eps)
    view = [1] * x.ndim
    view[1] = -1
    return xhat * gain.reshape(view) + bias.reshape(view), (xhat, inv)


def _ln_b(saved, g, x, gain, bias, *, axes, eps):
    xhat, inv = saved
    view = [1] * x.ndim
    view[1] = -1
    red = tuple(i for i in range(x.ndim) if i != 1)
    dgain = (g * xhat).sum(axis=red)
    dbias = g.sum(axis=red)
    gh = g * gain.reshape(view)
    dx = inv * (gh - gh.mean(axis=axes, keepdims=True)
                - xhat * (gh * xhat).mean(axis=axes, keepdims=True))
    return dx, dgain, dbias


def _dwconv_f(x, w, *, padding):
    return _conv.dwconv3d_with_columns(x, w, padding)


def _dwconv_b(cols, g, x, w, *, padding):
    return _conv.dwconv3d_backward(x, w, g, padding, columns=cols)


def _patch_f(x, w, b):
    return _conv.patch_conv3d(x, w, b), None


def _patch_b(saved, g, x, w, b):
    return _conv.patch_conv3d_backward(x, w, g)


def _pointwise_f(x, w, b):
    return np.einsum("ncdhw,oc->nodhw", x, w) + b.reshape(1, -1, 1, 1, 1), None


def _pointwise_b(saved, g, x, w, b):
    dx = np.einsum("nodhw,oc->ncdhw", g, w)
    dw = np.einsum("nodhw,ncdhw->oc", g, x)
    return dx, dw, g.sum(axis=(0, 2, 3, 4))


def _upsample_f(x, *, factor):
    out = x
    for ax in (2, 3, 4):
        out = np.repeat(out, factor, axis=ax)
    return out, None


def _upsample_b(saved, g, x, *, factor):
    n, c, d, h, w = x.shape
    return (g.reshape(n, c, d, factor, h, factor, w, factor).sum(axis=(3, 5, 7)),)


def _index_f(a, *, index):
    return np.asarray(a[index]), None


def _index_b(saved, g, a, *, index):
    out = np.zeros_like(a)
    out[index] = g
    return (out,)


def _embed_f(a, *, size):
    return _conv.embed_kernel(a, size), None


def _embed_b(saved, g, a, *, size):
    return (_conv.crop_kernel(g, a.shape[2]),)


PRIMS = {
    p.name: p
    for p in (
        Prim("add", _add_f, _add_b),
        Prim("sub", _sub_f, _sub_b),
        Prim("mul", _mul_f, _mul_b),
        Prim("div", _div_f, _div_b),
        Prim("scale", _scale_f, _scale_b),
        Prim("sum", _sum_f, _sum_b),
        Prim("square", _square_f, _square_b),
        Prim("sqrt", _sqrt_f, _sqrt_b),
        Prim("clamp_min", _clamp_min_f, _clamp_min_b),
        Prim("reshape", _reshape_f, _reshape_b),
        Prim("tile", _tile_f, _tile_b),
        Prim("sigmoid", _sigmoid_f, _sigmoid_b),
        Prim("gelu", _gelu_f, _gelu_b),
        Prim("layer_norm", _ln_f, _ln_b),
        Prim("dwconv3d", _dwconv_f, _dwconv_b),
        Prim("patch_conv3d", _patch_f, _patch_b),
        Prim("pointwise_conv3d", _pointwise_f, _pointwise_b),
        Prim("upsample_nearest", _upsample_f, _upsample_b),
        Prim("index", _index_f, _index_b),
        Prim("embed_kernel", _embed_f, _embed_b),
    )
}


class ops:
    """Graph-building wrappers, one per primitive."""

    @staticmethod
    def add(a, b):
        g = _graph_of(a, b)
        return g.apply(PRIMS["add"], g.lift(a), g.lift(b))

    @staticmethod
    def sub(a, b):
        g = _graph_of(a, b)
        return g.apply(PRIMS["sub"], g.lift(a), g.lift(b))

    @staticmethod
    def mul(a, b):
        g = _graph_of(a, b)
        return g.apply(PRIMS["mul"], g.lift(a), g.lift(b))

    @staticmethod
    def div(a, b):
        g = _graph_of(a, b)
        return g.apply(PRIMS["div"], g.lift(a), g.lift(b))

    @staticmethod
    def scale(a: Node, k: float):
        return a.graph.apply(PRIMS["scale"], a, k=float(k))

    @staticmethod
    def sum(a: Node):
        return a.graph.apply(PRIMS["sum"], a)

    @staticmethod
    def mean(a: Node):
        return ops.scale(ops.sum(a), 1.0 / a.value.size)

    @staticmethod
    def square(a: Node):
        return a.graph.apply(PRIMS["square"], a)

    @staticmethod
    def sqrt(a: Node):
        return a.graph.apply(PRIMS["sqrt"], a)

    @staticmethod
    def clamp_min(a: Node, floor: float):
        return a.graph.apply(PRIMS["clamp_min"], a, floor=float(floor))

    @staticmethod
    def reshape(a: Node, shape):
        return a.graph.apply(PRIMS["reshape"], a, shape=tuple(shape))

    @staticmethod
    def tile(a: Node, shape):
        return a.graph.apply(PRIMS["tile"], a, shape=tuple(shape))

    @staticmethod
    def sigmoid(a: Node):
        return a.graph.apply(PRIMS["sigmoid"], a)

    @staticmethod
    def gelu(a: Node):
        return a.graph.apply(PRIMS["gelu"], a)

    @staticmethod
    def layer_norm(x: Node, gain, bias, axes=None, eps: float = LN_EPS):
        """Normalize over ``axes`` (default spatial axes 2..) with per-channel affine."""
        g = x.graph
        ndim = x.value.ndim
        axes = tuple(sorted(a % ndim for a in (axes if axes is not None else range(2, ndim))))
        if not axes:
            raise ValueError("layer_norm needs at least one normalization axis")
        return g.apply(PRIMS["layer_norm"], x, g.lift(gain), g.lift(bias), axes=axes, eps=float(eps))

    @staticmethod
    def dwconv3d(x, w, padding=None):
        g = _graph_of(x, w)
        return g.apply(PRIMS["dwconv3d"], g.lift(x), g.lift(w), padding=padding)

    @staticmethod
    def patch_conv3d(x, w, b):
        g = _graph_of(x, w, b)
        return g.apply(PRIMS["patch_conv3d"], g.lift(x), g.lift(w), g.lift(b))

    @staticmethod
    def pointwise_conv3d(x, w, b):
        g = _graph_of(x, w, b)
        return g.apply(PRIMS["pointwise_conv3d"], g.lift(x), g.lift(w), g.lift(b))

    @staticmethod
    def upsample_nearest(x: Node, factor: int):
        return x.graph.apply(PRIMS["upsample_nearest"], x, factor=int(factor))

    @staticmethod
    def index(a: Node, index):
        return a.graph.apply(PRIMS["index"], a, index=index)

    @staticmethod
    def embed_kernel(a: Node, size: int):
        return a.graph.apply(PRIMS["embed_kernel"], a, size=int(size))


add, sub, mul, div, scale = ops.add, ops.sub, ops.mul, ops.div, ops.scale


# -- differentiation ----------------------------------------------------------


def backward(graph: Graph, output: Node, seed=None, wrt=None) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of ``output`` for registered parameters.

    ``seed`` defaults to ones (the output must then be a scalar unless a seed
    of matching shape is given).  ``wrt`` restricts the returned parameters;
    asking for an unknown name raises ``KeyError``.
    """
    if output.graph is not graph:
        raise ValueError("output node belongs to a different graph")
    names = list(graph.params) if wrt is None else list(wrt)
    for name in names:
        if name not in graph.params:
            raise KeyError(f"unregistered parameter {name!r}")
    if seed is None:
        if output.value.size != 1:
            raise ValueError("non-scalar output needs an explicit seed")
        seed = np.ones_like(output.value)
    seed = as_tensor(seed)
    if seed.shape != output.value.shape:
        raise ValueError(f"seed shape {seed.shape} != output shape {output.value.shape}")

    grads: dict[int, np.ndarray] = {output.id: seed.copy()}
    for node in reversed(graph.nodes[: output.id + 1]):
        g = grads.get(node.id)
        if g is None or node.prim is None:
            continue
        ins = [graph.nodes[i] for i in node.inputs]
        parts = node.prim.backward(node.saved, g, *(n.value for n in ins), **node.attrs)
        for src, part in zip(ins, parts):
            if part is None or not src.needs_grad:
                continue
            if src.id in grads:
                grads[src.id] = grads[src.id] + part
            else:
                grads[src.id] = np.asarray(part, dtype=np.float64)

    out = {}
    for name in names:
        nid = graph.params[name]
        gval = grads.get(nid)
        pshape = graph.nodes[nid].value.shape
        gval = np.zeros(pshape) if gval is None else np.asarray(gval).reshape(pshape)
        out[name] = check_finite(gval, f"gradient of {name}")
    return out


def value_and_grad(build: Callable[[Graph, dict[str, Node]], Node], params: dict[str, np.ndarray]):
    """Build a fresh graph from ``params`` and return ``(loss, grads)``."""
    g = Graph()
    nodes = {k: g.param(k, v) for k, v in params.items()}
    out = build(g, nodes)
    return float(out.value), backward(g, out)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` for every element."""
    if h <= 0:
        raise ValueError("step must be positive")
    x = as_tensor(x).copy()
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError("function returned a non-finite value")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_err(a, b, floor: float = 1e-8) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@dataclass
class GradcheckRow:
    param: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


@dataclass
class GradcheckReport:
    rows: list[GradcheckRow]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def to_csv(self, path, prefix: str = "") -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["parameter", "max_rel_err", "tol", "pass"])
            for r in self.rows:
                w.writerow([prefix + r.param, f"{r.max_rel_err:.12e}", f"{r.tol:.12e}", int(r.passed)])


def finite_diff_vjp(f: Callable[[np.ndarray], np.ndarray], x, seed, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``sum(seed * f(x))`` per element of ``x``.

    The difference ``f(x + h e_i) - f(x - h e_i)`` is taken on the full output
    before contracting with ``seed``, so outputs that ``x_i`` does not touch
    cancel exactly instead of contributing rounding noise.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    seed = as_tensor(seed)
    x = as_tensor(x).copy()
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = as_tensor(f(x))
        flat[i] = orig - h
        fm = as_tensor(f(x))
        flat[i] = orig
        diff = fp - fm
        if not np.all(np.isfinite(diff)):
            raise NonFiniteError("function returned a non-finite value")
        gflat[i] = float((seed * diff).sum()) / (2.0 * h)
    return grad


def gradcheck(graph: Graph, output: Node, tol: float = 1e-6, h: float = 1e-5, wrt=None,
              seed=None) -> GradcheckReport:
    """Compare :func:`backward` with central differences, one row per parameter.

    A non-scalar ``output`` is contracted with ``seed``.
    """
    if seed is None:
        seed = np.ones_like(output.value)
    analytic = backward(graph, output, seed=seed, wrt=wrt)
    base = graph.param_values()
    rows = []
    for name, ga in analytic.items():

        def f(v, name=name):
            return graph.replay({**base, name: v}, output)

        gn = finite_diff_vjp(f, base[name], seed, h)
        err = float(rel_err(ga, gn).max()) if ga.size else 0.0
        rows.append(GradcheckRow(name, err, tol))
    return GradcheckReport(rows)
