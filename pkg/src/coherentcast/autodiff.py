"""Reverse-mode differentiation tape over dense float64 arrays.

The model code is written once against the functions in this module
(``matmul``, ``activation``, ``mul`` ...). Called with plain numpy arrays they
evaluate directly; as soon as one argument is a :class:`Node` the result is
recorded on that node's :class:`Graph` so :func:`backward` can later pull
gradients back to the named parameter leaves.

Forward-mode tangents (used by the quantile map, which is itself a gradient)
are not a separate mechanism: they are built from the same ops, so they live
on the tape as ordinary nodes and reverse mode differentiates through them.
"""

import numpy as np

from . import activations as act
from .errors import ContractViolation, InvariantError


def tensor(data, shape=None):
    """Return an immutable float64 array, rejecting NaN/Inf.

    ``shape`` if given must have the same element count as ``data``.
    """
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != arr.size:
            raise ContractViolation(f"cannot view {arr.size} elements as shape {shape}")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ContractViolation("tensor entries must be finite")
    arr.setflags(write=False)
    return arr


class Node:
    """Handle to one value recorded on a graph."""

    __slots__ = ("graph", "index")

    def __init__(self, graph, index):
        self.graph = graph
        self.index = index

    @property
    def value(self):
        return self.graph.values[self.index]

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Node({self.graph.kinds[self.index]}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)


class Graph:
    """Append-only tape. Parents always precede children, so it is acyclic.

    A graph supports exactly one :func:`backward` call.
    """

    def __init__(self):
        self.values = []
        self.kinds = []
        self.parents = []
        self.vjps = []
        self.requires = []
        self.params = {}
        self.consumed = False

    def __len__(self):
        return len(self.values)

    def _push(self, kind, value, parents=(), vjp=None, requires=False):
        self.values.append(value)
        self.kinds.append(kind)
        self.parents.append(tuple(parents))
        self.vjps.append(vjp if requires else None)
        self.requires.append(requires)
        return Node(self, len(self.values) - 1)

    def param(self, name, value):
        """Register a named parameter leaf."""
        if name in self.params:
            raise ContractViolation(f"parameter {name!r} registered twice")
        node = self._push("param", np.asarray(value, dtype=np.float64), requires=True)
        self.params[name] = node.index
        return node

    def params_from(self, values):
        """Register every entry of a ``{name: array}`` mapping."""
        return {name: self.param(name, v) for name, v in values.items()}

    def const(self, value):
        return self._push("const", np.asarray(value, dtype=np.float64))

    def record(self, kind, value, parents, vjp):
        """Append an op node.

        ``vjp(g, need)`` receives the upstream gradient and a tuple of flags
        telling which parents need a gradient; it returns one array (or None)
        per parent.
        """
        requires = any(self.requires[p.index] for p in parents)
        return self._push(kind, value, [p.index for p in parents], vjp, requires)


def backward(graph, output):
    """Gradients of the scalar ``output`` w.r.t. every parameter leaf.

    Returns ``{name: array}``; parameters not reached by ``output`` receive
    zeros.
    """
    if not isinstance(output, Node) or output.graph is not graph:
        raise ContractViolation("output must be a node of this graph")
    if output.value.size != 1:
        raise ContractViolation(f"backward needs a scalar output, got shape {output.shape}")
    if graph.consumed:
        raise ContractViolation("backward already ran on this graph; rebuild the forward pass")
    graph.consumed = True

    grads = {output.index: np.ones_like(graph.values[output.index])}
    for i in range(output.index, -1, -1):
        if graph.vjps[i] is None:
            # leaf: parameter gradients stay in ``grads``
            continue
        g = grads.pop(i, None)
        if g is None:
            continue
        parents = graph.parents[i]
        need = tuple(graph.requires[p] for p in parents)
        for p, pg in zip(parents, graph.vjps[i](g, need)):
            if pg is None or not graph.requires[p]:
                continue
            prev = grads.get(p)
            grads[p] = pg if prev is None else prev + pg
    out = {}
    for name, idx in graph.params.items():
        g = grads.get(idx)
        out[name] = np.zeros_like(graph.values[idx]) if g is None else np.asarray(g).reshape(graph.values[idx].shape)
    return out


def finite_diff_grad(f, x, eps=1e-6):
    """Central-difference gradient of scalar ``f`` at array ``x``."""
    if eps <= 0:
        raise ContractViolation("eps must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = float(f(x.copy()))
        flat[i] = old - eps
        fm = float(f(x.copy()))
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


# ---------------------------------------------------------------------------
# op helpers


def _graph_of(*args):
    for a in args:
        if isinstance(a, Node):
            return a.graph
    return None


def _lift(graph, x):
    if isinstance(x, Node):
        if x.graph is not graph:
            raise ContractViolation("cannot mix nodes from different graphs")
        return x
    return graph.const(x)


def _val(x):
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    graph = _graph_of(a, b)
    if graph is None:
        return _val(a) + _val(b)
    a, b = _lift(graph, a), _lift(graph, b)
    sa, sb = a.shape, b.shape
    return graph.record(
        "add", a.value + b.value, (a, b),
        lambda g, need: (unbroadcast(g, sa) if need[0] else None, unbroadcast(g, sb) if need[1] else None),
    )


def sub(a, b):
    graph = _graph_of(a, b)
    if graph is None:
        return _val(a) - _val(b)
    a, b = _lift(graph, a), _lift(graph, b)
    sa, sb = a.shape, b.shape
    return graph.record(
        "sub", a.value - b.value, (a, b),
        lambda g, need: (unbroadcast(g, sa) if need[0] else None, unbroadcast(-g, sb) if need[1] else None),
    )


def mul(a, b):
    graph = _graph_of(a, b)
    if graph is None:
        return _val(a) * _val(b)
    a, b = _lift(graph, a), _lift(graph, b)
    av, bv = a.value, b.value

    def vjp(g, need):
        return (unbroadcast(g * bv, av.shape) if need[0] else None,
                unbroadcast(g * av, bv.shape) if need[1] else None)

    return graph.record("mul", av * bv, (a, b), vjp)


def div(a, b):
    graph = _graph_of(a, b)
    if graph is None:
        return _val(a) / _val(b)
    a, b = _lift(graph, a), _lift(graph, b)
    av, bv = a.value, b.value
    out = av / bv

    def vjp(g, need):
        return (unbroadcast(g / bv, av.shape) if need[0] else None,
                unbroadcast(-g * out / bv, bv.shape) if need[1] else None)

    return graph.record("div", out, (a, b), vjp)


def neg(a):
    if not isinstance(a, Node):
        return -_val(a)
    return a.graph.record("neg", -a.value, (a,), lambda g, need: (-g,))


def square(a):
    if not isinstance(a, Node):
        return _val(a) ** 2
    av = a.value
    return a.graph.record("square", av * av, (a,), lambda g, need: (2.0 * g * av,))


def exp(a):
    if not isinstance(a, Node):
        return np.exp(_val(a))
    out = np.exp(a.value)
    return a.graph.record("exp", out, (a,), lambda g, need: (g * out,))


def log(a):
    if not isinstance(a, Node):
        return np.log(_val(a))
    av = a.value
    return a.graph.record("log", np.log(av), (a,), lambda g, need: (g / av,))


def activation(kind, a):
    """Apply ``g`` elementwise; see :mod:`coherentcast.activations`."""
    kind = act.resolve(kind)
    if not isinstance(a, Node):
        return np.asarray(act.eval_activation(kind, _val(a)))
    av = a.value
    out = np.asarray(act.eval_activation(kind, av))
    if kind == "sigmoid":
        vjp = lambda g, need: (g * out * (1.0 - out),)  # noqa: E731
    elif kind == "tanh":
        vjp = lambda g, need: (g * (1.0 - out * out),)  # noqa: E731
    else:
        vjp = lambda g, need: (g * act.activation_deriv(kind, av),)  # noqa: E731
    return a.graph.record(kind, out, (a,), vjp)


def activation_grad(kind, a):
    """Elementwise ``g'(a)``, itself differentiable (uses ``g''``)."""
    kind = act.resolve(kind)
    if not isinstance(a, Node):
        return np.asarray(act.activation_deriv(kind, _val(a)))
    av = a.value
    out = np.asarray(act.activation_deriv(kind, av))
    if kind == "relu":
        return a.graph.record("relu'", out, (a,), lambda g, need: (None,))
    return a.graph.record(kind + "'", out, (a,), lambda g, need: (g * act.activation_deriv2(kind, av),))


def relu(a):
    return activation("relu", a)


def sigmoid(a):
    return activation("sigmoid", a)


def tanh(a):
    return activation("tanh", a)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, w):
    """``a @ w`` with ``w`` a matrix; ``a`` may carry any leading batch dims."""
    graph = _graph_of(a, w)
    av, wv = _val(a), _val(w)
    if wv.ndim != 2 or av.ndim < 1 or av.shape[-1] != wv.shape[0]:
        raise ContractViolation(f"matmul shape mismatch {av.shape} @ {wv.shape}")
    if graph is None:
        return av @ wv
    a, w = _lift(graph, a), _lift(graph, w)
    k, p = wv.shape

    def vjp(g, need):
        ga = g @ wv.T if need[0] else None
        gw = av.reshape(-1, k).T @ g.reshape(-1, p) if need[1] else None
        return ga, gw

    return graph.record("matmul", av @ wv, (a, w), vjp)


def reduce_sum(a, axis=None):
    if not isinstance(a, Node):
        return np.sum(_val(a), axis=axis)
    av = a.value
    shape = av.shape

    def vjp(g, need):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return a.graph.record("sum", np.asarray(np.sum(av, axis=axis)), (a,), vjp)


def mean(a, axis=None):
    n = _val(a).size if axis is None else _val(a).shape[axis]
    return mul(reduce_sum(a, axis), 1.0 / n)


def reshape(a, shape):
    if not isinstance(a, Node):
        return np.reshape(_val(a), shape)
    old = a.shape
    return a.graph.record("reshape", a.value.reshape(shape), (a,), lambda g, need: (g.reshape(old),))


def expand_dims(a, axis):
    if not isinstance(a, Node):
        return np.expand_dims(_val(a), axis)
    old = a.shape
    return a.graph.record("expand", np.expand_dims(a.value, axis), (a,), lambda g, need: (g.reshape(old),))


def concat(xs, axis=-1):
    graph = _graph_of(*xs)
    if graph is None:
        return np.concatenate([_val(x) for x in xs], axis=axis)
    nodes = [_lift(graph, x) for x in xs]
    vals = [n.value for n in nodes]
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g, need):
        return tuple(np.split(g, splits, axis=axis))

    return graph.record("concat", np.concatenate(vals, axis=axis), nodes, vjp)


def getitem(a, key):
    if not isinstance(a, Node):
        return _val(a)[key]
    av = a.value

    def vjp(g, need):
        out = np.zeros_like(av)
        np.add.at(out, key, g)
        return (out,)

    return a.graph.record("getitem", np.asarray(av[key]), (a,), vjp)


def check_finite(node_or_array, what="value"):
    v = _val(node_or_array)
    if not np.all(np.isfinite(v)):
        raise InvariantError(f"{what} contains non-finite entries")
    return node_or_array
