"""Minimal tape-based reverse-mode autodiff over real numpy arrays.

Every quaternion operation in this package is composed from the real-array
primitives defined here, so the full models receive exact analytic
gradients. A graph is rebuilt per batch; ``backward`` walks it once in
reverse topological order and accumulates gradients additively (parameters
typically appear many times per instance).

All arithmetic is float64. The primitive functions accept either ``Node``
operands or plain numpy arrays / scalars; plain inputs are computed eagerly
without entering the graph, which lets the same model code run in a cheap
inference mode when no ``Node`` is involved.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, UnknownParameterError

_F = np.float64


def _as_value(x):
    if isinstance(x, Node):
        return x.value
    return np.asarray(x, dtype=_F)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Node:
    """A value in the computation graph.

    `parents` holds (parent_node, vjp) pairs where vjp maps the gradient at
    this node to the gradient contribution for that parent. `grad` has the
    same shape as `value` at all times once backward() allocates it.
    """

    __slots__ = ("value", "grad", "parents", "op")

    def __init__(self, value, parents=(), op="leaf"):
        self.value = np.asarray(value, dtype=_F)
        self.grad = None
        self.parents = parents
        self.op = op

    @property
    def shape(self):
        return self.value.shape

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"


class Parameter(Node):
    """A named leaf holding trainable state that persists across tapes."""

    __slots__ = ("name", "group", "zero_row")

    def __init__(self, name, value, group="theta", zero_row=None):
        super().__init__(value, (), "param")
        self.name = name
        # "emb" parameters form the E group of the ranking loss and are the
        # targets of adversarial perturbation; everything else is Theta.
        self.group = group
        # Row index kept identically zero (embedding padding row), or None.
        self.zero_row = zero_row
        if zero_row is not None:
            self.value[zero_row] = 0.0


class ParameterSet:
    """Named collection of parameters with freeze bookkeeping.

    Frozen parameters still receive gradients through the chain rule; the
    optimizer simply skips them.
    """

    def __init__(self):
        self._params: dict[str, Parameter] = {}
        self.frozen: set[str] = set()

    def add(self, name, value, group="theta", zero_row=None) -> Parameter:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        p = Parameter(name, value, group=group, zero_row=zero_row)
        self._params[name] = p
        return p

    def __getitem__(self, name) -> Parameter:
        try:
            return self._params[name]
        except KeyError:
            raise UnknownParameterError(name) from None

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def names(self):
        return list(self._params)

    def group(self, group):
        return [p for p in self._params.values() if p.group == group]

    def freeze(self, names):
        for n in names:
            if n not in self._params:
                raise UnknownParameterError(n)
            self.frozen.add(n)

    def unfreeze(self, names):
        for n in names:
            if n not in self._params:
                raise UnknownParameterError(n)
            self.frozen.discard(n)

    def trainable(self):
        return [p for p in self._params.values() if p.name not in self.frozen]

    def state_arrays(self):
        return {p.name: p.value for p in self._params.values()}


class Tape:
    """Reverse topological ordering of the graph under a loss node."""

    def __init__(self, loss: Node):
        order = []
        seen = set()
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        # order is topological (parents first); backward walks it reversed
        self.nodes = order


def backward(loss: Node, params: ParameterSet | None = None):
    """Backpropagate from a scalar loss; return {param name: gradient}.

    Parameters not reachable from the loss get zero gradients. Gradients
    accumulate additively across the multiple graph sites where a parameter
    value was used.
    """
    if loss.value.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
    tape = Tape(loss)
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        if node.grad is None:
            continue
        for parent, vjp in node.parents:
            g = vjp(node.grad)
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.value)
            parent.grad += g
    if params is None:
        return {}
    out = {}
    for p in params:
        out[p.name] = p.grad if p.grad is not None else np.zeros_like(p.value)
    return out


def zero_grads(params: ParameterSet):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(x, y):
    if not isinstance(x, Node) and not isinstance(y, Node):
        return _as_value(x) + _as_value(y)
    xv, yv = _as_value(x), _as_value(y)
    out = xv + yv
    parents = []
    if isinstance(x, Node):
        parents.append((x, lambda g, s=xv.shape: _unbroadcast(g, s)))
    if isinstance(y, Node):
        parents.append((y, lambda g, s=yv.shape: _unbroadcast(g, s)))
    return Node(out, tuple(parents), "add")


def sub(x, y):
    if not isinstance(x, Node) and not isinstance(y, Node):
        return _as_value(x) - _as_value(y)
    xv, yv = _as_value(x), _as_value(y)
    out = xv - yv
    parents = []
    if isinstance(x, Node):
        parents.append((x, lambda g, s=xv.shape: _unbroadcast(g, s)))
    if isinstance(y, Node):
        parents.append((y, lambda g, s=yv.shape: _unbroadcast(-g, s)))
    return Node(out, tuple(parents), "sub")


def mul(x, y):
    if not isinstance(x, Node) and not isinstance(y, Node):
        return _as_value(x) * _as_value(y)
    xv, yv = _as_value(x), _as_value(y)
    out = xv * yv
    parents = []
    if isinstance(x, Node):
        parents.append((x, lambda g, o=yv, s=xv.shape: _unbroadcast(g * o, s)))
    if isinstance(y, Node):
        parents.append((y, lambda g, o=xv, s=yv.shape: _unbroadcast(g * o, s)))
    return Node(out, tuple(parents), "mul")


def matmul(x, y):
    if not isinstance(x, Node) and not isinstance(y, Node):
        return _as_value(x) @ _as_value(y)
    xv, yv = _as_value(x), _as_value(y)
    out = xv @ yv
    parents = []
    if xv.ndim == 1 or yv.ndim == 1:
        raise ContractError("matmul nodes require >=2-D operands; use mul+sum for dots")
    if isinstance(x, Node):
        parents.append(
            (x, lambda g, o=yv, s=xv.shape: _unbroadcast(g @ np.swapaxes(o, -1, -2), s))
        )
    if isinstance(y, Node):
        parents.append(
            (y, lambda g, o=xv, s=yv.shape: _unbroadcast(np.swapaxes(o, -1, -2) @ g, s))
        )
    return Node(out, tuple(parents), "matmul")


def sum_(x, axis=None, keepdims=False):
    if not isinstance(x, Node):
        return _as_value(x).sum(axis=axis, keepdims=keepdims)
    out = x.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g, shape=x.value.shape, axis=axis, keepdims=keepdims):
        if axis is None:
            return np.broadcast_to(g, shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return Node(out, ((x, vjp),), "sum")


def mean_(x, axis=None, keepdims=False):
    xv = _as_value(x)
    n = xv.size if axis is None else xv.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def tanh(x):
    if not isinstance(x, Node):
        return np.tanh(_as_value(x))
    out = np.tanh(x.value)
    return Node(out, ((x, lambda g, o=out: g * (1.0 - o * o)),), "tanh")


def sigmoid(x):
    xv = _as_value(x)
    out = np.empty_like(xv)
    pos = xv >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    e = np.exp(xv[~pos])
    out[~pos] = e / (1.0 + e)
    if not isinstance(x, Node):
        return out
    return Node(out, ((x, lambda g, o=out: g * o * (1.0 - o)),), "sigmoid")


def log_sigmoid(x):
    """log(sigma(x)) computed stably as -log(1 + exp(-x))."""
    xv = _as_value(x)
    out = -np.logaddexp(0.0, -xv)
    if not isinstance(x, Node):
        return out
    # d/dx log sigma(x) = sigma(-x)
    return Node(out, ((x, lambda g, v=xv: g * sigmoid(-v)),), "log_sigmoid")


def square(x):
    return mul(x, x)


def masked_softmax(x, mask, axis):
    """Softmax along `axis` per remaining index, restricted to mask==True.

    Masked positions get exactly 0 in the output and contribute no gradient.
    Rows with no valid position yield 0 everywhere (callers that require a
    non-empty distribution must check the mask beforehand). Max-subtraction
    makes the result invariant to a constant shift along `axis`.
    """
    xv = _as_value(x)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), xv.shape)
    neg = np.where(m, xv, -np.inf)
    peak = np.max(neg, axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    e = np.exp(np.where(m, xv - peak, -np.inf))
    e = np.where(m, e, 0.0)
    denom = e.sum(axis=axis, keepdims=True)
    out = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)
    if not isinstance(x, Node):
        return out

    def vjp(g, y=out, axis=axis):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return y * (g - inner)

    return Node(out, ((x, vjp),), "masked_softmax")


def gather(table, ids):
    """Row lookup table[ids]; gradient scatter-adds into the looked-up rows."""
    ids = np.asarray(ids)
    if not isinstance(table, Node):
        return _as_value(table)[ids]
    out = table.value[ids]

    def vjp(g, ids=ids, shape=table.value.shape):
        acc = np.zeros(shape, dtype=_F)
        np.add.at(acc, ids.reshape(-1), g.reshape(-1, *shape[1:]))
        return acc

    return Node(out, ((table, vjp),), "gather")


def concat(xs, axis=-1):
    """Concatenate along `axis`; gradient splits back to each input."""
    if not any(isinstance(x, Node) for x in xs):
        return np.concatenate([_as_value(x) for x in xs], axis=axis)
    values = [_as_value(x) for x in xs]
    out = np.concatenate(values, axis=axis)
    ax = axis if axis >= 0 else out.ndim + axis
    offsets = np.cumsum([0] + [v.shape[ax] for v in values])
    parents = []
    for i, x in enumerate(xs):
        if not isinstance(x, Node):
            continue

        def vjp(g, lo=offsets[i], hi=offsets[i + 1], ax=ax):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            return g[tuple(sl)]

        parents.append((x, vjp))
    return Node(out, tuple(parents), "concat")
