"""Minimal reverse-mode automatic differentiation over numpy arrays.

Just enough machinery to differentiate the unrolled recovery network: a Var
wraps an ndarray, records its parents and a vector-Jacobian closure, and
backward() walks the graph once in reverse topological order.  Plain ndarrays
and scalars mixed into an expression are treated as constants and receive no
gradient, which keeps the graph small (measurement matrices, observations and
detached stabilization shifts never enter it).

All ops broadcast like numpy; gradients are summed back to the parent's shape.
"""

import numpy as np


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def _unbroadcast(g, shape):
    """Sum g over the axes numpy broadcasting added or stretched."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if squeeze:
        g = g.sum(axis=squeeze, keepdims=True)
    return g.reshape(shape)


class Var:
    """A node in the tape: value, accumulated gradient, and parent links."""

    __slots__ = ("value", "grad", "_parents", "_vjp")

    # make numpy defer mixed ndarray-op-Var expressions to the reflected
    # operators below instead of element-wise object broadcasting
    __array_ufunc__ = None

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    def reshape(self, shape):
        old = self.value.shape
        return Var(self.value.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def __add__(self, other):
        return _binary(self, other, lambda a, b: a + b, lambda g, a, b, o: g, lambda g, a, b, o: g)

    __radd__ = __add__

    def __sub__(self, other):
        return _binary(self, other, lambda a, b: a - b, lambda g, a, b, o: g, lambda g, a, b, o: -g)

    def __rsub__(self, other):
        return _binary(other, self, lambda a, b: a - b, lambda g, a, b, o: g, lambda g, a, b, o: -g)

    def __mul__(self, other):
        return _binary(self, other, lambda a, b: a * b, lambda g, a, b, o: g * b, lambda g, a, b, o: g * a)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary(
            self, other, lambda a, b: a / b, lambda g, a, b, o: g / b, lambda g, a, b, o: -g * o / b
        )

    def __rtruediv__(self, other):
        return _binary(
            other, self, lambda a, b: a / b, lambda g, a, b, o: g / b, lambda g, a, b, o: -g * o / b
        )

    def __neg__(self):
        return Var(-self.value, (self,), lambda g: (-g,))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def _binary(a, b, fwd, da, db):
    av, bv = _val(a), _val(b)
    out = fwd(av, bv)
    parents, fns = [], []
    if isinstance(a, Var):
        parents.append(a)
        fns.append(lambda g: _unbroadcast(da(g, av, bv, out), av.shape))
    if isinstance(b, Var):
        parents.append(b)
        fns.append(lambda g: _unbroadcast(db(g, av, bv, out), bv.shape))
    return Var(out, tuple(parents), lambda g: tuple(f(g) for f in fns))


def matmul(a, b):
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise ValueError("matmul supports 2-D operands only")
    out = av @ bv
    parents, fns = [], []
    if isinstance(a, Var):
        parents.append(a)
        fns.append(lambda g: g @ bv.T)
    if isinstance(b, Var):
        parents.append(b)
        fns.append(lambda g: av.T @ g)
    return Var(out, tuple(parents), lambda g: tuple(f(g) for f in fns))


def vexp(a):
    out = np.exp(a.value)
    return Var(out, (a,), lambda g: (g * out,))


def vlog(a):
    return Var(np.log(a.value), (a,), lambda g: (g / a.value,))


def vsum(a, axis=None, keepdims=False):
    out = a.value.sum(axis=axis, keepdims=keepdims)
    shape = a.value.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Var(out, (a,), vjp)


def _topo(root):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(root, seed):
    """Accumulate d(root . seed)/d(node) into node.grad for every reachable node.

    seed must have root's shape.  Gradients from any previous backward pass
    through the same nodes are cleared first.
    """
    seed = np.asarray(seed, dtype=float)
    if seed.shape != root.value.shape:
        raise ValueError("seed shape %s does not match root shape %s" % (seed.shape, root.value.shape))
    order = _topo(root)
    for node in order:
        node.grad = None
    root.grad = seed
    for node in reversed(order):
        if node.grad is None or node._vjp is None:
            continue
        for parent, g in zip(node._parents, node._vjp(node.grad)):
            parent.grad = g if parent.grad is None else parent.grad + g
        # interior grads are never read again; free them as the sweep retreats
        node.grad = None
