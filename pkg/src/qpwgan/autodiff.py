"""Reverse-mode automatic differentiation over numpy arrays.

Every :class:`Tensor` created by an operation gets a strictly increasing node
id, so the ids form a recording tape: sorting the nodes reachable from an
output by descending id is a valid reverse topological order.

Vector-Jacobian products are written with ``Tensor`` operations themselves.
With ``create_graph=True`` the backward pass is recorded as well, which gives
second-order gradients (needed by the gradient penalty). Otherwise backward runs
under :func:`no_grad` and only plain arrays are produced.

Subgradient conventions: ``relu'(0) = 0``, ``sign(0) = 0`` (so ``|x|`` has
derivative 0 at 0), and ``|x|**a`` with ``a <= 0`` evaluates to 0 at ``x == 0``;
it only appears there as a factor multiplied by ``sign(0)``.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

_ids = itertools.count()
_recording = [True]


@contextmanager
def no_grad():
    prev = _recording[0]
    _recording[0] = False
    try:
        yield
    finally:
        _recording[0] = prev


def is_recording() -> bool:
    return _recording[0]


def _unbroadcast(g: "Tensor", shape: tuple[int, ...]) -> "Tensor":
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents=(), _vjp=None):
        self.data = np.asarray(data, dtype=float)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._vjp = _vjp
        self.id = next(_ids)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- node construction -------------------------------------------------

    @staticmethod
    def _make(data, parents, vjp) -> "Tensor":
        if _recording[0] and any(p.requires_grad for p in parents):
            return Tensor(data, True, parents, vjp)
        return Tensor(data)

    # -- elementwise arithmetic --------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def vjp(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._make(a.data + b.data, (a, b), vjp)

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def vjp(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._make(a.data - b.data, (a, b), vjp)

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def vjp(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor._make(a.data * b.data, (a, b), vjp)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Tensor):
            return self * (1.0 / np.asarray(other, dtype=float))
        a, b = self, other

        def vjp(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

        return Tensor._make(a.data / b.data, (a, b), vjp)

    def __neg__(self):
        a = self
        return Tensor._make(-a.data, (a,), lambda g: (-g,))

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise TypeError("tensor exponents are not supported")
        e = float(exponent)
        if e == 2.0:
            return self * self
        if e == 1.0:
            return self
        if np.any(self.data < 0):
            raise ValueError("non-integer powers need non-negative data; use abs_pow")
        return self.abs_pow(e)

    def abs_pow(self, exponent: float) -> "Tensor":
        """``|x| ** exponent`` with derivative ``exponent * sign(x) * |x| ** (exponent - 1)``."""
        a, e = self, float(exponent)
        ad = np.abs(a.data)
        if e > 0:
            out = ad**e
        else:
            with np.errstate(divide="ignore"):
                out = np.where(ad > 0, ad**e if e != 0 else 1.0, 0.0)

        def vjp(g):
            if e == 1.0:
                return (g * Tensor(np.sign(a.data)),)
            return (g * Tensor(e * np.sign(a.data)) * a.abs_pow(e - 1.0),)

        return Tensor._make(out, (a,), vjp)

    def abs(self) -> "Tensor":
        return self.abs_pow(1.0)

    # -- activations -------------------------------------------------------

    def relu(self) -> "Tensor":
        a = self
        mask = (a.data > 0).astype(float)
        return Tensor._make(a.data * mask, (a,), lambda g: (g * Tensor(mask),))

    def leaky_relu(self, slope: float) -> "Tensor":
        a = self
        factor = np.where(a.data > 0, 1.0, slope)
        return Tensor._make(a.data * factor, (a,), lambda g: (g * Tensor(factor),))

    def tanh(self) -> "Tensor":
        a = self
        out_data = np.tanh(a.data)
        out = Tensor._make(out_data, (a,), None)
        if out.requires_grad:
            out._vjp = lambda g: (g * (1.0 - out * out),)
        return out

    # -- linear algebra and reductions -------------------------------------

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")

        def vjp(g):
            return g @ b.T, a.T @ g

        return Tensor._make(a.data @ b.data, (a, b), vjp)

    @property
    def T(self) -> "Tensor":
        a = self
        return Tensor._make(a.data.T, (a,), lambda g: (g.T,))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        shape = a.shape

        def vjp(g):
            if axis is not None and not keepdims:
                axes = (axis,) if isinstance(axis, int) else axis
                axes = tuple(ax % len(shape) for ax in axes)
                new_shape = [1 if i in axes else n for i, n in enumerate(shape)]
                g = g.reshape(tuple(new_shape))
            elif axis is None and not keepdims:
                g = g.reshape((1,) * len(shape))
            return (g * Tensor(np.ones(shape)),)

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)

    def mean(self, axis=None) -> "Tensor":
        n = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis) / float(n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        a = self
        old = a.shape
        return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))

    def __getitem__(self, idx) -> "Tensor":
        a = self
        shape = a.shape

        def vjp(g):
            return (scatter(g, idx, shape),)

        return Tensor._make(a.data[idx], (a,), vjp)

    def min(self, axis: int) -> tuple["Tensor", np.ndarray]:
        """Minimum along ``axis`` and the first index attaining it.

        The gradient flows only into the selected entry.
        """
        a = self
        idx = np.argmin(a.data, axis=axis)
        onehot = np.zeros_like(a.data)
        np.put_along_axis(onehot, np.expand_dims(idx, axis), 1.0, axis=axis)
        vals = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

        def vjp(g):
            return (g.reshape(vals_shape_keep) * Tensor(onehot),)

        vals_shape_keep = tuple(1 if i == axis % a.ndim else n for i, n in enumerate(a.shape))
        return Tensor._make(vals, (a,), vjp), idx


def scatter(g: Tensor, idx, shape) -> Tensor:
    """Adjoint of ``x[idx]``: place ``g`` into zeros of ``shape``, summing repeats."""
    out = np.zeros(shape)
    np.add.at(out, idx, g.data)

    def vjp(h):
        return (h[idx],)

    return Tensor._make(out, (g,), vjp)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(lo), int(hi))
            out.append(g[tuple(sl)])
        return tuple(out)

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp)


def grad(output: Tensor, inputs: list[Tensor], create_graph: bool = False, allow_unused: bool = True):
    """Gradients of scalar ``output`` with respect to ``inputs``.

    Returns ``Tensor`` objects when ``create_graph`` is set, arrays otherwise.
    Inputs that do not influence the output get zero gradients.
    """
    if output.data.size != 1:
        raise ValueError(f"gradient needs a scalar output, got shape {output.shape}")
    # Collect reachable nodes; ids give the tape order.
    nodes: dict[int, Tensor] = {}
    stack = [output]
    while stack:
        t = stack.pop()
        if t.id in nodes or not t.requires_grad:
            continue
        nodes[t.id] = t
        stack.extend(t._parents)
    grads: dict[int, Tensor] = {output.id: Tensor(np.ones_like(output.data))}
    ctx = _null() if create_graph else no_grad()
    with ctx:
        for nid in sorted(nodes, reverse=True):
            node = nodes[nid]
            g = grads.get(nid)
            if g is None or node._vjp is None:
                continue
            parent_grads = node._vjp(g)
            for p, pg in zip(node._parents, parent_grads):
                if not p.requires_grad or pg is None:
                    continue
                grads[p.id] = grads[p.id] + pg if p.id in grads else pg
    out = []
    for t in inputs:
        g = grads.get(t.id)
        if g is None:
            if not allow_unused:
                raise ValueError("an input does not influence the output")
            g = Tensor(np.zeros_like(t.data))
        out.append(g if create_graph else g.data)
    return out


@contextmanager
def _null():
    yield


def backward(loss: Tensor, params: list[Tensor]) -> list[np.ndarray]:
    """Store ``d loss / d param`` on each ``param.grad`` and return the list."""
    gs = grad(loss, params)
    for p, g in zip(params, gs):
        p.grad = g
    return gs
