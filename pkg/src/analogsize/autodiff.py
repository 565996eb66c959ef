"""Minimal reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps an ndarray and remembers the op that produced it. Calling
``backward()`` on a scalar walks the graph in reverse topological order and
accumulates ``.grad`` on every tensor created with ``requires_grad=True``.
Broadcasting follows numpy; gradients are summed back to the input shape.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    # -- bookkeeping -------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    @staticmethod
    def _wrap(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def _make(self, data, parents, backward) -> "Tensor":
        live = tuple(p for p in parents if p.requires_grad)
        if not live:
            return Tensor(data)
        return Tensor(data, True, parents, backward)

    def _acc(self, g):
        if not self.requires_grad:
            return
        g = _unbroadcast(np.asarray(g), self.shape)
        self.grad = g.copy() if self.grad is None else self.grad + g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other):
        o = self._wrap(other)

        def bw(g):
            self._acc(g)
            o._acc(g)
        return self._make(self.data + o.data, (self, o), bw)

    __radd__ = __add__

    def __neg__(self):
        return self._make(-self.data, (self,), lambda g: self._acc(-g))

    def __sub__(self, other):
        return self + (-self._wrap(other))

    def __rsub__(self, other):
        return self._wrap(other) + (-self)

    def __mul__(self, other):
        o = self._wrap(other)

        def bw(g):
            self._acc(g * o.data)
            o._acc(g * self.data)
        return self._make(self.data * o.data, (self, o), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._wrap(other)

        def bw(g):
            self._acc(g / o.data)
            o._acc(-g * self.data / o.data**2)
        return self._make(self.data / o.data, (self, o), bw)

    def __rtruediv__(self, other):
        return self._wrap(other) / self

    def __pow__(self, p: float):
        return self._make(self.data**p, (self,), lambda g: self._acc(g * p * self.data ** (p - 1)))

    def __matmul__(self, other):
        o = self._wrap(other)

        def bw(g):
            a, b = self.data, o.data
            if b.ndim == 1:
                self._acc(np.multiply.outer(g, b))
                o._acc(np.tensordot(g, a, axes=(tuple(range(g.ndim)), tuple(range(a.ndim - 1)))))
                return
            self._acc(g @ np.swapaxes(b, -1, -2))
            gb = np.swapaxes(a, -1, -2) @ g
            o._acc(gb.reshape(-1, *b.shape[-2:]).sum(0) if b.ndim == 2 and gb.ndim > 2 else gb)
        return self._make(self.data @ o.data, (self, o), bw)

    # -- reductions --------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._acc(np.broadcast_to(g, self.shape))
        return self._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), bw)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis, keepdims) * (1.0 / n)

    def sorted_sum(self, axis: int):
        """Sum along ``axis`` after sorting, so the result is bit-identical
        for any ordering of the summed elements."""
        def bw(g):
            self._acc(np.broadcast_to(np.expand_dims(g, axis), self.shape))
        return self._make(np.sort(self.data, axis=axis).sum(axis=axis), (self,), bw)

    # -- elementwise -------------------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return self._make(out, (self,), lambda g: self._acc(g * out))

    def log(self):
        return self._make(np.log(self.data), (self,), lambda g: self._acc(g / self.data))

    def tanh(self):
        out = np.tanh(self.data)
        return self._make(out, (self,), lambda g: self._acc(g * (1 - out**2)))

    def relu(self):
        mask = self.data > 0
        return self._make(self.data * mask, (self,), lambda g: self._acc(g * mask))

    def leaky_relu(self, slope: float = 0.2):
        mask = self.data > 0
        scale = np.where(mask, 1.0, slope)
        return self._make(self.data * scale, (self,), lambda g: self._acc(g * scale))

    def elu(self):
        mask = self.data > 0
        em1 = np.expm1(np.minimum(self.data, 0.0))
        out = np.where(mask, self.data, em1)
        return self._make(out, (self,), lambda g: self._acc(g * np.where(mask, 1.0, em1 + 1.0)))

    def clip(self, lo: float, hi: float):
        mask = (self.data >= lo) & (self.data <= hi)
        return self._make(np.clip(self.data, lo, hi), (self,), lambda g: self._acc(g * mask))

    # -- shape -------------------------------------------------------------
    def reshape(self, *shape):
        return self._make(self.data.reshape(*shape), (self,), lambda g: self._acc(g.reshape(self.shape)))

    def transpose(self, *axes):
        inv = np.argsort(axes)
        return self._make(self.data.transpose(*axes), (self,), lambda g: self._acc(g.transpose(*inv)))

    def __getitem__(self, idx):
        def bw(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            self._acc(full)
        return self._make(self.data[idx], (self,), bw)

    def expand_dims(self, axis):
        return self.reshape(*np.expand_dims(self.data, axis).shape)


def minimum(a, b) -> Tensor:
    """Elementwise minimum; ties route the gradient to ``a``."""
    a, b = Tensor._wrap(a), Tensor._wrap(b)
    pick = a.data <= b.data

    def bw(g):
        a._acc(g * pick)
        b._acc(g * ~pick)
    return a._make(np.where(pick, a.data, b.data), (a, b), bw)


def maximum(a, b) -> Tensor:
    a, b = Tensor._wrap(a), Tensor._wrap(b)
    pick = a.data >= b.data

    def bw(g):
        a._acc(g * pick)
        b._acc(g * ~pick)
    return a._make(np.where(pick, a.data, b.data), (a, b), bw)


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [Tensor._wrap(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        for t, part in zip(ts, np.split(g, sizes, axis=axis)):
            t._acc(part)
    return ts[0]._make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), bw)


def softmax(x: Tensor, axis: int = -1, mask=None, order_invariant: bool = False) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get probability 0.

    ``order_invariant`` sums the denominator in sorted order so the result
    does not depend on the ordering of the elements along ``axis``.
    """
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    e = np.exp(z - np.max(z, axis=axis, keepdims=True))
    if order_invariant:
        den = np.expand_dims(np.sort(e, axis=axis).sum(axis=axis), axis)
    else:
        den = e.sum(axis=axis, keepdims=True)
    p = e / den

    def bw(g):
        x._acc(p * (g - np.sum(g * p, axis=axis, keepdims=True)))
    return x._make(p, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        x._acc(g - p * np.sum(g, axis=axis, keepdims=True))
    return x._make(out, (x,), bw)


def grad_check(fn, params: list[Tensor], eps: float = 1e-6, rng=None, max_entries: int | None = None,
               refine: int = 0):
    """Largest relative error between analytic and central-difference gradients.

    ``fn`` maps nothing to a scalar Tensor and must read ``params`` afresh
    on each call. With ``max_entries`` only a random subset of entries per
    parameter is perturbed.

    A stencil that straddles a ReLU kink gives a meaningless difference
    quotient. With ``refine`` > 0 each coordinate is also tried at steps
    eps/10, eps/100, ... and the closest agreement is kept; a wrong analytic
    gradient disagrees at every step, so this only removes kink artifacts.
    """
    for p in params:
        p.grad = None
    out = fn()
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = rng if rng is not None else np.random.default_rng(0)
    steps = [eps / 10**k for k in range(refine + 1)]
    worst = 0.0
    for p, ga in zip(params, analytic):
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        for i in idx:
            an = ga.reshape(-1)[i]
            best = np.inf
            for h in steps:
                old = flat[i]
                flat[i] = old + h
                fp = fn().item()
                flat[i] = old - h
                fm = fn().item()
                flat[i] = old
                num = (fp - fm) / (2 * h)
                best = min(best, abs(num - an) / max(abs(num), abs(an), 1e-6))
                if best <= 1e-6:
                    break
            worst = max(worst, best)
    return worst
