"""A minimal reverse-mode tape over numpy arrays.

Every op accepts plain arrays or :class:`Tensor` values. When none of the
inputs is a tracked tensor the op simply returns the numpy result, so the same
model code serves both fast inference and gradient computation.

Complex quantities never appear on the tape: spectra are carried as separate
real and imaginary tensors.
"""

from __future__ import annotations

import numpy as np

from . import spectral


class Tensor:
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, value, requires_grad: bool = False, parents=(), backward=None, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, o):
        return mul(self, 1.0 / np.asarray(value(o)))

    def __getitem__(self, idx):
        return index(self, idx)


def value(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x)


def _tracked(*xs) -> bool:
    return any(isinstance(x, Tensor) and x.requires_grad for x in xs)


def _node(out, parents, backward):
    return Tensor(out, requires_grad=True, parents=parents, backward=backward)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def detach(x) -> np.ndarray:
    return value(x).copy() if isinstance(x, Tensor) else np.asarray(x)


def add(a, b):
    av, bv = value(a), value(b)
    out = av + bv
    if not _tracked(a, b):
        return out
    return _node(out, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value(a), value(b)
    out = av - bv
    if not _tracked(a, b):
        return out
    return _node(out, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b):
    av, bv = value(a), value(b)
    out = av * bv
    if not _tracked(a, b):
        return out
    return _node(out, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def square(a):
    av = value(a)
    if not _tracked(a):
        return av * av
    return _node(av * av, (a,), lambda g: (2.0 * av * g,))


def sum(a, axis=None, keepdims: bool = False):  # noqa: A001 - mirrors numpy
    av = value(a)
    out = av.sum(axis=axis, keepdims=keepdims)
    if not _tracked(a):
        return out

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _node(out, (a,), back)


def mean(a, axis=None, keepdims: bool = False):
    av = value(a)
    count = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(a, shape):
    av = value(a)
    out = av.reshape(shape)
    if not _tracked(a):
        return out
    return _node(out, (a,), lambda g: (g.reshape(av.shape),))


def index(a, idx):
    """Basic or advanced indexing; the gradient scatters back with ``np.add.at``."""
    av = value(a)
    out = av[idx]
    if not _tracked(a):
        return out

    fancy = any(isinstance(i, (np.ndarray, list)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def back(g):
        full = np.zeros_like(av)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _node(np.array(out), (a,), back)


def where(mask, a, b):
    mask = np.asarray(mask, dtype=bool)
    av, bv = value(a), value(b)
    out = np.where(mask, av, bv)
    if not _tracked(a, b):
        return out
    return _node(out, (a, b), lambda g: (_unbroadcast(np.where(mask, g, 0.0), av.shape),
                                       _unbroadcast(np.where(mask, 0.0, g), bv.shape)))


def concat(xs, axis: int = -1):
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    if not _tracked(*xs):
        return out
    cuts = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _node(out, tuple(xs), lambda g: tuple(np.split(g, cuts, axis=axis)))


def einsum(subscripts: str, *operands):
    """``np.einsum`` without repeated indices inside a single operand."""
    vals = [value(x) for x in operands]
    out = np.einsum(subscripts, *vals)
    if not _tracked(*operands):
        return out
    lhs, rhs = subscripts.replace(" ", "").split("->")
    ins = lhs.split(",")
    for s in ins:
        if len(set(s)) != len(s):
            raise ValueError("repeated indices within one operand are not supported")

    def back(g):
        grads = []
        for i, (sub_i, v) in enumerate(zip(ins, vals)):
            if not _tracked(operands[i]):
                grads.append(None)
                continue
            others = [(s, vals[j]) for j, s in enumerate(ins) if j != i]
            avail = set(rhs).union(*(set(s) for s, _ in others))
            kept = "".join(ch for ch in sub_i if ch in avail)
            spec = ",".join([rhs] + [s for s, _ in others]) + "->" + kept
            gi = np.einsum(spec, g, *(o for _, o in others))
            if kept != sub_i:
                shape = [v.shape[k] if ch in kept else 1 for k, ch in enumerate(sub_i)]
                gi = np.broadcast_to(gi.reshape(shape), v.shape).copy()
            grads.append(gi)
        return tuple(grads)

    return _node(out, tuple(operands), back)


def softmax(a, axis: int = -1):
    av = value(a)
    z = np.exp(av - av.max(axis=axis, keepdims=True))
    y = z / z.sum(axis=axis, keepdims=True)
    if not _tracked(a):
        return y
    return _node(y, (a,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def rfft(x):
    """Real and imaginary parts of the real FFT along the last axis."""
    xv = value(x)
    n = xv.shape[-1]
    s = spectral.rfft_array(xv)
    if not _tracked(x):
        return s.real.copy(), s.imag.copy()
    zeros = np.zeros(s.shape)
    re = _node(s.real.copy(), (x,), lambda g: (spectral.rfft_adjoint(g, zeros, n),))
    im = _node(s.imag.copy(), (x,), lambda g: (spectral.rfft_adjoint(zeros, g, n),))
    return re, im


def irfft(re, im, n: int):
    """Inverse real FFT of ``re + i*im``; DC and Nyquist imaginary parts are ignored."""
    out = spectral.irfft_array(value(re) + 1j * value(im), n)
    if not _tracked(re, im):
        return out
    return _node(out, (re, im), lambda g: spectral.irfft_adjoint(g, n))


def grad(loss, params, seed=None) -> list[np.ndarray]:
    """Gradients of ``loss`` with respect to each tensor in ``params``."""
    if not isinstance(loss, Tensor):
        return [np.zeros_like(value(p)) for p in params]
    order: list[Tensor] = []
    seen: set[int] = set()
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
        for p in node._parents:
            if isinstance(p, Tensor) and p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value) if seed is None else np.asarray(seed, dtype=np.float64)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not (isinstance(p, Tensor) and p.requires_grad):
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
        if node._parents:
            del grads[id(node)]
    return [grads.get(id(p), np.zeros_like(p.value)) for p in params]
