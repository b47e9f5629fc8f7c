"""Dense tensors on numpy with a dynamic reverse-mode tape.

Every op returns a new :class:`Tensor`. When at least one input requires a
gradient, the output remembers its parents and a closure mapping the output
gradient to the parent gradients. :func:`backward` walks that graph once in
reverse topological order.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy.special import expit

DTYPE = np.float64


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


# MAC accounting

class MacCounter:
    def __init__(self):
        self.total = 0

    def add(self, n):
        self.total += int(n)


_counters: list[MacCounter] = []
_grad_enabled = [True]


@contextlib.contextmanager
def count_macs():
    """Count multiply-accumulates performed by ops inside the block."""
    counter = MacCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def _tally(n):
    for c in _counters:
        c.add(n)


@contextlib.contextmanager
def no_grad():
    _grad_enabled.append(False)
    try:
        yield
    finally:
        _grad_enabled.pop()


class Tensor:
    __array_priority__ = 100
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    # operators
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
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def record(out_data, parents, backward_fn):
    """Wrap ``out_data`` as an op output.

    ``backward_fn(g)`` returns one gradient (or None) per parent.
    """
    out = Tensor(out_data)
    if _grad_enabled[-1] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return record(a.data + b.data, (a, b),
                  lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return record(a.data - b.data, (a, b),
                  lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    _tally(out.size)
    return record(out, (a, b),
                  lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return record(out, (a, b),
                  lambda g: (unbroadcast(g / b.data, a.shape),
                             unbroadcast(-g * out / b.data, b.shape)))


def neg(a):
    return record(-a.data, (a,), lambda g: (-g,))


def power(a, p):
    out = a.data ** p
    return record(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a):
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,))


def log(a):
    return record(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    out = np.sqrt(a.data)
    return record(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a):
    out = np.tanh(a.data)
    return record(out, (a,), lambda g: (g * (1.0 - out * out),))


_sigmoid = expit


def sigmoid(a):
    out = _sigmoid(a.data)
    return record(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    x = a.data
    out = np.logaddexp(0.0, x)
    return record(out, (a,), lambda g: (g * _sigmoid(x),))


def silu(a):
    x = a.data
    s = _sigmoid(x)
    return record(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),))


def relu(a):
    x = a.data
    return record(np.maximum(x, 0.0), (a,), lambda g: (g * (x > 0),))


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient passes only strictly inside."""
    x = a.data
    inside = (x > lo) & (x < hi)
    return record(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def where(cond, a, b):
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return record(np.where(cond, a.data, b.data), (a, b),
                  lambda g: (unbroadcast(np.where(cond, g, 0.0), a.shape),
                             unbroadcast(np.where(cond, 0.0, g), b.shape)))


# reductions and shape ops

def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return record(out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def amax(a, axis):
    """Max along one axis; the gradient goes to the first maximal entry."""
    idx = np.argmax(a.data, axis=axis)
    idx = np.expand_dims(idx, axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)
    return record(out, (a,), bw)


def reshape(a, shape):
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a, i, j):
    return record(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def _has_array_index(idx):
    if not isinstance(idx, tuple):
        idx = (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in idx)


def getitem(a, idx):
    out = a.data[idx]
    fancy = _has_array_index(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        return (full,)
    return record(np.array(out, copy=True), (a,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))
    return record(out, tensors, bw)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))
    return record(out, tensors, bw)


def flip(a, axis):
    return record(np.flip(a.data, axis).copy(), (a,), lambda g: (np.flip(g, axis).copy(),))


# linear algebra

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    _tally(out.size * a.shape[-1])

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _tally(ga.size * g.shape[-1] + gb.size * g.shape[-2])
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)
    return record(out, (a, b), bw)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` over the last axis of ``x``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim < 1 or weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and as_tensor(bias).shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias {as_tensor(bias).shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x if x.ndim == 2 else reshape(x, (-1, x.shape[-1]))
    out = matmul(x2, weight)
    if bias is not None:
        out = out + bias
    if x.ndim != 2:
        out = reshape(out, lead + (weight.shape[1],))
    return out


def softmax(a, axis=-1, mask=None):
    """Max-subtracted softmax. Entries where ``mask`` is False get exactly 0."""
    x = a.data
    if np.isnan(x).any():
        raise FloatingPointError("softmax received NaN logits")
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return record(out, (a,), bw)


def layer_norm(x, gamma, beta, eps=1e-5):
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, unbroadcast(g * xhat, gamma.shape), unbroadcast(g, beta.shape)
    return record(out, (x, gamma, beta), bw)


# reverse pass

def _topo_order(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Returns the list of leaves that received a gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return []
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = []
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            leaves.append(node)
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=node.data.dtype).reshape(p.shape)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    return leaves


def finite_diff_check(fn, params, eps=1e-5):
    """Largest ``|analytic - numeric| / max(1, |analytic|)`` over all entries.

    ``fn()`` must rebuild the graph from ``params`` and return a scalar Tensor.
    """
    for p in params:
        p.data = np.ascontiguousarray(p.data)
        p.requires_grad = True
        p.grad = None
    first = fn()
    second = fn()
    if not np.array_equal(first.data, second.data):
        raise ContractError("fn is not deterministic: repeated calls differ")
    backward(first)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                up = float(fn().data)
            flat[i] = orig - eps
            with no_grad():
                down = float(fn().data)
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


def directional_diff_check(fn, params, n_dirs=4, eps=1e-5, seed=0):
    """Like :func:`finite_diff_check` but probes each tensor along ``n_dirs``
    random unit directions, comparing <grad, d> with a central difference.

    Costs 2 * n_dirs evaluations per tensor instead of two per entry.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.data = np.ascontiguousarray(p.data)
        p.requires_grad = True
        p.grad = None
    first = fn()
    if not np.array_equal(first.data, fn().data):
        raise ContractError("fn is not deterministic: repeated calls differ")
    backward(first)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        orig = p.data
        for _ in range(n_dirs):
            d = rng.normal(size=orig.shape)
            d /= np.linalg.norm(d)
            with no_grad():
                p.data = orig + eps * d
                up = float(fn().data)
                p.data = orig - eps * d
                down = float(fn().data)
            p.data = orig
            a = float((analytic * d).sum())
            worst = max(worst, abs(a - (up - down) / (2 * eps)) / max(1.0, abs(a)))
    return worst


def init_uniform(rng, shape, fan_in, dtype=DTYPE):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Module:
    """Parameter container: Tensor, Module and list-of-Module attributes."""

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{name}.{i}", item

    def parameters(self):
        # dedupe shared tensors, keep first-seen order
        seen, out = set(), []
        for _, p in self.named_parameters():
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None
