"""A small reverse-mode autodiff engine over numpy arrays.

Tensors record the op that produced them; ``Tensor.backward`` walks the
graph in reverse topological order and accumulates into the ``grad`` of
leaf tensors created with ``requires_grad=True``. Intermediate gradients
live only for the duration of one backward call, so the same graph may be
back-propagated more than once (leaf gradients then accumulate).
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_grad_enabled = True


@contextmanager
def no_grad():
    """Evaluate ops without recording a graph."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._parents = tuple(_parents)
        self._backward = _backward

    # --- basic properties
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, name={self.name})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self._backward is not None

    # --- graph traversal
    def backward(self, grad=None):
        if self._backward is None:
            raise GraphError("backward() called on a tensor with no recorded forward graph")
        if grad is None:
            if self.data.size != 1:
                raise GraphError("backward() without an explicit gradient needs a scalar")
            grad = np.ones_like(self.data)

        order, seen = [], set()
        stack = [(self, False)]
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
                if p.tracked and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    g = g.astype(node.data.dtype, copy=False)
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.tracked:
                    continue
                pg = np.asarray(pg, dtype=parent.data.dtype)
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # --- operator sugar
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
        return mul(self, 1.0 / other) if not isinstance(other, Tensor) else div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self):
        return total(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _op(value, parents, backward) -> Tensor:
    """Wrap an op result; untracked inputs produce a constant."""
    if _grad_enabled and any(p.tracked for p in parents):
        return Tensor(value, _parents=parents, _backward=backward)
    return Tensor(value)


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ------------------------------------------------------------ elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _op(a.data + b.data, (a, b),
               lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _op(a.data - b.data, (a, b),
               lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _op(a.data * b.data, (a, b),
               lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _op(a.data / b.data, (a, b),
               lambda g: (unbroadcast(g / b.data, a.shape),
                          unbroadcast(-g * a.data / b.data**2, b.shape)))


def relu(x: Tensor) -> Tensor:
    # subgradient 0 at exactly 0
    mask = x.data > 0
    return _op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _op(y, (x,), lambda g: (g * y * (1 - y),))


def softplus(x: Tensor) -> Tensor:
    y = np.logaddexp(0, x.data).astype(x.dtype)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _op(y, (x,), lambda g: (g * sig,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _op(y, (x,), lambda g: (g * (1 - y * y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _op(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _op(np.log(x.data), (x,), lambda g: (g / x.data,))


def square(x: Tensor) -> Tensor:
    return _op(x.data * x.data, (x,), lambda g: (2 * g * x.data,))


def absolute(x: Tensor) -> Tensor:
    return _op(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def astype(x: Tensor, dtype) -> Tensor:
    src = x.dtype
    return _op(x.data.astype(dtype), (x,), lambda g: (g.astype(src),))


# ------------------------------------------------------------ reductions / shape

def total(x: Tensor) -> Tensor:
    return _op(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _op(np.asarray(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, x.shape),))


def reshape(x: Tensor, shape) -> Tensor:
    return _op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def getitem(x: Tensor, index) -> Tensor:
    def back(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)
    return _op(x.data[index], (x,), back)


def take(x: Tensor, indices, axis: int) -> Tensor:
    """Gather 1-D ``indices`` along ``axis``; the gradient scatter-adds back."""
    indices = np.asarray(indices)
    index = (slice(None),) * (axis % x.ndim) + (indices,)

    def back(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)
    return _op(x.data[index], (x,), back)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))
    return _op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def matmul(a, b) -> Tensor:
    """``a @ b`` where ``b`` is 2-D and ``a`` has any leading dims."""
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb
    return _op(a.data @ b.data, (a, b), back)


# ------------------------------------------------------------ convolution

def same_padding(kernel_size: int) -> tuple[int, int]:
    left = (kernel_size - 1) // 2
    return left, kernel_size - 1 - left


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    left, right = same_padding(k)
    xp = np.pad(x, ((0, 0), (left, right), (0, 0)))
    t = x.shape[1]
    # (B, T, k, C) -> (B, T, k*C); column order matches weight.reshape(k*C, out)
    cols = np.stack([xp[:, j: j + t, :] for j in range(k)], axis=2)
    return cols.reshape(x.shape[0], t, k * x.shape[2])


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Zero-padded 'same' convolution.

    x: (B, T, C_in); weight: (k, C_in, C_out); bias: (C_out,).
    Even kernels reach one step further right than left.
    """
    if x.ndim != 3:
        raise ValueError(f"conv1d expects (batch, time, channels), got {x.shape}")
    k, cin, cout = weight.shape
    if x.shape[2] != cin:
        raise ValueError(f"conv1d channel mismatch: input has {x.shape[2]}, weight expects {cin}")
    cols = _im2col(x.data, k)
    w2 = weight.data.reshape(k * cin, cout)
    y = cols @ w2
    if bias is not None:
        y = y + bias.data
    b, t = x.shape[0], x.shape[1]
    left, _ = same_padding(k)

    def back(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.reshape(-1, k * cin).T @ g2).reshape(k, cin, cout)
        gcols = (g2 @ w2.T).reshape(b, t, k, cin)
        gxp = np.zeros((b, t + k - 1, cin), dtype=g.dtype)
        for j in range(k):
            gxp[:, j: j + t, :] += gcols[:, :, j, :]
        gx = gxp[:, left: left + t, :]
        gb = g2.sum(axis=0) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _op(y, parents, back)


# ------------------------------------------------------------ recurrence

def _sig(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def gru(x: Tensor, w_x: Tensor, w_h: Tensor, b_x: Tensor, b_h: Tensor) -> Tensor:
    """Unidirectional GRU over (B, T, D) from a zero initial state.

    Gate layout along the 3H axis is [update, reset, candidate]:
        z = sig(x Wxz + bxz + h Whz + bhz)
        r = sig(x Wxr + bxr + h Whr + bhr)
        n = tanh(x Wxn + bxn + r * (h Whn + bhn))
        h' = (1 - z) * n + z * h
    """
    if x.ndim != 3:
        raise ValueError(f"gru expects (batch, time, channels), got {x.shape}")
    bsz, steps, _ = x.shape
    if steps == 0:
        raise ValueError("gru: empty sequence")
    hid = w_h.shape[0]
    gx = x.data @ w_x.data + b_x.data                      # (B, T, 3H)
    wh = w_h.data
    hs = np.zeros((bsz, steps + 1, hid), dtype=gx.dtype)
    zs = np.empty((bsz, steps, hid), dtype=gx.dtype)
    rs = np.empty_like(zs)
    ns = np.empty_like(zs)
    hn_lin = np.empty_like(zs)
    for t in range(steps):
        h = hs[:, t]
        gh = h @ wh + b_h.data
        z = _sig(gx[:, t, :hid] + gh[:, :hid])
        r = _sig(gx[:, t, hid:2 * hid] + gh[:, hid:2 * hid])
        n = np.tanh(gx[:, t, 2 * hid:] + r * gh[:, 2 * hid:])
        hs[:, t + 1] = (1 - z) * n + z * h
        zs[:, t], rs[:, t], ns[:, t], hn_lin[:, t] = z, r, n, gh[:, 2 * hid:]

    def back(g):
        dgx = np.empty_like(gx)
        dgh_all = np.empty_like(gx)
        dh = np.zeros((bsz, hid), dtype=gx.dtype)
        for t in reversed(range(steps)):
            dh = dh + g[:, t]
            z, r, n, h = zs[:, t], rs[:, t], ns[:, t], hs[:, t]
            dn = dh * (1 - z) * (1 - n * n)
            dz = dh * (h - n) * z * (1 - z)
            dr = dn * hn_lin[:, t] * r * (1 - r)
            dgx[:, t] = np.concatenate([dz, dr, dn], axis=1)
            dgh = np.concatenate([dz, dr, dn * r], axis=1)
            dgh_all[:, t] = dgh
            dh = dh * z + dgh @ wh.T
        flat_gh = dgh_all.reshape(-1, 3 * hid)
        dwh = hs[:, :-1].reshape(-1, hid).T @ flat_gh
        dbh = flat_gh.sum(axis=0)
        flat_gx = dgx.reshape(-1, 3 * hid)
        dwx = x.data.reshape(-1, x.shape[2]).T @ flat_gx
        dbx = flat_gx.sum(axis=0)
        dx = dgx @ w_x.data.T
        return dx, dwx, dwh, dbx, dbh

    return _op(hs[:, 1:].copy(), (x, w_x, w_h, b_x, b_h), back)


def reverse_within_lengths(x: Tensor, lengths) -> Tensor:
    """Reverse each batch row along time inside its valid length; padding stays put."""
    bsz, steps = x.shape[0], x.shape[1]
    lengths = np.asarray(lengths)
    t = np.arange(steps)[None, :]
    src = np.where(t < lengths[:, None], lengths[:, None] - 1 - t, t)
    rows = np.arange(bsz)[:, None]
    index = (rows, src)

    def back(g):
        out = np.zeros_like(g)
        out[index] = g
        return (out,)
    return _op(x.data[index], (x,), back)
