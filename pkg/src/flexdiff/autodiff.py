"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every op computes its result eagerly and, while gradient recording is on,
stores a closure that maps the output gradient to input gradients.
``Tensor.backward`` replays those closures in reverse topological order.
"""
from __future__ import annotations

import contextlib
import struct
from pathlib import Path

import numpy as np

_state = {"grad": True, "dtype": np.float32}


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf values reach a place that forbids them."""


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


@contextlib.contextmanager
def precision(dtype):
    """Switch the default float dtype (``float32`` or ``float64``)."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    prev = _state["dtype"]
    _state["dtype"] = dtype
    try:
        yield
    finally:
        _state["dtype"] = prev


def default_dtype():
    return _state["dtype"]


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward", "requires_grad")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

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

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
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
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = grad
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def tensor(values, requires_grad=False, dtype=None):
    """Wrap user data as a leaf tensor, rejecting non-finite input."""
    arr = np.asarray(values, dtype=dtype or _state["dtype"])
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("non-finite value in tensor input")
    return Tensor(arr, requires_grad=requires_grad)


def _wrap(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_state["dtype"]))


def _needs(*ts):
    return _state["grad"] and any(t.requires_grad for t in ts)


def _acc(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _make(data, parents, backward):
    if _needs(*parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


# elementwise -----------------------------------------------------------------

def add(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return _make(out, (a, b), bw)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(-g, b.shape))

    return _make(out, (a, b), bw)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def bw(g):
        _acc(a, _unbroadcast(g * b.data, a.shape))
        _acc(b, _unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), bw)


def square(a):
    a = _wrap(a)
    out = a.data * a.data

    def bw(g):
        _acc(a, 2.0 * g * a.data)

    return _make(out, (a,), bw)


def silu(a):
    a = _wrap(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig

    def bw(g):
        _acc(a, g * (sig * (1.0 + a.data * (1.0 - sig))))

    return _make(out, (a,), bw)


def masked_fill(a, mask, value):
    """Replace entries where ``mask`` is true by a constant; no gradient flows there."""
    a = _wrap(a)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data.dtype.type(value), a.data)

    def bw(g):
        _acc(a, _unbroadcast(np.where(mask, 0.0, g).astype(g.dtype), a.shape))

    return _make(out, (a,), bw)


# reductions and shape ops ----------------------------------------------------

def sum(a, axis=None, keepdims=False):  # noqa: A001
    a = _wrap(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=a.data.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.shape).astype(a.data.dtype))

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    a = _wrap(a)
    out = a.data.reshape(shape)

    def bw(g):
        _acc(a, g.reshape(a.shape))

    return _make(out, (a,), bw)


def transpose(a, axes):
    a = _wrap(a)
    out = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def bw(g):
        _acc(a, np.ascontiguousarray(np.transpose(g, inv)))

    return _make(out, (a,), bw)


def concat(tensors, axis=0):
    ts = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        for t, piece in zip(ts, np.split(g, sizes, axis=axis)):
            _acc(t, np.ascontiguousarray(piece))

    return _make(out, tuple(ts), bw)


def _index_sum(index, rows, n):
    """Sum ``rows`` into ``n`` buckets by ``index`` in a fixed order."""
    flat = index.reshape(-1)
    rows = rows.reshape((flat.size,) + rows.shape[index.ndim:])
    out = np.zeros((n,) + rows.shape[1:], dtype=rows.dtype)
    if flat.size == 0:
        return out
    order = np.argsort(flat, kind="stable")
    keys = flat[order]
    starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
    out[keys[starts]] = np.add.reduceat(rows[order], starts, axis=0)
    return out


def take(a, index, axis=0):
    """Gather slices of ``a`` along ``axis``. Repeated indices accumulate gradient."""
    a = _wrap(a)
    index = np.asarray(index, dtype=np.intp)
    out = np.take(a.data, index, axis=axis)

    def bw(g):
        if index.ndim == 0:
            ga = np.zeros_like(a.data)
            sl = [slice(None)] * a.ndim
            sl[axis] = int(index)
            ga[tuple(sl)] = g
            _acc(a, ga)
            return
        gm = np.moveaxis(g, list(range(axis, axis + index.ndim)), list(range(index.ndim)))
        summed = _index_sum(index % a.shape[axis], gm, a.shape[axis])
        _acc(a, np.ascontiguousarray(np.moveaxis(summed, 0, axis)))

    return _make(out, (a,), bw)


def scatter_add(base, index, src):
    """Return ``base`` with rows ``src`` added at ``index`` along axis 0."""
    base, src = _wrap(base), _wrap(src)
    index = np.asarray(index, dtype=np.intp)
    out = base.data + _index_sum(index % base.shape[0], src.data, base.shape[0])

    def bw(g):
        _acc(base, g)
        _acc(src, g[index])

    return _make(out, (base, src), bw)


# contractions ----------------------------------------------------------------

def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        _acc(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if a.ndim == 1:
                gb = np.multiply.outer(a.data, g)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            _acc(b, _unbroadcast(gb, b.shape))

    return _make(out, (a, b), bw)


def einsum(spec, a, b):
    """Two-operand einsum. Every index of an operand must appear in the other
    operand or in the output, which keeps the adjoint a plain einsum."""
    a, b = _wrap(a), _wrap(b)
    lhs, out_idx = spec.replace(" ", "").split("->")
    ia, ib = lhs.split(",")
    for name, idx, other in (("first", ia, ib + out_idx), ("second", ib, ia + out_idx)):
        if len(set(idx)) != len(idx) or not set(idx) <= set(other):
            raise ValueError(f"einsum spec {spec!r} unsupported for the {name} operand")
    for ch in set(ia) & set(ib):
        if a.shape[ia.index(ch)] != b.shape[ib.index(ch)]:
            raise ValueError(f"einsum shape mismatch on index {ch!r}: {a.shape} vs {b.shape}")
    out = np.einsum(spec, a.data, b.data, optimize=False)

    def bw(g):
        if a.requires_grad:
            _acc(a, np.einsum(f"{out_idx},{ib}->{ia}", g, b.data, optimize=False))
        if b.requires_grad:
            _acc(b, np.einsum(f"{out_idx},{ia}->{ib}", g, a.data, optimize=False))

    return _make(out, (a, b), bw)


# normalization ---------------------------------------------------------------

def softmax(a, axis=-1, mask=None):
    """Softmax along ``axis``. Entries where ``mask`` is false get weight exactly 0."""
    a = _wrap(a)
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(mask.any(axis=axis)):
            raise ValueError("softmax row has no allowed entries")
        x = np.where(mask, x, -np.inf)
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _acc(a, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (a,), bw)


def layer_norm(a, eps=1e-5):
    """Normalize over the last (channel) axis, without affine parameters."""
    a = _wrap(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        _acc(a, inv * (g - gm - xhat * gx))

    return _make(xhat, (a,), bw)


# parameters and gradients ----------------------------------------------------

class ParamSet(dict):
    """Named parameter arrays in a fixed insertion order."""

    def copy(self):
        return ParamSet((k, v.copy()) for k, v in self.items())

    def zeros_like(self):
        return ParamSet((k, np.zeros_like(v)) for k, v in self.items())

    def astype(self, dtype):
        return ParamSet((k, v.astype(dtype)) for k, v in self.items())

    def n_values(self):
        return int(np.sum([v.size for v in self.values()]))


def grad(loss_fn, params):
    """Evaluate ``loss_fn`` on leaf tensors built from ``params`` and
    return ``(loss, gradients)``; unused parameters get zero gradients."""
    leaves = {k: Tensor(np.asarray(v), requires_grad=True) for k, v in params.items()}
    with _grad_enabled():
        loss = _wrap(loss_fn(leaves))
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("non-finite loss")
    if loss.requires_grad:
        loss.backward()
    grads = ParamSet()
    for k, leaf in leaves.items():
        g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {k}")
        grads[k] = g.astype(leaf.data.dtype, copy=False)
    return float(loss.data.reshape(())), grads


@contextlib.contextmanager
def _grad_enabled():
    prev = _state["grad"]
    _state["grad"] = True
    try:
        yield
    finally:
        _state["grad"] = prev


def grad_check(loss_fn, params, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    Runs in float64. The error of one entry is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    with precision(np.float64):
        p64 = ParamSet((k, np.array(v, dtype=np.float64)) for k, v in params.items())
        _, analytic = grad(loss_fn, p64)

        def value(p):
            with no_grad():
                return float(_wrap(loss_fn({k: Tensor(v) for k, v in p.items()})).data)

        worst = 0.0
        for name, arr in p64.items():
            flat = arr.reshape(-1)
            ga = analytic[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = value(p64)
                flat[i] = orig - eps
                down = value(p64)
                flat[i] = orig
                num = (up - down) / (2 * eps)
                worst = max(worst, abs(ga[i] - num) / max(1.0, abs(num)))
    return worst


# checkpoint format -----------------------------------------------------------

_MAGIC = b"FDMP"
_VERSION = 1


def save_params(path, params):
    """Write ``params`` in the FDMP container (float32, little endian)."""
    chunks = [_MAGIC, struct.pack("<II", _VERSION, len(params))]
    for name, arr in params.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path):
    buf = Path(path).read_bytes()
    if buf[:4] != _MAGIC:
        raise ValueError(f"{path}: not an FDMP checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported FDMP version {version}")
    off = 12
    params = ParamSet()
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        params[name] = arr.astype(np.float32)
    return params
