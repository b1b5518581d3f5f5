"""Small reverse-mode automatic differentiation engine over numpy arrays.

Every operation returns a :class:`Value`.  When at least one operand requires
a gradient (and recording is enabled) the result keeps a reference to its
operands plus a closure that pushes the incoming gradient back to them.
:func:`backward` orders the recorded graph into a :class:`Tape` and replays
the closures in exact reverse order.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from . import kernels
from .errors import InvalidConfig, ShapeError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in this thread (inference, finite differences)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Value:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Value(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    # operators
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

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self):
        backward(self)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def as_value(x, like=None) -> Value:
    if isinstance(x, Value):
        return x
    dtype = like.dtype if like is not None else None
    return Value(np.asarray(x, dtype=dtype))


def _result(data, parents, backward_fn, op):
    out = Value(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


class Tape:
    """Recorded operations in execution (topological) order."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_output(cls, root: Value) -> "Tape":
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)


def backward(loss: Value) -> None:
    """Populate ``.grad`` on every graph leaf reachable from a scalar ``loss``.

    Leaf gradients accumulate across calls; the graph itself is released.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = Tape.from_output(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in tape.nodes:
        if node._parents:
            node._parents = ()
            node._backward = None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = _pair(a, b)

    def bw(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(g)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = _pair(a, b)

    def bw(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(-g)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = _pair(a, b)

    def bw(g):
        if a.requires_grad:
            a._accum(g * b.data)
        if b.requires_grad:
            b._accum(g * a.data)

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = _pair(a, b)

    def bw(g):
        if a.requires_grad:
            a._accum(g / b.data)
        if b.requires_grad:
            b._accum(-g * a.data / (b.data * b.data))

    return _result(a.data / b.data, (a, b), bw, "div")


def power(a, p):
    a = as_value(a)
    p = float(p)

    def bw(g):
        a._accum(g * p * a.data ** (p - 1))

    return _result(a.data ** p, (a,), bw, "pow")


def _pair(a, b):
    if isinstance(a, Value):
        return a, as_value(b, a)
    b = as_value(b)
    return as_value(a, b), b


def relu(x):
    mask = x.data > 0

    def bw(g):
        x._accum(g * mask)

    return _result(x.data * mask, (x,), bw, "relu")


def _sigmoid(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def sigmoid(x):
    y = _sigmoid(x.data)

    def bw(g):
        x._accum(g * y * (1 - y))

    return _result(y, (x,), bw, "sigmoid")


def tanh(x):
    y = np.tanh(x.data)

    def bw(g):
        x._accum(g * (1 - y * y))

    return _result(y, (x,), bw, "tanh")


def exp(x):
    y = np.exp(x.data)

    def bw(g):
        x._accum(g * y)

    return _result(y, (x,), bw, "exp")


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        x._accum(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _result(y, (x,), bw, "softmax")


def stop_gradient(x):
    """Same values, no gradient path back to ``x``."""
    return Value(x.data)


# ---------------------------------------------------------------- reductions & shape


def vsum(x, axis=None, keepdims=False):
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accum(np.broadcast_to(g, x.shape))

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    if axis is None:
        n = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    scale = x.dtype.type(1.0 / n)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accum(np.broadcast_to(g * scale, x.shape))

    return _result(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), bw, "mean")


def reshape(x, shape):
    def bw(g):
        x._accum(g.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), bw, "reshape")


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)

    def bw(g):
        x._accum(g.transpose(inv))

    return _result(x.data.transpose(axes), (x,), bw, "transpose")


def getitem(x, idx):
    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        x._accum(full)

    return _result(x.data[idx], (x,), bw, "getitem")


def concat(values, axis=-1):
    values = [as_value(v) for v in values]
    ref = values[0].data
    ax = axis % ref.ndim
    for v in values[1:]:
        if v.ndim != ref.ndim or any(
            s != r for i, (s, r) in enumerate(zip(v.shape, ref.shape)) if i != ax
        ):
            raise ShapeError(f"cannot concatenate shapes {[v.shape for v in values]} on axis {axis}")
    bounds = np.cumsum([v.shape[ax] for v in values])[:-1]

    def bw(g):
        for v, part in zip(values, np.split(g, bounds, axis=ax)):
            if v.requires_grad:
                v._accum(part)

    return _result(np.concatenate([v.data for v in values], axis=ax), values, bw, "concat")


def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accum(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                b._accum(a2.T @ g.reshape(-1, g.shape[-1]))
            else:
                b._accum(np.swapaxes(a.data, -1, -2) @ g)

    return _result(a.data @ b.data, (a, b), bw, "matmul")


# ---------------------------------------------------------------- convolution & pooling


def _pair_int(v, name):
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise InvalidConfig(f"{name} must be an int or a pair")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x, w, b=None, stride=1, padding=0, dilation=1):
    """2-D cross-correlation, NCHW input and (out, in, kh, kw) kernel.

    With dilation ``(dh, dw)`` the kernel taps sit at offsets ``dh*i, dw*j``
    for ``i < kh, j < kw``; the first tap is at offset 0.
    """
    sh, sw = _pair_int(stride, "stride")
    ph, pw = _pair_int(padding, "padding")
    dh, dw = _pair_int(dilation, "dilation")
    if dh < 1 or dw < 1:
        raise InvalidConfig(f"dilation rate must be >= 1, got {dilation}")
    if sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise InvalidConfig("stride must be >= 1 and padding >= 0")
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d expects NCHW input and OIHW kernel, got {x.shape} and {w.shape}")
    n, c, hgt, wid = x.shape
    o, _, kh, kw = w.shape
    ho = (hgt + 2 * ph - dh * (kh - 1) - 1) // sh + 1
    wo = (wid + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"input {x.shape} too small for kernel {w.shape} with dilation {(dh, dw)}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    geom = (kh, kw, sh, sw, dh, dw, ho, wo)
    cols = kernels.im2col(xp, *geom)
    wm = w.data.reshape(o, -1)
    out = cols @ wm.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
        if b is not None and b.requires_grad:
            b._accum(gm.sum(axis=0))
        if w.requires_grad:
            w._accum((gm.T @ cols).reshape(w.shape))
        if x.requires_grad:
            gxp = kernels.col2im(gm @ wm, n, c, xp.shape[2], xp.shape[3], *geom)
            x._accum(gxp[:, :, ph:ph + hgt, pw:pw + wid])

    return _result(out, parents, bw, "conv2d")


def maxpool2d(x, kernel):
    """Non-overlapping max pooling (stride == kernel); trailing remainder dropped.

    Ties go to the first element of the window in row-major order.
    """
    kh, kw = _pair_int(kernel, "kernel")
    n, c, hgt, wid = x.shape
    ho, wo = hgt // kh, wid // kw
    if ho < 1 or wo < 1:
        raise ShapeError(f"input {x.shape} smaller than pooling window {(kh, kw)}")

    def tap(a, k):
        i, j = divmod(k, kw)
        return a[:, :, i:ho * kh:kh, j:wo * kw:kw]

    out = tap(x.data, 0).copy()
    arg = np.zeros(out.shape, dtype=np.int8 if kh * kw < 128 else np.int32)
    for k in range(1, kh * kw):
        v = tap(x.data, k)
        upd = v > out
        np.copyto(out, v, where=upd)
        arg[upd] = k

    def bw(g):
        full = np.zeros_like(x.data)
        for k in range(kh * kw):
            tap(full, k)[...] = np.where(arg == k, g, 0)
        x._accum(full)

    return _result(out, (x,), bw, "maxpool2d")


def dropout(x, rate, train, rng=None):
    if not 0.0 <= rate < 1.0:
        raise InvalidConfig(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise InvalidConfig("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)

    def bw(g):
        x._accum(g * keep)

    return _result(x.data * keep, (x,), bw, "dropout")


# ---------------------------------------------------------------- recurrence


def lstm_recurrence(xproj, wh, reverse=False):
    """LSTM over time given input projections ``xproj`` (N, T, 4H); returns h (N, T, H)."""
    if xproj.ndim != 3 or wh.ndim != 2 or xproj.shape[2] != wh.shape[1] or wh.shape[1] != 4 * wh.shape[0]:
        raise ShapeError(f"lstm shapes do not agree: xproj {xproj.shape}, wh {wh.shape}")
    wh_data = wh.data.astype(xproj.dtype, copy=False)
    h, c, gates = kernels.lstm_forward(xproj.data, wh_data, reverse)

    def bw(g):
        dx, dwh = kernels.lstm_backward(g, h, c, gates, wh_data, reverse)
        if xproj.requires_grad:
            xproj._accum(dx)
        if wh.requires_grad:
            wh._accum(dwh)

    return _result(h, (xproj, wh), bw, "lstm")


# ---------------------------------------------------------------- losses


def bce_with_logits(logits, target, mask=None):
    """Mean binary cross-entropy on raw logits (log-sum-exp form, never log(0))."""
    t = np.asarray(target.data if isinstance(target, Value) else target, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"target shape {t.shape} != logits shape {logits.shape}")
    z = logits.data
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    if mask is None:
        count = z.size
        val = per.sum() / count
    else:
        m = np.asarray(mask, dtype=z.dtype)
        count = max(float(m.sum()), 1.0)
        val = (per * m).sum() / count

    def bw(g):
        grad = (_sigmoid(z) - t) * (g / count)
        if mask is not None:
            grad = grad * m
        logits._accum(grad.astype(z.dtype, copy=False))

    return _result(np.asarray(val, dtype=z.dtype), (logits,), bw, "bce")


def mse(pred, target, mask=None):
    """Mean squared error; with ``mask`` the mean runs over masked entries only (0 if none)."""
    t = np.asarray(target.data if isinstance(target, Value) else target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"target shape {t.shape} != prediction shape {pred.shape}")
    diff = pred.data - t
    if mask is None:
        count = diff.size
        m = None
    else:
        m = np.asarray(mask, dtype=pred.dtype)
        count = max(float(m.sum()), 1.0)
        diff = diff * m
    val = (diff * diff).sum() / count

    def bw(g):
        pred._accum((2.0 * g / count * diff).astype(pred.dtype, copy=False))

    return _result(np.asarray(val, dtype=pred.dtype), (pred,), bw, "mse")


# ---------------------------------------------------------------- verification


def _coords(shape, n_samples, rng):
    total = int(np.prod(shape))
    flat = np.arange(total)
    if n_samples is not None and n_samples < total:
        rng = rng if rng is not None else np.random.default_rng(0)
        flat = np.sort(rng.choice(total, size=n_samples, replace=False))
    return [np.unravel_index(k, shape) for k in flat]


def _fd_errors(f, targets, eps, n_samples, rng, coord_filter=None):
    """Central-difference check of every Value in ``targets`` against its .grad."""
    worst = {}
    for key, v in targets.items():
        analytic = np.zeros_like(v.data) if v.grad is None else v.grad.copy()
        err = 0.0
        for idx in _coords(v.shape, n_samples, rng):
            if coord_filter is not None and not coord_filter(key, idx):
                continue
            orig = v.data[idx]
            v.data[idx] = orig + eps
            with no_grad():
                fp = float(f().data)
            v.data[idx] = orig - eps
            with no_grad():
                fm = float(f().data)
            v.data[idx] = orig
            cd = (fp - fm) / (2 * eps)
            a = float(analytic[idx])
            err = max(err, abs(a - cd) / max(abs(a), abs(cd), 1e-8))
        worst[key] = err
    return worst


def grad_check(f, x: Value, eps=1e-5, n_samples=None, rng=None, coord_filter=None) -> float:
    """Max relative error between the analytic gradient of scalar ``f(x)`` and
    central finite differences.  Run in float64; ``n_samples`` limits the
    number of coordinates probed.
    """
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if out.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    backward(out)
    errs = _fd_errors(lambda: f(x), {"x": x}, eps, n_samples, rng,
                      None if coord_filter is None else (lambda _k, i: coord_filter(i)))
    return errs["x"]


def grad_check_params(f, params: dict, eps=1e-5, n_samples=None, rng=None) -> dict:
    """Like :func:`grad_check` for a closure over several parameter tensors.

    ``f`` takes no arguments; returns ``{name: max relative error}``.
    """
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    out = f()
    if out.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    backward(out)
    return _fd_errors(f, params, eps, n_samples, rng)
