"""Dense tensors with tape-based reverse-mode differentiation.

Every op returns a new :class:`Tensor`.  When gradients are enabled and any
input requires a gradient, the output remembers its inputs and a closure that
maps the output gradient to input gradients.  :func:`backward` replays those
closures in reverse topological order.
"""
from __future__ import annotations

import contextlib
import math
import threading

import numpy as np

__all__ = [
    "Tensor", "TrainingDivergence", "tensor", "parameter", "no_grad", "set_debug",
    "is_grad_enabled", "add", "sub", "mul", "div", "neg", "matmul", "exp", "log",
    "sqrt", "gelu", "linear", "attention", "relu", "tanh", "sum", "mean", "reshape", "transpose", "swapaxes",
    "getitem", "concat", "stack", "embedding", "softmax", "log_softmax",
    "layer_norm", "dropout", "cross_entropy", "topological_order", "backward",
    "grad_check",
]

_state = threading.local()  # grad mode is per thread: decoding may run in a pool
_debug = False


class TrainingDivergence(FloatingPointError):
    """A forward value became NaN or infinite."""


def set_debug(flag: bool) -> None:
    """Check every forward result for NaN/Inf (slow, meant for tests)."""
    global _debug
    _debug = bool(flag)


def is_grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._prev = ()
        self._backward = None
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
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def backward(self, wrt=None):
        return backward(self, wrt)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


def _wrap(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward_fn):
    if _debug and not np.all(np.isfinite(data)):
        raise TrainingDivergence("non-finite value produced in forward pass")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._prev = ()
        out._backward = None
    return out


def _hi(x, g):
    """``x`` at the precision of the incoming gradient (backward runs in float64)."""
    return x if x.dtype == g.dtype else x.astype(g.dtype)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    ad, bd = a.data, b.data

    def back(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make(ad * bd, (a, b), back)


def div(a, b):
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _make(out, (a, b), back)


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a):
    ad = a.data
    out = np.tanh(ad)

    def back(g):
        t = out if out.dtype == g.dtype else np.tanh(_hi(ad, g))
        return (g * (1.0 - t * t),)

    return _make(out, (a,), back)


def relu(a):
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """Tanh approximation of GELU; smooth, so finite differences stay valid."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def back(g):
        xh = _hi(x, g)
        th = t if xh is x else np.tanh(_GELU_C * (xh + 0.044715 * (xh * xh * xh)))
        d = (1.0 - th * th) * xh * (_GELU_C * (1.0 + 0.134145 * (xh * xh)))
        d += 1.0 + th
        d *= 0.5
        return (g * d,)

    return _make(out, (a,), back)


# -------------------------------------------------------------- linear algebra

def matmul(a, b):
    """Batched matrix product; the right operand may be a shared 2-D weight."""
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul needs operands of rank >= 2")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {ad.shape} x {bd.shape}")
    out = ad @ bd

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(out, (a, b), back)


def linear(x, w, b=None):
    """``x @ w + b`` for x [..., d_in] and a 2-D weight, as one tape node."""
    xd, wd = x.data, w.data
    if xd.shape[-1] != wd.shape[0]:
        raise ValueError(f"linear: input width {xd.shape[-1]} vs weight {wd.shape}")
    out = xd @ wd
    if b is not None:
        # not in place: the sum must take the wider of the two dtypes
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g @ wd.T) if x.requires_grad else None
        gw = (xd.reshape(-1, xd.shape[-1]).T @ g2) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)

    return _make(out, parents, back)


def _attn_probs(qd, kd, mask, scale):
    s = qd @ np.swapaxes(kd, -1, -2)
    s *= scale
    if mask is not None:
        s = s + mask
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    return s


def attention(q, k, v, mask=None, scale=1.0, zero_weights=False):
    """Scaled dot-product attention over [B, H, L, dk] inputs.

    ``mask`` is additive and broadcast against the [B, H, Lq, Lk] scores.  Keys
    and values may have batch size 1 and are then shared by every query row.
    With ``zero_weights`` the attention weights are multiplied by zero
    (a diagnostic that cuts the dependence on keys and values).
    """
    qd, kd, vd = q.data, k.data, v.data
    s = _attn_probs(qd, kd, mask, scale)
    p = s * 0.0 if zero_weights else s
    out = p @ vd

    def back(g):
        if s.dtype != g.dtype and not zero_weights:
            p_, vd_, qd_, kd_ = _attn_probs(_hi(qd, g), _hi(kd, g), mask, scale), _hi(vd, g), _hi(qd, g), _hi(kd, g)
        else:
            p_, vd_, qd_, kd_ = p, vd, qd, kd
        gp = g @ np.swapaxes(vd_, -1, -2)
        gv = _unbroadcast(np.swapaxes(p_, -1, -2) @ g, vd.shape) if v.requires_grad else None
        if zero_weights:
            gs = np.zeros_like(gp)
        else:
            gs = p_ * (gp - (gp * p_).sum(axis=-1, keepdims=True))
            gs *= scale
        gq = (gs @ kd_) if q.requires_grad else None
        gk = _unbroadcast(np.swapaxes(gs, -1, -2) @ qd_, kd.shape) if k.requires_grad else None
        return gq, gk, gv

    return _make(out, (q, k, v), back)


# ------------------------------------------------------------------ reductions

def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(out), (a,), back)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum(a, axis, keepdims), 1.0 / n)


# ------------------------------------------------------------------ shape ops

def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a, i, j):
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def _is_basic(idx):
    if not isinstance(idx, tuple):
        idx = (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in idx)


def getitem(a, idx):
    shape = a.shape
    basic = _is_basic(idx)

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), back)


def concat(tensors, axis=-1):
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), back)


def embedding(weight, ids):
    """Row lookup ``weight[ids]`` with scatter-add backward."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError("token id outside embedding table")
    shape = weight.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _make(weight.data[ids], (weight,), back)


# ------------------------------------------------------- normalised functions

def _softmax(x, axis):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax(x, axis):
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(a, axis=-1):
    x = a.data
    if x.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    out = _softmax(x, axis)

    def back(g):
        o = out if out.dtype == g.dtype else _softmax(_hi(x, g), axis)
        return (o * (g - (g * o).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), back)


def log_softmax(a, axis=-1):
    x = a.data
    if x.shape[axis] == 0:
        raise ValueError("log_softmax of an empty vector")
    out = _log_softmax(x, axis)

    def back(g):
        o = out if out.dtype == g.dtype else _log_softmax(_hi(x, g), axis)
        return (g - np.exp(o) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), back)


def _normalise(xd, eps):
    xc = xd - xd.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    return xc * inv, inv


def layer_norm(x, gain, bias, eps=1e-5):
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    xhat, inv = _normalise(xd, eps)
    gd = gain.data
    out = xhat * gd + bias.data

    def back(g):
        xh, iv = (xhat, inv) if xhat.dtype == g.dtype else _normalise(_hi(xd, g), eps)
        gx = ggain = gbias = None
        if x.requires_grad:
            gh = g * gd
            gx = iv * (gh - gh.mean(axis=-1, keepdims=True)
                       - xh * (gh * xh).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            ggain = (g * xh).reshape(-1, gd.shape[-1]).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, gd.shape[-1]).sum(axis=0)
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), back)


def dropout(x, p, rng, training=True):
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def cross_entropy(logits, targets, smoothing=0.0, mask=None):
    """Mean label-smoothed cross-entropy over unmasked positions.

    The smoothed target puts ``1 - smoothing`` on the gold token and spreads
    ``smoothing`` evenly over the other ``V - 1`` tokens.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must lie in [0, 1)")
    x = logits.data
    V = x.shape[-1]
    targets = np.asarray(targets)
    if targets.shape != x.shape[:-1]:
        raise ValueError(f"targets shape {targets.shape} does not match logits {x.shape}")
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    live = targets[mask]
    if live.size and (live.min() < 0 or live.max() >= V):
        raise IndexError("target id outside vocabulary")
    n = int(mask.sum())
    if n == 0:
        raise ValueError("cross_entropy over zero positions")
    safe = np.where(mask, targets, 0)
    logp = _log_softmax(x, -1)
    q = np.full(x.shape, smoothing / (V - 1) if V > 1 else 0.0, dtype=x.dtype)
    np.put_along_axis(q, safe[..., None], 1.0 - smoothing, axis=-1)
    per_pos = -(q * logp).sum(axis=-1)
    loss = (per_pos * mask).sum() / n
    m = mask[..., None].astype(x.dtype)

    def back(g):
        lp = logp if logp.dtype == g.dtype else _log_softmax(_hi(x, g), -1)
        return (g * (np.exp(lp) - q) * m / n,)

    return _make(np.asarray(loss, dtype=x.dtype), (logits,), back)


# ------------------------------------------------------------------- backward

def topological_order(root):
    """Nodes reachable from ``root`` with every node after all of its inputs."""
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
        for p in node._prev:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss, wrt=None):
    """Populate ``.grad`` on every leaf feeding ``loss``.

    Leaves listed in ``wrt`` that the loss does not reach get a zero gradient.
    Gradients accumulate into existing ``.grad`` arrays.
    """
    if loss.data.size != 1:
        raise ValueError("backward needs a scalar loss")
    if not np.isfinite(loss.data).all():
        raise TrainingDivergence(f"loss is not finite: {loss.data}")
    if wrt is not None:
        for t in wrt:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
    if not loss.requires_grad:
        return
    # gradients flow in (at least) float64 and are cast back at the leaves
    grads = {id(loss): np.ones(loss.data.shape, np.promote_types(loss.data.dtype, np.float64))}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if g.shape != node.data.shape:
                g = np.broadcast_to(g, node.data.shape)
            g = g.astype(node.data.dtype)
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._prev, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg


def grad_check(fn, point, h=1e-3, n_coords=None, rng=None):
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps a Tensor to a scalar Tensor.  The difference quotient is taken one
    precision step above ``point``: float64 for float32 points, extended precision
    (x87 long double where the platform has it) for float64 points, so probe
    roundoff stays well below the tolerances.  ``n_coords`` restricts the check to
    a random subset of coordinates.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = point.data if isinstance(point, Tensor) else np.asarray(point)
    x = Tensor(base.copy(), requires_grad=True)
    y = fn(x)
    if y.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    if not np.isfinite(y.data).all():
        raise TrainingDivergence("function value is not finite")
    backward(y, wrt=[x])
    analytic = x.grad.reshape(-1).astype(np.float64)

    probe_dtype = np.longdouble if base.dtype == np.float64 else np.float64
    flat = base.astype(probe_dtype).reshape(-1)
    h = probe_dtype(h)
    coords = np.arange(flat.size)
    if n_coords is not None and n_coords < flat.size:
        rng = rng if rng is not None else np.random.default_rng(0)
        coords = rng.choice(flat.size, size=n_coords, replace=False)
    worst = 0.0
    with no_grad():
        for i in coords:
            vals = []
            for sign in (1.0, -1.0):
                probe = flat.copy()
                probe[i] += sign * h
                v = fn(Tensor(probe.reshape(base.shape), dtype=probe_dtype)).data
                if not np.isfinite(v).all():
                    raise TrainingDivergence("function value is not finite")
                vals.append(probe_dtype(v.reshape(())))
            cd = (vals[0] - vals[1]) / (2 * h)
            a = probe_dtype(analytic[i])
            err = abs(a - cd) / max(abs(a), abs(cd), probe_dtype(1e-8))
            worst = max(worst, float(err))
    return worst
