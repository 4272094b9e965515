"""Reverse-mode automatic differentiation over dense numpy tensors.

Small tape-based engine: ops compute forward values eagerly and, while a
Tape is active, append a backward closure. ``Tape.backward`` replays the
closures in exact reverse execution order, accumulating gradients
additively at fan-out points. Tensor rank is capped at 3 (batch x seq x
dim covers every model here). float32 is the working dtype; float64
tensors are accepted so numeric checks can run at higher precision.
"""

from __future__ import annotations

import numpy as np

# When True: non-finite op outputs raise, and adam_step on gradients that were
# already consumed raises instead of silently reusing them.
DEBUG = False


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class Tensor:
    __slots__ = ("data", "grad", "needs_grad")

    def __init__(self, data, dtype=None, needs_grad=False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim > 3:
            raise ShapeError(f"rank-{arr.ndim} tensor not supported (max rank 3)")
        self.data = arr
        self.grad = None
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name})"


class Parameter(Tensor):
    """A named leaf tensor. Frozen (trainable=False) parameters keep a zero
    gradient through any number of backward passes and optimizer steps."""

    __slots__ = ("name", "trainable", "stale")

    def __init__(self, data, name, trainable=True, dtype=None):
        super().__init__(data, dtype=dtype, needs_grad=trainable)
        self.name = name
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)
        self.stale = True  # no fresh gradient yet


_ACTIVE: "Tape | None" = None


class Tape:
    """Records backward closures in execution order. One tape per training
    step; confined to a single thread."""

    def __init__(self):
        self._ops = []
        self._spent = False

    def __enter__(self):
        global _ACTIVE
        if _ACTIVE is not None:
            raise RuntimeError("another tape is already active")
        _ACTIVE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE
        _ACTIVE = None
        return False

    def backward(self, loss: Tensor):
        """Seed d(loss)/d(loss)=1 and replay the tape in reverse order."""
        if self._spent:
            raise RuntimeError("backward already ran on this tape; reset() first")
        if loss.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        self._spent = True
        loss.grad = np.ones_like(loss.data)
        for fn in reversed(self._ops):
            fn()

    def reset(self):
        self._ops.clear()
        self._spent = False


def _finite_check(arr, op_name):
    if DEBUG and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{op_name}: non-finite output")


def _result(data, op_name, *inputs):
    _finite_check(data, op_name)
    out = Tensor(data)
    out.needs_grad = _ACTIVE is not None and any(i.needs_grad for i in inputs)
    return out


def _accum(t: Tensor, g):
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g
    if isinstance(t, Parameter):
        t.stale = False


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (undo numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _swap(a):
    return np.swapaxes(a, -1, -2)


# ---------------------------------------------------------------------------
# primitive ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = _result(a.data @ b.data, "matmul", a, b)
    if out.needs_grad:
        def bwd():
            if out.grad is None:
                return
            if a.needs_grad:
                _accum(a, _unbroadcast(out.grad @ _swap(b.data), a.shape))
            if b.needs_grad:
                _accum(b, _unbroadcast(_swap(a.data) @ out.grad, b.shape))
        _ACTIVE._ops.append(bwd)
    return out


def _ewise_shape_check(name, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} vs {b.shape}") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _ewise_shape_check("add", a, b)
    out = _result(a.data + b.data, "add", a, b)
    if out.needs_grad:
        def bwd():
            if out.grad is None:
                return
            if a.needs_grad:
                _accum(a, _unbroadcast(out.grad, a.shape))
            if b.needs_grad:
                _accum(b, _unbroadcast(out.grad, b.shape))
        _ACTIVE._ops.append(bwd)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _ewise_shape_check("sub", a, b)
    out = _result(a.data - b.data, "sub", a, b)
    if out.needs_grad:
        def bwd():
            if out.grad is None:
                return
            if a.needs_grad:
                _accum(a, _unbroadcast(out.grad, a.shape))
            if b.needs_grad:
                _accum(b, _unbroadcast(-out.grad, b.shape))
        _ACTIVE._ops.append(bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _ewise_shape_check("mul", a, b)
    out = _result(a.data * b.data, "mul", a, b)
    if out.needs_grad:
        def bwd():
            if out.grad is None:
                return
            if a.needs_grad:
                _accum(a, _unbroadcast(out.grad * b.data, a.shape))
            if b.needs_grad:
                _accum(b, _unbroadcast(out.grad * a.data, b.shape))
        _ACTIVE._ops.append(bwd)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    out = _result(x.data * x.data.dtype.type(c), "scale", x)
    if out.needs_grad:
        def bwd():
            if out.grad is not None and x.needs_grad:
                _accum(x, out.grad * x.data.dtype.type(c))
        _ACTIVE._ops.append(bwd)
    return out


def relu(x: Tensor) -> Tensor:
    out = _result(np.maximum(x.data, 0), "relu", x)
    if out.needs_grad:
        positive = x.data > 0
        def bwd():
            if out.grad is not None and x.needs_grad:
                _accum(x, out.grad * positive)
        _ACTIVE._ops.append(bwd)
    return out


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # piecewise form avoids exp overflow on large |x|
    y = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                 np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d)))).astype(d.dtype)
    out = _result(y, "sigmoid", x)
    if out.needs_grad:
        def bwd():
            if out.grad is not None and x.needs_grad:
                _accum(x, out.grad * y * (1.0 - y))
        _ACTIVE._ops.append(bwd)
    return out


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log: non-positive input")
    out = _result(np.log(x.data), "log", x)
    if out.needs_grad:
        def bwd():
            if out.grad is not None and x.needs_grad:
                _accum(x, out.grad / x.data)
        _ACTIVE._ops.append(bwd)
    return out


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) computed without saturating to log(0)."""
    d = x.data
    out = _result((-np.logaddexp(0.0, -d)).astype(d.dtype), "log_sigmoid", x)
    if out.needs_grad:
        def bwd():
            if out.grad is not None and x.needs_grad:
                # d/dx log sigmoid(x) = sigmoid(-x)
                _accum(x, out.grad * np.exp(-np.logaddexp(0.0, d)).astype(d.dtype))
        _ACTIVE._ops.append(bwd)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = _result(y, "softmax", x)
    if out.needs_grad:
        def bwd():
            if out.grad is not None and x.needs_grad:
                g = out.grad
                _accum(x, y * (g - np.sum(g * y, axis=axis, keepdims=True)))
        _ACTIVE._ops.append(bwd)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.data
    if gain.shape != (d.shape[-1],) or bias.shape != (d.shape[-1],):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} "
                         f"do not match feature dim {d.shape[-1]}")
    mu = np.mean(d, axis=-1, keepdims=True)
    xc = d - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    norm = xc * inv
    out = _result(norm * gain.data + bias.data, "layer_norm", x, gain, bias)
    if out.needs_grad:
        def bwd():
            if out.grad is None:
                return
            g = out.grad
            if gain.needs_grad:
                _accum(gain, _unbroadcast(g * norm, gain.shape))
            if bias.needs_grad:
                _accum(bias, _unbroadcast(g, bias.shape))
            if x.needs_grad:
                gn = g * gain.data
                gx = inv * (gn - np.mean(gn, axis=-1, keepdims=True)
                            - norm * np.mean(gn * norm, axis=-1, keepdims=True))
                _accum(x, gx)
        _ACTIVE._ops.append(bwd)
    return out


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout. rate 0 is the identity; masks are reproducible from rng."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    out = _result(x.data * keep, "dropout", x)
    if out.needs_grad:
        def bwd():
            if out.grad is not None and x.needs_grad:
                _accum(x, out.grad * keep)
        _ACTIVE._ops.append(bwd)
    return out


def embedding_lookup(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("embedding_lookup: indices must be integers")
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be rank 2, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValueError(f"embedding_lookup: id out of range [0, {table.shape[0]}): "
                         f"min={idx.min()}, max={idx.max()}")
    out = _result(table.data[idx], "embedding_lookup", table)
    if out.needs_grad:
        def bwd():
            if out.grad is not None and table.needs_grad:
                buf = np.zeros_like(table.data)
                np.add.at(buf, idx, out.grad)
                _accum(table, buf)
        _ACTIVE._ops.append(bwd)
    return out


def concat(xs, axis: int = 0) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat: empty input list")
    out = _result(np.concatenate([x.data for x in xs], axis=axis), "concat", *xs)
    if out.needs_grad:
        sizes = [x.shape[axis if axis >= 0 else x.data.ndim + axis] for x in xs]
        offsets = np.cumsum([0] + sizes)
        def bwd():
            if out.grad is None:
                return
            for x, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
                if x.needs_grad:
                    sl = [slice(None)] * out.grad.ndim
                    sl[axis] = slice(lo, hi)
                    _accum(x, out.grad[tuple(sl)])
        _ACTIVE._ops.append(bwd)
    return out


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start:stop) along one axis."""
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, stop)
    out = _result(x.data[tuple(sl)], "narrow", x)
    if out.needs_grad:
        def bwd():
            if out.grad is not None and x.needs_grad:
                buf = np.zeros_like(x.data)
                buf[tuple(sl)] = out.grad
                _accum(x, buf)
        _ACTIVE._ops.append(bwd)
    return out


def transpose_last(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.data.ndim < 2:
        raise ShapeError(f"transpose_last: needs rank >= 2, got {x.shape}")
    out = _result(_swap(x.data), "transpose_last", x)
    if out.needs_grad:
        def bwd():
            if out.grad is not None and x.needs_grad:
                _accum(x, _swap(out.grad))
        _ACTIVE._ops.append(bwd)
    return out


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    """Sum reduction; accumulates in float64 then rounds to the input dtype."""
    val = np.sum(x.data, axis=axis, dtype=np.float64).astype(x.dtype)
    out = _result(val, "reduce_sum", x)
    if out.needs_grad:
        def bwd():
            if out.grad is None or not x.needs_grad:
                return
            g = out.grad
            if axis is not None:
                g = np.expand_dims(g, axis=axis)
            _accum(x, np.broadcast_to(g, x.shape).astype(x.dtype))
        _ACTIVE._ops.append(bwd)
    return out


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    val = (np.sum(x.data, axis=axis, dtype=np.float64) / n).astype(x.dtype)
    out = _result(val, "reduce_mean", x)
    if out.needs_grad:
        def bwd():
            if out.grad is None or not x.needs_grad:
                return
            g = out.grad
            if axis is not None:
                g = np.expand_dims(g, axis=axis)
            _accum(x, (np.broadcast_to(g, x.shape) / n).astype(x.dtype))
        _ACTIVE._ops.append(bwd)
    return out


def softmax_xent(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean cross-entropy over the last axis of `logits`.

    targets: integer class ids with logits.shape[:-1]; mask: optional 0/1
    array of the same shape selecting which positions count. Returns the
    masked mean as a scalar.
    """
    idx = np.asarray(targets)
    if idx.shape != logits.shape[:-1]:
        raise ShapeError(f"softmax_xent: targets {idx.shape} vs logits {logits.shape}")
    d = logits.data
    z = d - np.max(d, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, idx[..., None], axis=-1)[..., 0]
    if mask is None:
        m = np.ones_like(picked)
    else:
        m = np.asarray(mask, dtype=d.dtype)
    count = float(m.sum())
    if count <= 0:
        raise ValueError("softmax_xent: mask selects no positions")
    val = np.asarray(-np.sum(picked * m, dtype=np.float64) / count).astype(d.dtype)
    out = _result(val, "softmax_xent", logits)
    if out.needs_grad:
        def bwd():
            if out.grad is None or not logits.needs_grad:
                return
            soft = np.exp(logp)
            onehot = np.zeros_like(soft)
            np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
            g = (soft - onehot) * (m / count)[..., None]
            _accum(logits, (g * out.grad).astype(d.dtype))
        _ACTIVE._ops.append(bwd)
    return out


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """Adam with bias correction. Defaults follow the usual SASRec setup."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.98, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {}
        self._v = {}


def adam_step(params, state: AdamState):
    """One update: m <- b1 m + (1-b1) g; v <- b2 v + (1-b2) g^2;
    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps). Consumes gradients
    (zeroes them) and skips frozen parameters entirely."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p in params:
        if not p.trainable:
            continue
        if DEBUG and p.stale:
            raise RuntimeError(f"adam_step: stale (already consumed) gradient for {p.name!r}")
        g = p.grad
        m = state._m.get(p)
        if m is None:
            m = state._m[p] = np.zeros_like(p.data)
        v = state._v.get(p)
        if v is None:
            v = state._v[p] = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)
        p.grad[...] = 0
        p.stale = True


def zero_gradients(params):
    for p in params:
        p.grad[...] = 0
        p.stale = True
