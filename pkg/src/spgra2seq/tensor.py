"""Minimal reverse-mode automatic differentiation on numpy arrays.

Every primitive records a node on the active :class:`Tape` when at least one
input requires a gradient.  ``loss.backward()`` walks that tape in reverse
order and accumulates gradients into ``Tensor.grad``.

Arrays are float32 unless a :func:`precision` context says otherwise; the
finite-difference checks run the whole graph in float64.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DTYPE = [np.float32]
_GRAD_ENABLED = [True]
_TAPES: list["Tape"] = []


class ShapeError(ValueError):
    """Incompatible operand shapes for a primitive."""

    def __init__(self, op: str, detail: str):
        super().__init__(f"{op}: {detail}")
        self.op = op
        self.detail = detail


class TapeError(RuntimeError):
    pass


def default_dtype():
    return _DTYPE[-1]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    _DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.pop()


@contextlib.contextmanager
def no_grad():
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


@dataclass
class Node:
    op: str
    inputs: tuple
    output: "Tensor"
    backward: Callable


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Used as a context manager to scope recording; outside any explicit
    context a module-level default tape is used and replaced after each
    backward pass.
    """

    nodes: list = field(default_factory=list)
    grads: dict = field(default_factory=dict)
    consumed: bool = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)

    def record(self, node: Node):
        if self.consumed:
            raise TapeError("tape already consumed by backward(); record a new forward pass")
        self.nodes.append(node)

    def gradient(self, t: "Tensor"):
        return self.grads.get(id(t))

    def backward(self, loss: "Tensor"):
        if self.consumed:
            raise TapeError("backward called twice on the same tape")
        if loss.data.size != 1:
            raise ShapeError("backward", f"loss must be scalar, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.get(id(node.output))
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.data.shape:
                    raise ShapeError(node.op, f"gradient shape {gi.shape} != input shape {t.data.shape}")
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
        # leaves and intermediates alike
        seen = {id(loss): loss}
        for node in self.nodes:
            seen[id(node.output)] = node.output
            for t in node.inputs:
                seen[id(t)] = t
        for key, t in seen.items():
            if t.requires_grad and key in grads:
                g = grads[key]
                t.grad = g if t.grad is None else t.grad + g
        self.grads = grads
        self.consumed = True
        self.nodes = []
        return grads


_DEFAULT = [Tape()]


def current_tape() -> Tape:
    if _TAPES:
        return _TAPES[-1]
    if _DEFAULT[0].consumed:
        _DEFAULT[0] = Tape()
    return _DEFAULT[0]


def reset_default_tape():
    _DEFAULT[0] = Tape()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.tape = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self):
        tape = self.tape if self.tape is not None else current_tape()
        return tape.backward(self)

    def detach(self):
        return Tensor(self.data)

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __matmul__(self, o): return matmul(self, o)
    def __neg__(self): return mul(self, -1.0)
    def __getitem__(self, idx): return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs: Sequence[Tensor], op: str, backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED[-1] and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape = current_tape()
        tape.record(Node(op, tuple(inputs), out, backward))
        out.tape = tape
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _make(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), "mul", backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), "div", backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), "relu", lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return _make(out, (x,), "sigmoid", lambda g: (g * out * (1 - out),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), "tanh", lambda g: (g * (1 - out * out),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), "exp", lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), "log", lambda g: (g / x.data,))


def _sigmoid(v):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * v))


# ---------------------------------------------------------------- structural

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {x.shape} to {shape}") from None
    return _make(out, (x,), "reshape", lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), "transpose", lambda g: (g.transpose(inv),))


def slice_(x, idx) -> Tensor:
    """Basic (non-fancy) indexing."""
    x = as_tensor(x)
    out = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _make(out, (x,), "slice", backward)


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as e:
        raise ShapeError("concat", f"{[x.shape for x in xs]} along axis {axis}: {e}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(out, xs, "concat", lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.stack([x.data for x in xs], axis=axis)
    except ValueError as e:
        raise ShapeError("stack", str(e)) from None
    n = len(xs)
    return _make(out, xs, "stack",
                 lambda g: tuple(np.squeeze(p, axis=axis) for p in np.split(g, n, axis=axis)))


def stop_gradient(x) -> Tensor:
    return Tensor(as_tensor(x).data)


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand(g, shape, axes, keepdims):
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def reduce_sum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    return _make(np.asarray(out), (x,), "reduce_sum",
                 lambda g: (np.array(_expand(g, x.shape, axes, keepdims)),))


def reduce_mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)
    return _make(np.asarray(out), (x,), "reduce_mean",
                 lambda g: (np.array(_expand(g, x.shape, axes, keepdims)) / n,))


def reduce_max(x, axis) -> Tensor:
    """Max over the given axes; ties send the gradient to the first maximum."""
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    keep = [a for a in range(x.ndim) if a not in axes]
    moved = np.transpose(x.data, keep + list(axes))
    lead = moved.shape[:len(keep)]
    flat = moved.reshape(lead + (-1,))
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gm = gflat.reshape(moved.shape)
        return (np.transpose(gm, np.argsort(keep + list(axes))),)

    return _make(out, (x,), "reduce_max", backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (x,), "softmax",
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def logsumexp(x, axis: int = -1) -> Tensor:
    """Composite: log(sum(exp(x - m))) + m with a constant shift m."""
    x = as_tensor(x)
    m = Tensor(x.data.max(axis=axis, keepdims=True))
    s = reduce_sum(exp(sub(x, m)), axis=axis, keepdims=True)
    return reshape(add(log(s), m), tuple(n for i, n in enumerate(x.shape) if i != axis % x.ndim))


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    m = Tensor(x.data.max(axis=axis, keepdims=True))
    z = sub(x, m)
    return sub(z, log(reduce_sum(exp(z), axis=axis, keepdims=True)))


def l2_norm(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is taken as zero."""
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1)
        return (np.where(n > 0, gk * x.data / safe, 0).astype(x.data.dtype),)

    out = n if keepdims else np.squeeze(n, axis=axis)
    return _make(out, (x,), "l2_norm", backward)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"{a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError("matmul", f"batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), "matmul", backward)


def conv2d(x, w, b=None, stride: int = 1) -> Tensor:
    """Valid cross-correlation. x: [N, C, H, W], w: [O, C, kh, kw], b: [O]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", f"input {x.shape} vs kernel {w.shape}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h - kh) // stride + 1
    wo = (wd - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", f"kernel {kh}x{kw} larger than input {h}x{wd}")

    # im2col: [N, Ho, Wo, C*kh*kw] rows against the flattened kernel
    cols = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(cols.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(o, c * kh * kw)
    out = (cols @ wmat.T).reshape(n, ho, wo, o)
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise ShapeError("conv2d", f"bias {b.shape} for {o} output channels")
        out = out + b.data
        inputs.append(b)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(g):
        gflat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, o)
        gw = (gflat.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gflat @ wmat).reshape(n, ho, wo, c, kh, kw)
            gx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                        gcols[..., i, j].transpose(0, 3, 1, 2)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, inputs, "conv2d", backward)


def maxpool2x2(x) -> Tensor:
    """2x2 max pool, stride 2; odd trailing rows/columns are dropped."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError("maxpool2x2", f"needs [N, C, H>=2, W>=2], got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    views = [x.data[:, :, i:2 * ho:2, j:2 * wo:2] for i in (0, 1) for j in (0, 1)]
    out = np.maximum(np.maximum(views[0], views[1]), np.maximum(views[2], views[3]))

    def backward(g):
        # route each gradient to the first window position holding the max
        gx = np.zeros_like(x.data)
        taken = np.zeros(out.shape, dtype=bool)
        for (i, j), v in zip(((0, 0), (0, 1), (1, 0), (1, 1)), views):
            hit = (v == out) & ~taken
            taken |= hit
            gx[:, :, i:2 * ho:2, j:2 * wo:2] = np.where(hit, g, 0)
        return (gx,)

    return _make(out, (x,), "maxpool2x2", backward)


def batchnorm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
              train: bool, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over axis 1 of [N, C] or [N, C, H, W].

    In train mode the batch statistics are used and the running buffers are
    updated in place as ``running = momentum * running + (1 - momentum) * batch``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim not in (2, 4):
        raise ShapeError("batchnorm", f"expected rank 2 or 4, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batchnorm", f"affine params {gamma.shape}/{beta.shape} for {c} channels")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    if train:
        if x.shape[0] < 2:
            raise ShapeError("batchnorm", "train mode needs batch dimension >= 2")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1 - momentum) * mean.astype(running_mean.dtype)
        running_var *= momentum
        running_var += (1 - momentum) * var.astype(running_var.dtype)
    else:
        mean = running_mean.astype(x.data.dtype)
        var = running_var.astype(x.data.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    m = x.data.size // c

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if train:
            gx = (inv.reshape(bshape) / m) * (
                m * gxhat - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape))
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx.astype(x.data.dtype), ggamma, gbeta

    return _make(out.astype(x.data.dtype), (x, gamma, beta), "batchnorm", backward)


def lstm_cell(x, h, c, wx, wh, b):
    """One LSTM step with gate order (input, forget, candidate, output).

    ``b`` may be [4H] or per-row [B, 4H] (the latter lets callers fold a
    constant-per-sequence input projection into the bias).  Returns (h', c').
    """
    x, h, c, wx, wh, b = (as_tensor(t) for t in (x, h, c, wx, wh, b))
    hid = h.shape[-1]
    if wx.shape != (x.shape[-1], 4 * hid) or wh.shape != (hid, 4 * hid) or c.shape != h.shape:
        raise ShapeError("lstm_cell", f"x {x.shape}, h {h.shape}, c {c.shape}, wx {wx.shape}, wh {wh.shape}")
    if x.shape[0] != h.shape[0]:
        raise ShapeError("lstm_cell", f"batch {x.shape[0]} != {h.shape[0]}")
    gates = x.data @ wx.data + h.data @ wh.data + b.data
    i = _sigmoid(gates[:, :hid])
    f = _sigmoid(gates[:, hid:2 * hid])
    gg = np.tanh(gates[:, 2 * hid:3 * hid])
    o = _sigmoid(gates[:, 3 * hid:])
    c_new = f * c.data + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc
    out = np.concatenate([h_new, c_new], axis=1)

    def backward(gout):
        gh_new = gout[:, :hid]
        gc_new = gout[:, hid:] + gh_new * o * (1 - tc * tc)
        dgates = np.concatenate([
            gc_new * gg * i * (1 - i),
            gc_new * c.data * f * (1 - f),
            gc_new * i * (1 - gg * gg),
            gh_new * tc * o * (1 - o),
        ], axis=1)
        return (
            dgates @ wx.data.T if x.requires_grad else None,
            dgates @ wh.data.T if h.requires_grad else None,
            gc_new * f if c.requires_grad else None,
            x.data.T @ dgates if wx.requires_grad else None,
            h.data.T @ dgates if wh.requires_grad else None,
            _unbroadcast(dgates, b.shape) if b.requires_grad else None,
        )

    hc = _make(out, (x, h, c, wx, wh, b), "lstm_cell", backward)
    return slice_(hc, (slice(None), slice(0, hid))), slice_(hc, (slice(None), slice(hid, 2 * hid)))


PRIMITIVES = {
    "matmul": matmul, "conv2d": conv2d, "maxpool2x2": maxpool2x2, "relu": relu,
    "sigmoid": sigmoid, "tanh": tanh, "exp": exp, "log": log, "add": add, "mul": mul,
    "sub": sub, "div": div, "concat": concat, "slice": slice_, "reduce_sum": reduce_sum,
    "reduce_mean": reduce_mean, "softmax": softmax, "batchnorm": batchnorm, "l2_norm": l2_norm,
}


def forward_primitive(op: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **kwargs)


LOG_2PI = math.log(2 * math.pi)
