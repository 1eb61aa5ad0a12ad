"""Dense N-d arrays with reverse-mode automatic differentiation.

Layout convention is channels-last: a volumetric activation is N x D x H x W x C,
row-major. A ``Tape`` records executed operations; ``backward`` replays the
records in reverse execution order (a valid reverse topological order) and
accumulates gradients into every ``requires_grad`` tensor reachable from the
loss. Tensors are treated as immutable after creation except for gradient
accumulation and batch-norm running statistics.
"""

from __future__ import annotations

import threading

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


# ---------------------------------------------------------------------------
# Tape machinery
# ---------------------------------------------------------------------------

_state = threading.local()


def _stack():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape():
    stack = _stack()
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("out", "backward")

    def __init__(self, out, backward):
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of executed operations for one training step.

    Use as a context manager around the forward pass; operations whose inputs
    require gradients are recorded while the tape is active. ``clear`` drops
    all intermediate records.
    """

    def __init__(self):
        self._records: list[_Node] = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._records)

    def clear(self):
        self._records.clear()


class no_grad:
    """Context manager disabling tape recording (eval/inference paths)."""

    def __enter__(self):
        _stack().append(None)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim > 5:
            raise ShapeError(f"tensor order {arr.ndim} exceeds the supported maximum of 5")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._tape = None

    # -- introspection ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- gradient handling --------------------------------------------------

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), -1.0))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(out_data, inputs, backward_fn):
    tape = active_tape()
    rec = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=rec)
    if rec:
        out._tape = tape
        tape._records.append(_Node(out, backward_fn))
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if g.shape != t.data.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {t.data.shape}")
    # Gradients are only ever reassigned (never mutated in place), so the
    # incoming array can be stored directly.
    t.grad = g if t.grad is None else t.grad + g


def backward(loss):
    """Populate gradients of every requires_grad tensor reachable from ``loss``."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ShapeError("loss is not connected to a tape; run the forward pass inside `with Tape():`")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape._records):
        g = node.out.grad
        if g is None:
            continue
        node.backward(g)
        # Each replay repopulates intermediate grads from the loss down, so
        # they can be dropped as soon as their node has been consumed; this
        # keeps peak memory flat and preserves leaf-grad accumulation across
        # repeated backward calls. Callers clear the tape between steps.
        node.out.grad = None


# ---------------------------------------------------------------------------
# Elementwise / linear algebra ops
# ---------------------------------------------------------------------------


def _unbroadcast(g, shape):
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _as_tensor(b, a.dtype)
    y = a.data + b.data

    def back(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _make(y, (a, b), back)


def mul(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    if isinstance(b, (int, float)):
        c = float(b)
        y = a.data * c

        def back_scalar(g):
            if a.requires_grad:
                _accum(a, g * c)

        return _make(y, (a,), back_scalar)

    b = _as_tensor(b, a.dtype)
    y = a.data * b.data

    def back(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(y, (a, b), back)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    y = a.data @ b.data

    def back(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(y, (a, b), back)


def permute(a, axes):
    axes = tuple(axes)
    y = np.ascontiguousarray(np.transpose(a.data, axes))
    inv = tuple(np.argsort(axes))

    def back(g):
        if a.requires_grad:
            _accum(a, np.transpose(g, inv))

    return _make(y, (a,), back)


def bmm(a, b):
    """Batched matrix product of [B, m, k] with [B, k, n]."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeError(f"bmm expects 3-d operands, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm shapes do not conform: {a.shape} x {b.shape}")
    y = a.data @ b.data

    def back(g):
        if a.requires_grad:
            _accum(a, g @ b.data.transpose(0, 2, 1))
        if b.requires_grad:
            _accum(b, a.data.transpose(0, 2, 1) @ g)

    return _make(y, (a, b), back)


def transpose2d(a):
    if a.data.ndim != 2:
        raise ShapeError(f"transpose2d expects a matrix, got {a.shape}")
    y = a.data.T.copy()

    def back(g):
        if a.requires_grad:
            _accum(a, g.T)

    return _make(y, (a,), back)


def reshape(a, shape):
    y = a.data.reshape(shape)

    def back(g):
        if a.requires_grad:
            _accum(a, g.reshape(a.data.shape))

    return _make(y, (a,), back)


def narrow(a, axis, start, length):
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    y = a.data[idx].copy()

    def back(g):
        if a.requires_grad:
            gx = np.zeros_like(a.data)
            gx[idx] = g
            _accum(a, gx)

    return _make(y, (a,), back)


def concat(tensors, axis):
    tensors = list(tensors)
    y = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def back(g):
        offset = 0
        for t, s in zip(tensors, sizes):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + s)
                _accum(t, g[tuple(idx)])
            offset += s

    return _make(y, tuple(tensors), back)


def sum_(a, axis=None, keepdims=False):
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if not a.requires_grad:
            return
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(ax % a.data.ndim for ax in axes):
                gg = np.expand_dims(gg, ax)
        _accum(a, np.broadcast_to(gg, a.data.shape))

    return _make(y, (a,), back)


def mean(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def relu6(a):
    y = np.clip(a.data, 0.0, 6.0)
    # subgradient is 0 exactly at the kinks x=0 and x=6
    mask = (a.data > 0.0) & (a.data < 6.0)

    def back(g):
        if a.requires_grad:
            _accum(a, g * mask)

    return _make(y, (a,), back)


def softmax(a, axis=-1):
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        if a.requires_grad:
            _accum(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (a,), back)


def log_softmax(a, axis=-1):
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    sm = np.exp(y)

    def back(g):
        if a.requires_grad:
            _accum(a, g - sm * g.sum(axis=axis, keepdims=True))

    return _make(y, (a,), back)


def take_along_last(a, idx):
    """Select one entry per row along the last axis; ``idx`` has shape a.shape[:-1]."""
    idx = np.asarray(idx)
    if idx.shape != a.data.shape[:-1]:
        raise ShapeError(f"index shape {idx.shape} does not match leading shape {a.data.shape[:-1]}")
    y = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def back(g):
        if a.requires_grad:
            gx = np.zeros_like(a.data)
            np.put_along_axis(gx, idx[..., None], np.asarray(g)[..., None], axis=-1)
            _accum(a, gx)

    return _make(y, (a,), back)


def dropout(a, p, mode, rng=None):
    """Zero each element with probability ``p`` in train mode, scaling survivors."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return a
    if rng is None:
        raise ValueError("train-mode dropout requires an rng")
    draw_dtype = np.float32 if a.data.dtype == np.float32 else np.float64
    keep = (rng.random(a.data.shape, dtype=draw_dtype) >= p).astype(a.data.dtype) / (1.0 - p)
    y = a.data * keep

    def back(g):
        if a.requires_grad:
            _accum(a, g * keep)

    return _make(y, (a,), back)


# ---------------------------------------------------------------------------
# Unfold / fold
# ---------------------------------------------------------------------------


def unfold(a):
    """(N, D, H, W, C) -> (N, D*H*W, C), row-major over (D, H, W)."""
    if a.data.ndim != 5:
        raise ShapeError(f"unfold expects a 5-d tensor, got {a.shape}")
    n, d, h, w, c = a.data.shape
    return reshape(a, (n, d * h * w, c))


def fold(a, dims):
    """(N, S, C) -> (N, D, H, W, C) with S = D*H*W; exact inverse of unfold."""
    if a.data.ndim != 3:
        raise ShapeError(f"fold expects a 3-d tensor, got {a.shape}")
    d, h, w = dims
    n, s, c = a.data.shape
    if d * h * w != s:
        raise ShapeError(f"fold dims {dims} have product {d * h * w}, sequence extent is {s}")
    return reshape(a, (n, d, h, w, c))


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------


def _windows(xp, k, stride, out_sp):
    n, dp, hp, wp, c = xp.shape
    do, ho, wo = out_sp
    sn, sd, sh, sw, sc = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        (n, do, ho, wo, k, k, k, c),
        (sn, stride * sd, stride * sh, stride * sw, sd, sh, sw, sc),
        writeable=False,
    )


def _scatter_windows(gcols, target, k, stride, out_sp):
    do, ho, wo = out_sp
    for a in range(k):
        for b in range(k):
            for c in range(k):
                target[
                    :,
                    a : a + stride * do : stride,
                    b : b + stride * ho : stride,
                    c : c + stride * wo : stride,
                    :,
                ] += gcols[:, :, :, :, a, b, c, :]


def conv3d(x, kernel, bias=None, stride=1, padding=0):
    """Cross-correlation of an (N, D, H, W, Cin) tensor with a (k, k, k, Cin, Cout) kernel."""
    if x.data.ndim != 5:
        raise ShapeError(f"conv3d expects 5-d input, got {x.shape}")
    if kernel.data.ndim != 5:
        raise ShapeError(f"conv3d expects 5-d kernel, got {kernel.shape}")
    kd, kh, kw, cin, cout = kernel.shape
    if not (kd == kh == kw):
        raise ShapeError(f"conv3d kernel must be cubic, got {kernel.shape}")
    k = kd
    if k not in (1, 3):
        raise ShapeError(f"conv3d supports kernel sizes 1 and 3, got {k}")
    n, d, h, w, c = x.shape
    if c != cin:
        raise ShapeError(
            f"conv3d channel mismatch: input {x.shape} has {c} channels, kernel {kernel.shape} expects {cin}"
        )
    if stride < 1:
        raise ShapeError(f"conv3d stride must be positive, got {stride}")
    if padding < 0:
        raise ShapeError(f"conv3d padding must be non-negative, got {padding}")
    for ext in (d, h, w):
        if ext + 2 * padding < k:
            raise ShapeError(f"spatial extent {ext} with padding {padding} is smaller than kernel {k}")
    do = (d + 2 * padding - k) // stride + 1
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1

    p = padding
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (p, p), (0, 0))) if p else x.data
    cols = _windows(xp, k, stride, (do, ho, wo)).reshape(n * do * ho * wo, k * k * k * cin)
    wmat = kernel.data.reshape(k * k * k * cin, cout)
    y = cols @ wmat
    if bias is not None:
        if bias.shape != (cout,):
            raise ShapeError(f"conv3d bias shape {bias.shape} does not match output channels {cout}")
        y = y + bias.data
    y = y.reshape(n, do, ho, wo, cout)
    del cols  # recomputed in backward to keep the tape light

    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def back(g):
        gmat = g.reshape(-1, cout)
        if kernel.requires_grad:
            cols2 = _windows(xp, k, stride, (do, ho, wo)).reshape(n * do * ho * wo, k * k * k * cin)
            _accum(kernel, (cols2.T @ gmat).reshape(kernel.data.shape))
        if bias is not None and bias.requires_grad:
            _accum(bias, gmat.sum(axis=0))
        if x.requires_grad:
            gcols = (gmat @ wmat.T).reshape(n, do, ho, wo, k, k, k, cin)
            gxp = np.zeros_like(xp)
            _scatter_windows(gcols, gxp, k, stride, (do, ho, wo))
            _accum(x, gxp[:, p : p + d, p : p + h, p : p + w, :] if p else gxp)

    return _make(y, inputs, back)


def deconv3d(x, kernel, stride=2):
    """Transposed convolution doubling each spatial extent.

    Kernel layout is (3, 3, 3, Cout, Cin); the gradient with respect to the
    input equals the forward map of the matching stride-2, padding-1 conv3d.
    """
    if stride != 2:
        raise ShapeError(f"deconv3d supports stride 2 only, got {stride}")
    if kernel.data.ndim != 5 or kernel.shape[:3] != (3, 3, 3):
        raise ShapeError(f"deconv3d kernel must be 3x3x3, got {kernel.shape}")
    _, _, _, cout, cin = kernel.shape
    if x.data.ndim != 5:
        raise ShapeError(f"deconv3d expects 5-d input, got {x.shape}")
    n, d, h, w, c = x.shape
    if c != cin:
        raise ShapeError(
            f"deconv3d channel mismatch: input {x.shape} has {c} channels, kernel {kernel.shape} expects {cin}"
        )
    do, ho, wo = 2 * d, 2 * h, 2 * w

    wmat = kernel.data.reshape(27 * cout, cin)
    cols = (x.data.reshape(-1, cin) @ wmat.T).reshape(n, d, h, w, 3, 3, 3, cout)
    yp = np.zeros((n, do + 2, ho + 2, wo + 2, cout), dtype=x.data.dtype)
    _scatter_windows(cols, yp, 3, 2, (d, h, w))
    y = yp[:, 1 : 1 + do, 1 : 1 + ho, 1 : 1 + wo, :].copy()

    def back(g):
        gp = np.pad(g, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
        gycols = _windows(gp, 3, 2, (d, h, w)).reshape(n * d * h * w, 27 * cout)
        if x.requires_grad:
            _accum(x, (gycols @ wmat).reshape(x.data.shape))
        if kernel.requires_grad:
            _accum(kernel, (gycols.T @ x.data.reshape(-1, cin)).reshape(kernel.data.shape))

    return _make(y, (x, kernel), back)


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def batchnorm3d(x, gamma, beta, running_mean, running_var, mode):
    """Per-channel normalization over the N, D, H, W axes.

    Train mode uses batch statistics and updates running statistics in place
    with momentum ``BN_MOMENTUM``; eval mode uses the running statistics.
    """
    if x.data.ndim != 5:
        raise ShapeError(f"batchnorm3d expects 5-d input, got {x.shape}")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm3d parameter shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    axes = (0, 1, 2, 3)
    m = x.data.size // c
    if mode == "train":
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean.data[...] = BN_MOMENTUM * running_mean.data + (1.0 - BN_MOMENTUM) * mu
        running_var.data[...] = BN_MOMENTUM * running_var.data + (1.0 - BN_MOMENTUM) * var
    elif mode == "eval":
        mu = running_mean.data
        var = running_var.data
    else:
        raise ValueError(f"batchnorm3d mode must be 'train' or 'eval', got {mode!r}")
    ivstd = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x.data - mu) * ivstd
    y = gamma.data * xhat + beta.data

    def back(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=axes))
        if x.requires_grad:
            gxh = g * gamma.data
            if mode == "train":
                gx = (ivstd / m) * (
                    m * gxh
                    - gxh.sum(axis=axes, keepdims=True)
                    - xhat * (gxh * xhat).sum(axis=axes, keepdims=True)
                )
            else:
                gx = gxh * ivstd
            _accum(x, gx)

    return _make(y, (x, gamma, beta), back)
