"""A small dense tensor engine with tape-based reverse-mode differentiation.

Only the operators the classifier and the attacks need are provided. Values
are float32 by default; every operator is dtype-generic so gradient checks can
run in float64. Reductions accumulate in float64.

Recording is explicit::

    with Tape() as tape:
        loss = bce_with_logits(forward(x), y)
    tape.backward(loss)
    x.grad  # dL/dx

Operations executed while a tape is active, with at least one input that
``requires_grad``, are recorded on the innermost active tape of the current
thread.
"""
import threading
import weakref
from dataclasses import dataclass

import numpy as np

from hive3d import _kernels
from hive3d.errors import ShapeError, TapeError

_local = threading.local()

BCE_CLAMP = 1e-7


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """An n-dimensional array that can take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else np.float32
        arr = np.asarray(data, dtype=dtype)
        if not 0 <= arr.ndim <= 5:
            raise ShapeError(f"tensors of rank {arr.ndim} are not supported (max 5)")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


class _Entry:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Execution-ordered record of differentiable operations."""

    def __init__(self):
        self._entries = []
        self._produced = set()
        self._consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self._entries)

    def record(self, out, inputs, backward):
        if self._consumed:
            raise TapeError("cannot record on a tape that has already run backward")
        out._tape = weakref.ref(self)
        self._entries.append(_Entry(out, inputs, backward))
        self._produced.add(id(out))

    def backward(self, loss):
        """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf ``t`` that requires grad.

        The recorded graph is released as it is consumed, so a tape supports a
        single backward pass.
        """
        if self._consumed:
            raise TapeError("backward already ran on this tape")
        if _tape_of(loss) is not self or id(loss) not in self._produced:
            raise TapeError("backward called on a tensor that was not recorded on this tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._consumed = True
        pending = {id(loss): np.ones_like(loss.data)}
        entries = self._entries
        self._entries = []
        while entries:
            entry = entries.pop()
            g = pending.pop(id(entry.out), None)
            if g is None:
                continue
            grads = entry.backward(g)
            for t, gi in zip(entry.inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in self._produced:
                    if key in pending:
                        pending[key] = pending[key] + gi
                    else:
                        pending[key] = gi
                elif t.grad is None:
                    t.grad = np.array(gi, dtype=t.dtype, copy=True)
                else:
                    t.grad += gi


def _tape_of(t):
    return t._tape() if t._tape is not None else None


def backward(loss, tape=None):
    """Run the reverse pass for ``loss`` on ``tape`` (default: the tape that produced it)."""
    tape = tape if tape is not None else _tape_of(loss)
    if tape is None:
        raise TapeError("loss is detached: it was not produced under an active tape")
    tape.backward(loss)


def _result(data, inputs, backward_fn):
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track, dtype=data.dtype)
    if track:
        tape.record(out, inputs, backward_fn)
    return out


def _triple(v, name):
    if np.isscalar(v):
        v = (int(v),) * 3
    v = tuple(int(a) for a in v)
    if len(v) != 3:
        raise ShapeError(f"{name} needs 3 extents, got {v}")
    return v


@dataclass
class Kernel3D:
    """Convolution weights (C_out, C_in, k_d, k_h, k_w) plus a length-C_out bias."""

    weight: Tensor
    bias: Tensor

    def __post_init__(self):
        w, b = self.weight.shape, self.bias.shape
        if len(w) != 5 or min(w) < 1:
            raise ShapeError(f"kernel weight must be rank 5 with positive extents, got {w}")
        if b != (w[0],):
            raise ShapeError(f"bias shape {b} does not match {w[0]} output channels")

    @property
    def extents(self):
        return self.weight.shape[2:]


def conv_output_shape(in_extents, kernel, padding, stride):
    out = []
    for n, k, p, s in zip(in_extents, kernel, padding, stride):
        if n + 2 * p < k:
            raise ShapeError(f"padded extent {n + 2 * p} is smaller than kernel extent {k}")
        out.append((n + 2 * p - k) // s + 1)
    return tuple(out)


def conv3d(x, k, padding=0, stride=1):
    """Batched 3D cross-correlation of ``x`` (B, C_in, D, H, W) with kernel ``k``."""
    padding = _triple(padding, "padding")
    stride = _triple(stride, "stride")
    if min(stride) < 1 or min(padding) < 0:
        raise ShapeError(f"invalid stride {stride} or padding {padding}")
    w, b = k.weight, k.bias
    if x.ndim != 5:
        raise ShapeError(f"conv3d input must be B x C x D x H x W, got {x.shape}")
    B, C = x.shape[:2]
    co, ci = w.shape[:2]
    if ci != C:
        raise ShapeError(f"input has {C} channels, kernel expects {ci}")
    kern = w.shape[2:]
    out_ext = conv_output_shape(x.shape[2:], kern, padding, stride)

    xd = x.data
    if any(padding):
        pd, ph, pw = padding
        xp = np.pad(xd, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    else:
        xp = np.ascontiguousarray(xd)
    cols = _kernels.vol2col(xp, kern, stride, out_ext)
    wmat = w.data.reshape(co, -1)
    y = np.matmul(wmat, cols)
    y += b.data[:, None]
    y = y.reshape((B, co) + out_ext)

    keep_cols = cols if w.requires_grad else None
    padded_shape = xp.shape
    del cols

    def backward_fn(g):
        g2 = np.ascontiguousarray(g).reshape(B, co, -1)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2)
            gxp = _kernels.col2vol(gcols, padded_shape, kern, stride, out_ext)
            pd, ph, pw = padding
            gx = gxp[:, :, pd : pd + x.shape[2], ph : ph + x.shape[3], pw : pw + x.shape[4]]
        if w.requires_grad:
            gw = np.matmul(g2, keep_cols.transpose(0, 2, 1)).sum(axis=0, dtype=np.float64)
            gw = gw.astype(w.dtype).reshape(w.shape)
        if b.requires_grad:
            gb = g2.sum(axis=(0, 2), dtype=np.float64).astype(b.dtype)
        return gx, gw, gb

    return _result(y, (x, w, b), backward_fn)


def relu(x):
    y = np.maximum(x.data, 0).astype(x.dtype, copy=False)

    def backward_fn(g):
        return (g * (x.data > 0),)

    return _result(y, (x,), backward_fn)


def maxpool3d(x, window=2, stride=None):
    """Max pooling over (D, H, W). Ties go to the first index in row-major order."""
    window = _triple(window, "window")
    stride = window if stride is None else _triple(stride, "stride")
    if x.ndim != 5:
        raise ShapeError(f"maxpool3d input must be rank 5, got {x.shape}")
    for n, k in zip(x.shape[2:], window):
        if k > n:
            raise ShapeError(f"pool window {window} larger than input extents {x.shape[2:]}")
    out_ext = conv_output_shape(x.shape[2:], window, (0, 0, 0), stride)
    xd = np.ascontiguousarray(x.data)
    y, index = _kernels.maxpool3d_forward(xd, window, stride, out_ext)

    def backward_fn(g):
        return (_kernels.maxpool3d_backward(np.ascontiguousarray(g, dtype=x.dtype), index, x.shape),)

    return _result(y, (x,), backward_fn)


def global_avg_pool3d(x):
    """Per-channel mean over depth, height and width: (B, C, D, H, W) -> (B, C)."""
    if x.ndim != 5:
        raise ShapeError(f"global_avg_pool3d input must be rank 5, got {x.shape}")
    n = x.shape[2] * x.shape[3] * x.shape[4]
    y = (x.data.sum(axis=(2, 3, 4), dtype=np.float64) / n).astype(x.dtype)

    def backward_fn(g):
        scaled = (g.astype(np.float64) / n).astype(x.dtype)
        return (np.broadcast_to(scaled[:, :, None, None, None], x.shape).copy(),)

    return _result(y, (x,), backward_fn)


def dense(x, weight, bias):
    """``x @ weight + bias`` for x (B, C), weight (C, K), bias (K)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: cannot multiply {x.shape} by {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: bias shape {bias.shape} does not match {weight.shape[1]} outputs")
    # einsum keeps each row's reduction order independent of the batch size
    y = np.einsum("bc,ck->bk", x.data.astype(np.float64), weight.data.astype(np.float64))
    y = (y + bias.data).astype(x.dtype)

    def backward_fn(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = (x.data.astype(np.float64).T @ g.astype(np.float64)).astype(weight.dtype) if weight.requires_grad else None
        gb = g.sum(axis=0, dtype=np.float64).astype(bias.dtype) if bias.requires_grad else None
        return gx, gw, gb

    return _result(y, (x, weight, bias), backward_fn)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    p = _sigmoid(x.data)

    def backward_fn(g):
        return (g * p * (1 - p),)

    return _result(p, (x,), backward_fn)


def _labels(y, n):
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size != n:
        raise ShapeError(f"{y.size} labels for {n} predictions")
    return y


def bce_loss(p, y):
    """Mean binary cross-entropy of probabilities ``p`` (B x 1) against labels ``y``.

    Probabilities are clamped to [1e-7, 1 - 1e-7]; the clamp has zero gradient
    outside that interval.
    """
    n = p.data.size
    yv = _labels(y, n)
    pv = p.data.reshape(-1).astype(np.float64)
    pc = np.clip(pv, BCE_CLAMP, 1 - BCE_CLAMP)
    loss = -np.mean(yv * np.log(pc) + (1 - yv) * np.log1p(-pc))
    out = np.array(loss, dtype=p.dtype)

    def backward_fn(g):
        inside = (pv >= BCE_CLAMP) & (pv <= 1 - BCE_CLAMP)
        gp = (-yv / pc + (1 - yv) / (1 - pc)) / n * inside * float(g)
        return (gp.astype(p.dtype).reshape(p.shape),)

    return _result(out, (p,), backward_fn)


def bce_with_logits(z, y, reduction="mean"):
    """Binary cross-entropy of ``sigmoid(z)`` computed directly from logits.

    Equal to ``bce_loss(sigmoid(z), y)`` without the clamp, and free of the
    gradient underflow that saturated probabilities cause.
    """
    n = z.data.size
    yv = _labels(y, n)
    zv = z.data.reshape(-1).astype(np.float64)
    per = np.maximum(zv, 0) - zv * yv + np.log1p(np.exp(-np.abs(zv)))
    if reduction == "mean":
        scale = 1.0 / n
    elif reduction == "sum":
        scale = 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    out = np.array(per.sum() * scale, dtype=z.dtype)

    def backward_fn(g):
        gz = (-yv * _sigmoid(-zv) + (1 - yv) * _sigmoid(zv)) * (scale * float(g))
        return (gz.astype(z.dtype).reshape(z.shape),)

    return _result(out, (z,), backward_fn)


def tensor_sum(x):
    y = np.array(x.data.sum(dtype=np.float64), dtype=x.dtype)

    def backward_fn(g):
        return (np.full(x.shape, g, dtype=x.dtype),)

    return _result(y, (x,), backward_fn)


def scale(x, factor):
    y = (x.data * factor).astype(x.dtype, copy=False)

    def backward_fn(g):
        return ((g * factor).astype(x.dtype, copy=False),)

    return _result(y, (x,), backward_fn)


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    y = a.data + b.data

    def backward_fn(g):
        return g, g

    return _result(y, (a, b), backward_fn)
