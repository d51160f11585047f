"""A small reverse-mode autodiff over numpy arrays.

Only the operations the refiner and noise predictor use are provided, each
with an exact hand-written adjoint. Leaf tensors created with
``requires_grad=True`` accumulate (``+=``) into ``.grad``; intermediate
gradients live only for the duration of one ``backward`` call, so calling it
twice on the same graph doubles the leaf gradients.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "Parameter",
    "no_grad",
    "backward",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "linear",
    "conv1d",
    "conv_transpose1d",
    "segment_conv1d",
    "gated_segment_conv1d",
    "lrelu",
    "tanh",
    "sigmoid",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "repeat_interleave",
    "square",
    "GraphError",
]

LRELU_SLOPE = 0.2

_state = threading.local()


def _grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in this thread (inference)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.parents = ()
        self.backward_fn = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.data.shape}>"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def Parameter(value, name):
    """Leaf tensor that accumulates gradient."""
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad or p.parents for p in parents):
        out.parents = parents
        out.backward_fn = backward_fn
    return out


def _tracked(t):
    return t.requires_grad or bool(t.parents)


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``."""
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar, got shape {loss.data.shape}")
    if not _tracked(loss):
        raise GraphError("backward called on a tensor with no recorded forward graph")

    order = []
    seen = set()
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
        for p in node.parents:
            if id(p) not in seen and _tracked(p):
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad += g
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not _tracked(parent):
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# --------------------------------------------------------------------------- elementwise


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a, c):
    """Multiply by a python/numpy constant (no gradient to ``c``)."""
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def neg(a):
    return scale(a, -1.0)


def square(a):
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def lrelu(x, slope=LRELU_SLOPE):
    x = as_tensor(x)
    mask = x.data >= 0
    factor = np.where(mask, 1.0, slope)
    return _make(x.data * factor, (x,), lambda g: (g * factor,))


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x):
    x = as_tensor(x)
    y = expit(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


# --------------------------------------------------------------------------- reductions / shape


def sum(x, axis=None, keepdims=False):  # noqa: A001
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), fn)


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape):
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes):
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def repeat_interleave(x, repeats, axis=-1):
    """Nearest-neighbour upsampling: each entry repeated ``repeats`` times."""
    x = as_tensor(x)
    out = np.repeat(x.data, repeats, axis=axis)

    def fn(g):
        ax = axis % x.data.ndim
        shape = list(x.shape)
        shape.insert(ax + 1, repeats)
        return (g.reshape(shape).sum(axis=ax + 1),)

    return _make(out, (x,), fn)


def index(x, key):
    """Basic-slice indexing."""
    def fn(g):
        full = np.zeros_like(x.data)
        full[key] += g
        return (full,)

    return _make(x.data[key], (x,), fn)


Tensor.__getitem__ = index


# --------------------------------------------------------------------------- dense


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if _tracked(a) else None
        gb = np.swapaxes(a.data, -1, -2) @ g if _tracked(b) else None
        if ga is not None:
            ga = _unbroadcast(ga, a.shape)
        if gb is not None:
            gb = _unbroadcast(gb, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), fn)


def linear(x, w, b=None):
    """``x @ w.T + b`` over the last axis of ``x``; ``w`` is ``(d_out, d_in)``."""
    x = as_tensor(x)
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"linear: input feature dim {x.shape[-1]} != weight in-dim {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def fn(g):
        g2 = g.reshape(-1, wd.shape[0])
        gx = (g @ wd) if _tracked(x) else None
        gw = g2.T @ xd.reshape(-1, wd.shape[1])
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, fn if b is not None else (lambda g: fn(g)[:2]))


# --------------------------------------------------------------------------- convolution


def _resolve_padding(padding, k, dilation):
    span = dilation * (k - 1)
    if padding == "valid":
        return 0, 0
    if padding == "same":
        return span // 2, span - span // 2
    if isinstance(padding, int):
        return padding, padding
    left, right = padding
    return int(left), int(right)


def conv1d(x, w, b=None, stride=1, dilation=1, padding="valid"):
    """Cross-correlation of ``x (C_in, L)`` with ``w (C_out, C_in, k)``.

    ``padding`` is ``"valid"``, ``"same"`` (stride 1 keeps ``L``), an int, or a
    ``(left, right)`` pair of zero padding.
    """
    x = as_tensor(x)
    if x.data.ndim != 2 or w.data.ndim != 3:
        raise ValueError(f"conv1d expects x (C_in, L) and w (C_out, C_in, k), got {x.shape} and {w.shape}")
    c_out, c_in, k = w.shape
    if x.shape[0] != c_in:
        raise ValueError(f"conv1d: input has {x.shape[0]} channels, weight expects C_in={c_in}")
    if b is not None and b.shape != (c_out,):
        raise ValueError(f"conv1d: bias shape {b.shape} != (C_out={c_out},)")
    if stride < 1 or dilation < 1:
        raise ValueError("stride and dilation must be >= 1")
    left, right = _resolve_padding(padding, k, dilation)
    length = x.shape[1]
    padded = np.pad(x.data, ((0, 0), (left, right)))
    span = dilation * (k - 1)
    out_len = (padded.shape[1] - span - 1) // stride + 1
    if out_len < 1:
        raise ValueError(f"conv1d: input length {length} too short for kernel span {span + 1}")
    stop = stride * (out_len - 1) + 1
    # cols[c, j, n] = padded[c, n * stride + j * dilation]
    cols = np.stack([padded[:, j * dilation:j * dilation + stop:stride] for j in range(k)], axis=1)
    wd = w.data
    out = np.tensordot(wd, cols, axes=([1, 2], [0, 1]))
    if b is not None:
        out += b.data[:, None]

    def fn(g):
        gw = np.tensordot(g, cols, axes=([1], [2]))
        gx = None
        if _tracked(x):
            gcols = np.tensordot(wd, g, axes=([0], [0]))  # (C_in, k, out_len)
            gpad = np.zeros_like(padded)
            for j in range(k):
                gpad[:, j * dilation:j * dilation + stop:stride] += gcols[:, j]
            gx = gpad[:, left:left + length]
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=1)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, fn)


def conv_transpose1d(x, w, b=None, stride=1, crop=None, out_len=None):
    """Transposed convolution: the adjoint of a strided ``conv1d``.

    ``x`` is ``(C_in, L)`` and ``w`` is ``(C_in, C_out, k)``. The full output
    of length ``(L - 1) * stride + k`` is cropped by ``crop`` samples on the
    left and truncated to ``out_len`` (default ``L * stride``). The default
    crop ``(k - stride) // 2`` makes a kernel of ``2 * stride`` the exact
    adjoint of ``conv1d(..., stride=stride, padding=stride // 2)``.
    """
    x = as_tensor(x)
    c_in, c_out, k = w.shape
    if x.data.ndim != 2 or x.shape[0] != c_in:
        raise ValueError(f"conv_transpose1d: input {x.shape} does not match weight C_in={c_in}")
    if b is not None and b.shape != (c_out,):
        raise ValueError(f"conv_transpose1d: bias shape {b.shape} != (C_out={c_out},)")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    length = x.shape[1]
    if crop is None:
        crop = max(0, (k - stride) // 2)
    if out_len is None:
        out_len = length * stride
    full_len = (length - 1) * stride + k
    if crop + out_len > full_len:
        raise ValueError(f"conv_transpose1d: cannot take {out_len} samples at offset {crop} from {full_len}")
    stop = stride * (length - 1) + 1
    wd = w.data
    contrib = np.tensordot(wd, x.data, axes=([0], [0]))  # (C_out, k, L)
    full = np.zeros((c_out, full_len))
    for j in range(k):
        full[:, j:j + stop:stride] += contrib[:, j]
    out = full[:, crop:crop + out_len].copy()
    if b is not None:
        out += b.data[:, None]

    def fn(g):
        gfull = np.zeros((c_out, full_len))
        gfull[:, crop:crop + out_len] = g
        cols = np.stack([gfull[:, j:j + stop:stride] for j in range(k)], axis=1)  # (C_out, k, L)
        gw = np.tensordot(x.data, cols, axes=([1], [2]))  # (C_in, C_out, k)
        gx = np.tensordot(wd, cols, axes=([1, 2], [0, 1])) if _tracked(x) else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=1)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, fn)


def _segment_cols(xd, n_seg, segment_len, k, dilation):
    c_in, length = xd.shape
    span = dilation * (k - 1)
    left = span // 2
    padded = np.pad(xd, ((0, 0), (left, span - left)))
    cols = np.stack([padded[:, j * dilation:j * dilation + length] for j in range(k)], axis=1)
    # (C_in, k, K, M) -> (K, C_in * k, M)
    cols = cols.reshape(c_in, k, n_seg, segment_len).transpose(2, 0, 1, 3).reshape(n_seg, c_in * k, segment_len)
    return cols, left, padded.shape


def _segment_input_grad(kmat, gs, pad_shape, left, length, k, dilation):
    n_seg, _, segment_len = gs.shape
    c_in = kmat.shape[2] // k
    gcols = np.matmul(kmat.transpose(0, 2, 1), gs)  # (K, C_in*k, M)
    gcols = gcols.reshape(n_seg, c_in, k, segment_len).transpose(1, 2, 0, 3).reshape(c_in, k, length)
    gpad = np.zeros(pad_shape)
    for j in range(k):
        gpad[:, j * dilation:j * dilation + length] += gcols[:, j]
    return gpad[:, left:left + length]


def _check_segments(x, kernels, segment_len, name):
    n_seg, c_out, c_in, k = kernels.shape
    channels, length = x.shape
    if channels != c_in:
        raise ValueError(f"{name}: input has {channels} channels, kernels expect {c_in}")
    if length % segment_len:
        raise ValueError(f"{name}: length {length} not divisible by segment length {segment_len}")
    if length // segment_len != n_seg:
        raise ValueError(f"{name}: {length // segment_len} segments but {n_seg} kernel sets")
    return n_seg, c_out, c_in, k, length


def segment_conv1d(x, kernels, segment_len, dilation=1):
    """Location-variable convolution.

    ``x`` is ``(C_in, D)`` split into ``K = D / segment_len`` contiguous
    segments; segment ``s`` is convolved with its own kernel
    ``kernels[s]`` of shape ``(C_out, C_in, k)``. Same padding reads real
    samples from neighbouring segments and zeros past the sequence ends.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    n_seg, c_out, c_in, k, length = _check_segments(x, kernels, segment_len, "segment_conv1d")
    cols, left, pad_shape = _segment_cols(x.data, n_seg, segment_len, k, dilation)
    kmat = np.ascontiguousarray(kernels.data).reshape(n_seg, c_out, c_in * k)
    out = np.matmul(kmat, cols).transpose(1, 0, 2).reshape(c_out, length)

    def fn(g):
        gs = g.reshape(c_out, n_seg, segment_len).transpose(1, 0, 2)  # (K, C_out, M)
        gk = np.matmul(gs, cols.transpose(0, 2, 1)).reshape(kernels.shape)
        gx = _segment_input_grad(kmat, gs, pad_shape, left, length, k, dilation) if _tracked(x) else None
        return gx, gk

    return _make(out, (x, kernels), fn)


def gated_segment_conv1d(x, kernels, segment_len, dilation=1):
    """``tanh(F * x) * sigmoid(G * x)`` with per-segment kernels.

    ``kernels`` is ``(K, 2 * C_out, C_in, k)``: the first ``C_out`` output
    channels are the filter kernels F, the rest the gate kernels G. Numerically
    identical to two ``segment_conv1d`` calls followed by the gating, fused so
    the input columns are built once.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    n_seg, c_out2, c_in, k, length = _check_segments(x, kernels, segment_len, "gated_segment_conv1d")
    if c_out2 % 2:
        raise ValueError("gated_segment_conv1d needs an even number of kernel output channels")
    c_out = c_out2 // 2
    cols, left, pad_shape = _segment_cols(x.data, n_seg, segment_len, k, dilation)
    kmat = np.ascontiguousarray(kernels.data).reshape(n_seg, c_out2, c_in * k)
    y = np.matmul(kmat, cols)  # (K, 2C, M)
    a = np.tanh(y[:, :c_out])
    b = expit(y[:, c_out:])
    out = (a * b).transpose(1, 0, 2).reshape(c_out, length)

    def fn(g):
        gz = g.reshape(c_out, n_seg, segment_len).transpose(1, 0, 2)
        gy = np.concatenate([gz * b * (1.0 - a * a), gz * a * b * (1.0 - b)], axis=1)
        gk = np.matmul(gy, cols.transpose(0, 2, 1)).reshape(kernels.shape)
        gx = _segment_input_grad(kmat, gy, pad_shape, left, length, k, dilation) if _tracked(x) else None
        return gx, gk

    return _make(out, (x, kernels), fn)
