"""Dense float tensors with taped reverse-mode differentiation.

Layout is channels-first with a leading batch axis: rank-4 tensors are
``[batch, channels, height, width]`` (2D networks) and rank-5 tensors are
``[batch, channels, depth, height, width]`` (3D networks).

Gradients are recorded on an explicit :class:`Tape`. Operations append nodes
while a tape is active (``with Tape() as tape: ...``); append order is the
topological order, and :func:`backward` walks nodes in strict reverse append
order, accumulating into each tensor's ``grad`` buffer. Running without an
active tape is the no-grad inference mode.

All kernels reduce in a fixed order, so identical inputs produce bit-identical
outputs.
"""

from __future__ import annotations

import threading
from itertools import product

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from voxseg.errors import GradError, ShapeError

DEFAULT_DTYPE = np.float32
# Batch-norm constants; conventional values, the source tables are silent.
BN_EPS = 1e-5
BN_MOMENTUM = 0.99

_ACTIVE = threading.local()


def _active_tape():
    return getattr(_ACTIVE, "tape", None)


class Tensor:
    """N-dimensional float array plus optional gradient and tape linkage."""

    __slots__ = ("data", "requires_grad", "grad", "tape", "node_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.tape = None
        self.node_id = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class TapeNode:
    __slots__ = ("op", "inputs", "out", "backward_fn", "input_ids")

    def __init__(self, op, inputs, out, backward_fn):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn
        self.input_ids = tuple(t.node_id for t in inputs)


class Tape:
    """Append-only operation record; append order is the topological order."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._outer = None

    def __enter__(self):
        self._outer = _active_tape()
        _ACTIVE.tape = self
        return self

    def __exit__(self, *exc):
        _ACTIVE.tape = self._outer
        return False

    def _append(self, op, inputs, out, backward_fn) -> int:
        self.nodes.append(TapeNode(op, inputs, out, backward_fn))
        return len(self.nodes) - 1


def _record(op: str, inputs, out_data, backward_fn) -> Tensor:
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        for t in inputs:
            if t.tape is not None and t.tape is not tape:
                raise GradError(f"{op}: input was produced on a different tape")
        out.tape = tape
        out.node_id = tape._append(op, tuple(inputs), out, backward_fn)
    return out


def backward(loss: Tensor):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape.

    Requires-grad tensors that never influence the loss end up with zero
    gradients.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss.tape is None:
        raise GradError("loss is not attached to a tape (no operations recorded)")
    tape = loss.tape
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad += np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += gi


# ---------------------------------------------------------------------------
# elementwise / structural operations


def _as_scalar(x) -> float:
    if isinstance(x, (int, float, np.floating, np.integer)):
        return float(x)
    raise TypeError(f"expected a Python scalar, got {type(x)!r}")


def _check_same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = _as_scalar(b)
        return _record("add", (a,), a.data + c, lambda g: (g,))
    _check_same_shape("add", a, b)
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        c = _as_scalar(a)
        return _record("sub", (b,), c - b.data, lambda g: (-g,))
    if not isinstance(b, Tensor):
        c = _as_scalar(b)
        return _record("sub", (a,), a.data - c, lambda g: (g,))
    _check_same_shape("sub", a, b)
    return _record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = _as_scalar(b)
        return _record("mul", (a,), a.data * c, lambda g: (g * c,))
    _check_same_shape("mul", a, b)
    da, db = a.data, b.data
    return _record("mul", (a, b), da * db, lambda g: (g * db, g * da))


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = _as_scalar(b)
        return _record("div", (a,), a.data / c, lambda g: (g / c,))
    _check_same_shape("div", a, b)
    da, db = a.data, b.data
    return _record("div", (a, b), da / db, lambda g: (g / db, -g * da / (db * db)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # derivative at exactly 0 is defined as 0
    return _record("relu", (x,), np.where(mask, x.data, 0), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    s = np.empty_like(d)
    pos = d >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    s[~pos] = e / (1.0 + e)
    return _record("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record(
        "sum_all",
        (x,),
        np.asarray(np.sum(x.data)),
        lambda g: (np.broadcast_to(g, shape).astype(x.dtype, copy=True),),
    )


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != b.data.ndim or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(
            f"concat_channels: non-channel extents differ, {tuple(a.shape)} vs {tuple(b.shape)}"
        )
    ca = a.shape[1]
    return _record(
        "concat_channels",
        (a, b),
        np.concatenate((a.data, b.data), axis=1),
        lambda g: (g[:, :ca], g[:, ca:]),
    )


# ---------------------------------------------------------------------------
# convolution / pooling / upsampling


def _spatial_rank(x: Tensor) -> int:
    if x.data.ndim == 4:
        return 2
    if x.data.ndim == 5:
        return 3
    raise ShapeError(f"expected rank 4 or 5 input, got rank {x.data.ndim}")


def _per_axis(value, nd: int, name: str):
    if isinstance(value, (int, np.integer)):
        return (int(value),) * nd
    value = tuple(int(v) for v in value)
    if len(value) != nd:
        raise ShapeError(f"{name} must have {nd} entries, got {len(value)}")
    return value


_CONV_FWD = {2: "ncxyuv,ocuv->noxy", 3: "ncxyzuvw,ocuvw->noxyz"}
_CONV_DW = {2: "ncxyuv,noxy->ocuv", 3: "ncxyzuvw,noxyz->ocuvw"}
_CONV_DX = {2: "noxy,oc->ncxy", 3: "noxyz,oc->ncxyz"}


def conv_output_extent(extent: int, kernel: int, stride: int, pad: int) -> int:
    return (extent + 2 * pad - kernel) // stride + 1


def conv(x: Tensor, weights: Tensor, bias: Tensor, stride=1, padding: str = "same") -> Tensor:
    """Cross-correlation over the spatial axes with per-channel bias.

    ``weights`` is ``[out_channels, in_channels, *kernel]``; ``padding`` is
    ``"same"`` (odd kernels only, symmetric zero pad of (k-1)/2) or
    ``"valid"``.
    """
    nd = _spatial_rank(x)
    if weights.data.ndim != nd + 2:
        raise ShapeError(
            f"conv: kernel rank {weights.data.ndim} does not match rank-{nd + 2} input"
        )
    if x.shape[1] != weights.shape[1]:
        raise ShapeError(
            f"conv: input has {x.shape[1]} channels, kernel expects {weights.shape[1]}"
        )
    if bias.data.ndim != 1 or bias.shape[0] != weights.shape[0]:
        raise ShapeError("conv: bias length must equal the output channel count")
    kernel = weights.shape[2:]
    strides = _per_axis(stride, nd, "stride")
    if padding == "same":
        if any(k % 2 == 0 for k in kernel):
            raise ShapeError(f"conv: 'same' padding requires odd kernel extents, got {kernel}")
        pads = tuple((k - 1) // 2 for k in kernel)
    elif padding == "valid":
        pads = (0,) * nd
    else:
        raise ShapeError(f"conv: unknown padding {padding!r}")
    in_spatial = x.shape[2:]
    out_spatial = tuple(
        conv_output_extent(e, k, s, p) for e, k, s, p in zip(in_spatial, kernel, strides, pads)
    )
    if any(o < 1 for o in out_spatial):
        raise ShapeError(f"conv: kernel {kernel} does not fit input extents {in_spatial}")

    pad_width = [(0, 0), (0, 0)] + [(p, p) for p in pads]
    xp = np.pad(x.data, pad_width) if any(pads) else x.data
    windows = sliding_window_view(xp, kernel, axis=tuple(range(2, 2 + nd)))
    windows = windows[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in strides)]
    out = np.einsum(_CONV_FWD[nd], windows, weights.data)
    out += bias.data.reshape((1, -1) + (1,) * nd)

    w_data = weights.data
    xp_shape = xp.shape

    def backward_fn(g):
        gx = gw = gb = None
        if bias.requires_grad:
            gb = g.sum(axis=(0,) + tuple(range(2, 2 + nd)))
        if weights.requires_grad:
            gw = np.einsum(_CONV_DW[nd], windows, g)
        if x.requires_grad:
            gxp = np.zeros(xp_shape, dtype=g.dtype)
            for offs in product(*(range(k) for k in kernel)):
                contrib = np.einsum(_CONV_DX[nd], g, w_data[(slice(None), slice(None)) + offs])
                sl = tuple(
                    slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offs, strides, out_spatial)
                )
                gxp[(slice(None), slice(None)) + sl] += contrib
            if any(pads):
                unpad = tuple(slice(p, dim - p) for p, dim in zip(pads, xp_shape[2:]))
                gx = gxp[(slice(None), slice(None)) + unpad]
            else:
                gx = gxp
        return gx, gw, gb

    return _record("conv", (x, weights, bias), out, backward_fn)


def max_pool(x: Tensor, window=2, stride=None) -> Tensor:
    """Windowed maximum; ties route the gradient to the first cell in scan order."""
    nd = _spatial_rank(x)
    windows_ext = _per_axis(window, nd, "window")
    strides = _per_axis(window if stride is None else stride, nd, "stride")
    in_spatial = x.shape[2:]
    for e, w in zip(in_spatial, windows_ext):
        if e < w:
            raise ShapeError(f"max_pool: window {windows_ext} exceeds input extents {in_spatial}")
    out_spatial = tuple(
        (e - w) // s + 1 for e, w, s in zip(in_spatial, windows_ext, strides)
    )
    view = sliding_window_view(x.data, windows_ext, axis=tuple(range(2, 2 + nd)))
    view = view[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in strides)]
    lead = view.shape[: 2 + nd]
    flat = view.reshape(lead + (-1,))
    arg = flat.argmax(axis=-1)  # first maximum in C scan order
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    in_shape = x.shape

    def backward_fn(g):
        offs = np.unravel_index(arg, windows_ext)
        grids = np.indices(lead)
        abs_idx = tuple(
            grids[2 + i] * strides[i] + offs[i] for i in range(nd)
        )
        gx = np.zeros(in_shape, dtype=g.dtype)
        np.add.at(gx, (grids[0], grids[1]) + abs_idx, g)
        return (gx,)

    return _record("max_pool", (x,), out, backward_fn)


def upsample(x: Tensor, factor=2, mode: str = "nearest") -> Tensor:
    """Nearest-neighbour upsampling: each cell replicated ``factor`` times per axis."""
    if mode != "nearest":
        raise ShapeError(f"upsample: unsupported mode {mode!r}")
    nd = _spatial_rank(x)
    factors = _per_axis(factor, nd, "factor")
    if any(f < 1 for f in factors):
        raise ShapeError(f"upsample: factors must be >= 1, got {factors}")
    out = x.data
    for i, f in enumerate(factors):
        if f > 1:
            out = np.repeat(out, f, axis=2 + i)

    in_spatial = x.shape[2:]

    def backward_fn(g):
        # out[..., x*f + i, ...] replicates in[..., x, ...]; fold back by summing blocks
        shape = list(g.shape[:2])
        for e, f in zip(in_spatial, factors):
            shape.extend((e, f))
        gx = g.reshape(shape)
        for axis in range(2 + 2 * nd - 1, 2, -2):
            gx = gx.sum(axis=axis)
        return (gx,)

    return _record("upsample", (x,), out, backward_fn)


# ---------------------------------------------------------------------------
# batch normalization


class BatchNormState:
    """Running statistics for one batch-norm layer (eval-mode normalization)."""

    __slots__ = ("running_mean", "running_var")

    def __init__(self, channels: int, dtype=DEFAULT_DTYPE):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def copy(self) -> "BatchNormState":
        dup = BatchNormState(len(self.running_mean), dtype=self.running_mean.dtype)
        dup.running_mean[:] = self.running_mean
        dup.running_var[:] = self.running_var
        return dup


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: str = "train",
) -> Tensor:
    """Per-channel normalization over batch and spatial axes.

    Train mode uses current batch moments and updates ``state`` by exponential
    moving average (momentum ``BN_MOMENTUM``); eval mode normalizes with the
    running statistics.
    """
    channels = x.shape[1]
    if gamma.data.shape != (channels,) or beta.data.shape != (channels,):
        raise ShapeError(
            f"batch_norm: gamma/beta must have shape ({channels},), got "
            f"{gamma.data.shape} and {beta.data.shape}"
        )
    axes = (0,) + tuple(range(2, x.data.ndim))
    m = x.data.size // channels
    if m == 0:
        raise ShapeError("batch_norm: channel has zero elements")
    bshape = (1, channels) + (1,) * (x.data.ndim - 2)

    if mode == "train":
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state.running_mean *= BN_MOMENTUM
        state.running_mean += (1.0 - BN_MOMENTUM) * mean.astype(state.running_mean.dtype)
        state.running_var *= BN_MOMENTUM
        state.running_var += (1.0 - BN_MOMENTUM) * var.astype(state.running_var.dtype)
    elif mode == "eval":
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
    else:
        raise ShapeError(f"batch_norm: unknown mode {mode!r}")

    inv_std = 1.0 / np.sqrt(var + np.asarray(BN_EPS, dtype=x.dtype))
    xhat = (x.data - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    g_data = gamma.data

    def backward_fn(g):
        dgamma = dbeta = dx = None
        if gamma.requires_grad:
            dgamma = (g * xhat).sum(axis=axes)
        if beta.requires_grad:
            dbeta = g.sum(axis=axes)
        if x.requires_grad:
            scale = (g_data * inv_std).reshape(bshape)
            if mode == "train":
                gm = g.mean(axis=axes).reshape(bshape)
                gxm = (g * xhat).mean(axis=axes).reshape(bshape)
                dx = scale * (g - gm - xhat * gxm)
            else:
                dx = scale * g
        return dx, dgamma, dbeta

    return _record("batch_norm", (x, gamma, beta), out, backward_fn)
