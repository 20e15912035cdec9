"""Minimal dense-tensor kernel with reverse-mode differentiation.

Tensors wrap contiguous numpy arrays (float32 for training, float64 for
gradient checking) and record the operations applied to them. Calling
:func:`backward` on a scalar result replays the recorded graph once in
reverse topological order, accumulating gradients on every tensor that
requires them. Image tensors are laid out (batch, channel, height, width).

Tensors are treated as immutable once created: no op writes into its
inputs, so a frozen graph of parameters can be shared across threads.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np


class DimensionError(ValueError):
    """Shape mismatch between operands, naming the offending axes."""


class ConfigError(ValueError):
    """Invalid configuration value."""


class UsageError(RuntimeError):
    """API misuse, e.g. backward through a detached tensor."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class OpRecord:
    """One recorded differentiable op: kind tag, input refs, backward rule.

    ``backward(grad_out)`` returns one gradient array per input (or None
    for inputs that do not need one). Intermediates required by the rule
    are captured in the closure.
    """

    __slots__ = ("kind", "inputs", "backward")

    def __init__(self, kind, inputs, backward):
        self.kind = kind
        self.inputs = inputs
        self.backward = backward


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = None

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # small operator sugar; full op set lives at module level
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, kind, inputs, backward_fn):
    """Wrap an op result, recording the graph node when recording is on."""
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad or t.op is not None for t in inputs):
        out.op = OpRecord(kind, inputs, backward_fn)
        out.requires_grad = True
    return out


def _accumulate(t, g):
    # ownership transfer: backward rules return arrays the callee may keep
    # (alias-producing rules copy), so the first contribution is stored
    # as-is and later fan-in contributions add in place
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def backward(loss):
    """Backpropagate from a recorded scalar, filling ``.grad`` fields.

    Each recorded op is visited exactly once, in reverse topological
    order. Gradients accumulate across fan-out.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if loss.op is None:
        raise UsageError("backward on a detached tensor: no graph was recorded")

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
        if node.op is not None:
            for parent in node.op.inputs:
                if id(parent) not in seen and (parent.op is not None or parent.requires_grad):
                    stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.op is None or node.grad is None:
            continue
        grads = node.op.backward(node.grad)
        node.grad = None  # buffer may transfer to a parent; node is done
        for parent, g in zip(node.op.inputs, grads):
            if g is None or not (parent.requires_grad or parent.op is not None):
                continue
            _accumulate(parent, g)


def gradients(loss, params):
    """backward() then collect a name -> gradient array map for ``params``."""
    backward(loss)
    out = {}
    for name, p in params.items():
        if p.grad is None:
            raise UsageError(f"parameter {name!r} received no gradient")
        out[name] = p.grad
    return out


# ---------------------------------------------------------------------------
# elementwise / reductions


def _unbroadcast(g, shape):
    # sum gradient over axes that were broadcast in the forward direction
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, opname):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise DimensionError(
            f"{opname}: shapes {a.data.shape} and {b.data.shape} are not broadcastable"
        ) from None


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def bwd(g):
        ga = _unbroadcast(g, a.data.shape)
        gb = _unbroadcast(g, b.data.shape)
        if gb is ga:  # equal shapes: both alias g, parents need distinct buffers
            gb = gb.copy()
        return ga, gb

    return _make(out, "add", (a, b), bwd)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _check_broadcast(a, b, "sub")
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)

    return _make(out, "sub", (a, b), bwd)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _check_broadcast(a, b, "mul")
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(out, "mul", (a, b), bwd)


def scale(x, s):
    s = float(s)

    def bwd(g):
        return (g * s,)

    return _make(x.data * s, "scale", (x,), bwd)


def add_scalar(x, c):
    c = float(c)

    def bwd(g):
        return (g,)

    return _make(x.data + c, "add_scalar", (x,), bwd)


def reciprocal(x):
    out = 1.0 / x.data

    def bwd(g):
        return (-g * out * out,)

    return _make(out, "reciprocal", (x,), bwd)


def log(x):
    xd = x.data

    def bwd(g):
        return (g / xd,)

    return _make(np.log(xd), "log", (x,), bwd)


def softplus(x):
    # stable log(1 + e^x); derivative is the logistic sigmoid
    xd = x.data
    out = np.maximum(xd, 0) + np.log1p(np.exp(-np.abs(xd)))

    def bwd(g):
        sig = 1.0 / (1.0 + np.exp(-xd))
        return (g * sig,)

    return _make(out, "softplus", (x,), bwd)


def softplus_inverse(y):
    """Float helper (not an op): x such that softplus(x) == y."""
    y = float(y)
    if y > 30.0:  # softplus is identity to double precision here
        return y
    return y + math.log1p(-math.exp(-y))


def tsum(x, axis=None, keepdims=False):
    xshape = x.data.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, xshape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xshape).copy(),)

    return _make(out, "sum", (x,), bwd)


def tmean(x, axis=None, keepdims=False):
    xshape = x.data.shape
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = 1
        for ax in axes:
            n *= xshape[ax]
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, xshape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, xshape).copy(),)

    return _make(out, "mean", (x,), bwd)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape):
    old = x.data.shape
    out = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(old),)

    return _make(out, "reshape", (x,), bwd)


def transpose(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = x.data.transpose(axes)

    def bwd(g):
        return (g.transpose(inv),)

    return _make(out, "transpose", (x,), bwd)


def slice_channels(x, start, stop):
    """Channel-axis slice of a BCHW tensor (view copy; grads scatter back)."""
    if x.data.ndim != 4:
        raise DimensionError(f"slice_channels expects BCHW, got shape {x.data.shape}")
    C = x.data.shape[1]
    if not (0 <= start < stop <= C):
        raise DimensionError(f"slice_channels [{start}:{stop}] out of range for C={C}")
    xshape = x.data.shape
    out = np.ascontiguousarray(x.data[:, start:stop])

    def bwd(g):
        gx = np.zeros(xshape, dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return _make(out, "slice_channels", (x,), bwd)


def split_channels_half(x):
    """Split BCHW into two halves along the channel axis."""
    C = x.data.shape[1]
    if C % 2 != 0:
        raise DimensionError(f"split_channels_half needs even channel axis, got C={C}")
    return slice_channels(x, 0, C // 2), slice_channels(x, C // 2, C)


def pixel_shuffle(x, factor=2):
    """Rearrange B(r^2 C)HW -> BC(rH)(rW); a bijective element shuffle."""
    B, C4, H, W = _shape4(x, "pixel_shuffle")
    r = int(factor)
    if C4 % (r * r) != 0:
        raise DimensionError(f"pixel_shuffle: channel axis {C4} not divisible by {r * r}")
    C = C4 // (r * r)
    out = (
        x.data.reshape(B, C, r, r, H, W)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(B, C, H * r, W * r)
    )

    def bwd(g):
        gx = (
            g.reshape(B, C, H, r, W, r)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(B, C4, H, W)
        )
        return (np.ascontiguousarray(gx),)

    return _make(np.ascontiguousarray(out), "pixel_shuffle", (x,), bwd)


def pixel_unshuffle(x, factor=2):
    """Inverse rearrangement of :func:`pixel_shuffle`."""
    B, C, H, W = _shape4(x, "pixel_unshuffle")
    r = int(factor)
    if H % r or W % r:
        raise DimensionError(f"pixel_unshuffle: spatial axes ({H},{W}) not divisible by {r}")
    out = (
        x.data.reshape(B, C, H // r, r, W // r, r)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(B, C * r * r, H // r, W // r)
    )

    def bwd(g):
        gx = (
            g.reshape(B, C, r, r, H // r, W // r)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(B, C, H, W)
        )
        return (np.ascontiguousarray(gx),)

    return _make(np.ascontiguousarray(out), "pixel_unshuffle", (x,), bwd)


def reflect_pad2d(x, pad):
    """Reflect-pad the two trailing axes; pad = (top, bottom, left, right)."""
    top, bottom, left, right = (int(p) for p in pad)
    B, C, H, W = _shape4(x, "reflect_pad2d")
    if max(top, bottom) > H - 1 or max(left, right) > W - 1:
        raise DimensionError(
            f"reflect_pad2d: pad {pad} too large for spatial axes ({H},{W})"
        )
    rows = np.concatenate(
        [np.arange(top, 0, -1), np.arange(H), np.arange(H - 2, H - 2 - bottom, -1)]
    )
    cols = np.concatenate(
        [np.arange(left, 0, -1), np.arange(W), np.arange(W - 2, W - 2 - right, -1)]
    )
    out = x.data[:, :, rows[:, None], cols[None, :]]

    def bwd(g):
        gx = np.zeros((B, C, H, W), dtype=g.dtype)
        np.add.at(gx, (slice(None), slice(None), rows[:, None], cols[None, :]), g)
        return (gx,)

    return _make(np.ascontiguousarray(out), "reflect_pad2d", (x,), bwd)


def crop2d(x, height, width):
    """Keep the top-left (height, width) window of the two trailing axes."""
    B, C, H, W = _shape4(x, "crop2d")
    if height > H or width > W:
        raise DimensionError(f"crop2d to ({height},{width}) exceeds input ({H},{W})")
    out = np.ascontiguousarray(x.data[:, :, :height, :width])

    def bwd(g):
        gx = np.zeros((B, C, H, W), dtype=g.dtype)
        gx[:, :, :height, :width] = g
        return (gx,)

    return _make(out, "crop2d", (x,), bwd)


def _shape4(x, opname):
    if x.data.ndim != 4:
        raise DimensionError(f"{opname} expects a 4-d BCHW tensor, got shape {x.data.shape}")
    return x.data.shape


# ---------------------------------------------------------------------------
# matmul / softmax


def matmul_batched(a, b):
    """Stacked matrix product (..., n, k) @ (..., k, m) with equal batch dims."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError("matmul_batched operands must have >= 2 dims")
    if a.data.shape[:-2] != b.data.shape[:-2]:
        raise DimensionError(
            f"matmul_batched: batch dims differ {a.data.shape[:-2]} vs {b.data.shape[:-2]}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul_batched: inner axes differ, {a.data.shape[-1]} vs {b.data.shape[-2]}"
        )
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g @ bd.swapaxes(-1, -2)
        gb = ad.swapaxes(-1, -2) @ g
        return ga, gb

    return _make(out, "matmul", (a, b), bwd)


def softmax_lastdim(x):
    """Softmax over the trailing axis; every slice sums to one."""
    xd = x.data
    if not np.all(np.isfinite(xd)):
        raise UsageError("softmax_lastdim input contains non-finite values")
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, "softmax", (x,), bwd)


# ---------------------------------------------------------------------------
# normalization


def layer_norm_channel(x, gain, offset, eps=1e-6):
    """Normalize each (batch, pixel) channel vector to zero mean, unit variance.

    gain/offset are per-channel affine parameters of length C.
    """
    if eps <= 0:
        raise ConfigError(f"layer_norm_channel eps must be > 0, got {eps}")
    B, C, H, W = _shape4(x, "layer_norm_channel")
    if gain.data.shape != (C,) or offset.data.shape != (C,):
        raise DimensionError(
            f"layer_norm_channel: gain/offset shapes {gain.data.shape}/{offset.data.shape} "
            f"do not match channel axis C={C}"
        )
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    gd = gain.data.reshape(1, C, 1, 1)
    out = y * gd + offset.data.reshape(1, C, 1, 1)

    def bwd(g):
        dgain = (g * y).sum(axis=(0, 2, 3))
        doffset = g.sum(axis=(0, 2, 3))
        dy = g * gd
        m1 = dy.mean(axis=1, keepdims=True)
        m2 = (dy * y).mean(axis=1, keepdims=True)
        dx = (dy - m1 - y * m2) * inv
        return dx, dgain, doffset

    return _make(out, "layer_norm", (x, gain, offset), bwd)


# ---------------------------------------------------------------------------
# pooling


def adaptive_avg_pool_to_1(x):
    """Global spatial mean, BCHW -> BC11."""
    B, C, H, W = _shape4(x, "adaptive_avg_pool_to_1")
    out = x.data.mean(axis=(2, 3), keepdims=True)
    n = H * W

    def bwd(g):
        return (np.broadcast_to(g / n, (B, C, H, W)).copy(),)

    return _make(out, "global_avg_pool", (x,), bwd)


def _box_index(extent, window):
    # start row of each fully-inside window, nudged toward centering
    w = min(window, extent)
    starts = np.clip(np.arange(extent) - (w - 1) // 2, 0, extent - w)
    return w, starts


def local_avg_pool(x, window):
    """Mean over a local window around each pixel, BCHW -> BCHW.

    Windows have fixed size min(window, extent) per axis and slide so they
    stay inside the image (clamped at the borders). With window >= both
    spatial extents this reduces to the global mean broadcast everywhere.
    """
    window = int(window)
    if window < 1:
        raise ConfigError(f"local_avg_pool window must be >= 1, got {window}")
    B, C, H, W = _shape4(x, "local_avg_pool")
    wh, r0 = _box_index(H, window)
    ww, c0 = _box_index(W, window)
    r1, c1 = r0 + wh, c0 + ww
    n = wh * ww

    integral = np.zeros((B, C, H + 1, W + 1), dtype=x.data.dtype)
    np.cumsum(x.data, axis=2, out=integral[:, :, 1:, 1:])
    np.cumsum(integral[:, :, 1:, 1:], axis=3, out=integral[:, :, 1:, 1:])
    ri0, ri1 = r0[:, None], r1[:, None]
    ci0, ci1 = c0[None, :], c1[None, :]
    out = (
        integral[:, :, ri1, ci1]
        - integral[:, :, ri0, ci1]
        - integral[:, :, ri1, ci0]
        + integral[:, :, ri0, ci0]
    ) / n

    def bwd(g):
        # adjoint of the integral-image gather: scatter the four corner
        # contributions, then a reverse double cumsum recovers d/dx
        gn = g / n
        D = np.zeros((B, C, H + 1, W + 1), dtype=g.dtype)
        np.add.at(D, (slice(None), slice(None), ri1, ci1), gn)
        np.add.at(D, (slice(None), slice(None), ri0, ci0), gn)
        np.subtract.at(D, (slice(None), slice(None), ri0, ci1), gn)
        np.subtract.at(D, (slice(None), slice(None), ri1, ci0), gn)
        T = D[:, :, ::-1, ::-1].cumsum(axis=2).cumsum(axis=3)[:, :, ::-1, ::-1]
        return (np.ascontiguousarray(T[:, :, 1:, 1:]),)

    return _make(out, "local_avg_pool", (x,), bwd)


# ---------------------------------------------------------------------------
# convolution


def _conv_out_size(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def _patches(x, kh, kw, sh, sw, ho, wo):
    # read-only strided view (B, C, kh, kw, ho, wo)
    B, C, H, W = x.shape
    sb, sc, srow, scol = x.strides
    return np.lib.stride_tricks.as_strided(
        x,
        shape=(B, C, kh, kw, ho, wo),
        strides=(sb, sc, srow, scol, sh * srow, sw * scol),
        writeable=False,
    )


def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """2-d cross-correlation over BCHW input.

    weight is (C_out, C_in/groups, K, K); depth-wise convolution is
    groups == C_in with one output channel per group.
    """
    B, Cin, H, W = _shape4(x, "conv2d")
    if weight.data.ndim != 4:
        raise DimensionError(f"conv2d weight must be 4-d OIKK, got {weight.data.shape}")
    Cout, Cw, kh, kw = weight.data.shape
    stride = int(stride)
    padding = int(padding)
    groups = int(groups)
    if groups < 1 or Cin % groups or Cout % groups:
        raise DimensionError(
            f"conv2d: groups={groups} must divide in-channels {Cin} and out-channels {Cout}"
        )
    if Cw != Cin // groups:
        raise DimensionError(
            f"conv2d: weight in-channel axis {Cw} != input channels {Cin} / groups {groups}"
        )
    if bias is not None and bias.data.shape != (Cout,):
        raise DimensionError(f"conv2d: bias shape {bias.data.shape} != ({Cout},)")
    ho = _conv_out_size(H, kh, stride, padding)
    wo = _conv_out_size(W, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"conv2d: kernel ({kh},{kw}) stride {stride} pad {padding} does not fit "
            f"spatial axes ({H},{W})"
        )

    if padding:
        xp = np.zeros((B, Cin, H + 2 * padding, W + 2 * padding), dtype=x.data.dtype)
        xp[:, :, padding:-padding, padding:-padding] = x.data
    else:
        xp = x.data
    wdat = weight.data

    if groups == 1:
        if kh == 1 and kw == 1:
            cols = xp[:, :, ::stride, ::stride].reshape(B, Cin, ho * wo)
        else:
            cols = _patches(xp, kh, kw, stride, stride, ho, wo).reshape(
                B, Cin * kh * kw, ho * wo
            )
        out = (wdat.reshape(Cout, -1) @ cols).reshape(B, Cout, ho, wo)
    elif groups == Cin and Cout == Cin:
        # depth-wise: one fused multiply-add per kernel tap
        out = np.zeros((B, Cout, ho, wo), dtype=x.data.dtype)
        for ki in range(kh):
            for kj in range(kw):
                out += (
                    xp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride]
                    * wdat[:, 0, ki, kj].reshape(1, Cin, 1, 1)
                )
        cols = None
    else:
        cg, cog = Cin // groups, Cout // groups
        out = np.empty((B, Cout, ho, wo), dtype=x.data.dtype)
        cols = []
        for gi in range(groups):
            part = np.ascontiguousarray(
                _patches(
                    xp[:, gi * cg : (gi + 1) * cg], kh, kw, stride, stride, ho, wo
                ).reshape(B, cg * kh * kw, ho * wo)
            )
            cols.append(part)
            out[:, gi * cog : (gi + 1) * cog] = (
                wdat[gi * cog : (gi + 1) * cog].reshape(cog, -1) @ part
            ).reshape(B, cog, ho, wo)

    if bias is not None:
        out += bias.data.reshape(1, Cout, 1, 1)

    xp_shape = xp.shape
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        go = g.reshape(B, Cout, ho * wo)
        if groups == 1:
            gw = np.matmul(go, cols.swapaxes(1, 2)).sum(axis=0).reshape(wdat.shape)
            gcols = np.matmul(wdat.reshape(Cout, -1).T, go)
            if kh == 1 and kw == 1 and stride == 1 and not padding:
                gx = gcols.reshape(B, Cin, H, W)
                gxp = None
            else:
                gxp = np.zeros(xp_shape, dtype=g.dtype)
                _scatter_cols(gxp, gcols, Cin, kh, kw, stride, ho, wo)
        elif groups == Cin and Cout == Cin:
            gr = g.reshape(B, Cout, ho, wo)
            gw = np.empty_like(wdat)
            gxp = np.zeros(xp_shape, dtype=g.dtype)
            for ki in range(kh):
                for kj in range(kw):
                    xs = xp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride]
                    gw[:, 0, ki, kj] = np.einsum("bchw,bchw->c", gr, xs)
                    gxp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += (
                        gr * wdat[:, 0, ki, kj].reshape(1, Cin, 1, 1)
                    )
        else:
            cg, cog = Cin // groups, Cout // groups
            gw = np.empty_like(wdat)
            gxp = np.zeros(xp_shape, dtype=g.dtype)
            for gi in range(groups):
                gos = go[:, gi * cog : (gi + 1) * cog]
                gw[gi * cog : (gi + 1) * cog] = (
                    np.matmul(gos, cols[gi].swapaxes(1, 2)).sum(axis=0).reshape(cog, cg, kh, kw)
                )
                gcols = np.matmul(wdat[gi * cog : (gi + 1) * cog].reshape(cog, -1).T, gos)
                _scatter_cols(
                    gxp[:, gi * cg : (gi + 1) * cg], gcols, cg, kh, kw, stride, ho, wo
                )
        if gxp is not None:
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(out, "conv2d", inputs, bwd)


def _scatter_cols(gxp, gcols, C, kh, kw, stride, ho, wo):
    # col2im: accumulate column gradients back onto the padded input
    B = gxp.shape[0]
    gp = gcols.reshape(B, C, kh, kw, ho, wo)
    for ki in range(kh):
        for kj in range(kw):
            gxp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += gp[
                :, :, ki, kj
            ]
