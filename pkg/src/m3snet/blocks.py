"""Reusable network blocks: SimpleGate, simplified channel attention,
the activation-free residual block, and the resampling units.

Every block is a pure function of (input, parameters); parameters are
plain Tensors registered through ``named_params`` so the trainer and the
checkpoint writer see one flat name -> Tensor map.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ConfigError, DimensionError, Tensor


class Conv2d:
    """Convolution parameter holder.

    Weights draw from U(-b, b) with b = 1/sqrt(fan_in); biases start at
    zero. ``zero_init`` zeroes the weight too (used by the output head so
    the whole network starts as the identity map).
    """

    def __init__(self, cin, cout, kernel, stride=1, padding=None, groups=1,
                 bias=True, zero_init=False, rng=None, dtype=np.float32):
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.groups = groups
        shape = (cout, cin // groups, kernel, kernel)
        if zero_init or rng is None:
            w = np.zeros(shape, dtype=dtype)
        else:
            bound = 1.0 / np.sqrt((cin // groups) * kernel * kernel)
            w = rng.uniform(-bound, bound, size=shape).astype(dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding, groups=self.groups)

    def named_params(self, prefix):
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias


class LayerNorm:
    """Per-pixel channel normalization with learnable gain/offset."""

    def __init__(self, channels, eps=1e-6, dtype=np.float32):
        self.eps = eps
        self.gain = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.offset = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return T.layer_norm_channel(x, self.gain, self.offset, eps=self.eps)

    def named_params(self, prefix):
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.offset", self.offset


def simple_gate(x):
    """Split channels in half and multiply the halves elementwise."""
    a, b = T.split_channels_half(x)
    return T.mul(a, b)


class SCA:
    """Simplified channel attention: pooled statistics -> 1x1 conv -> rescale.

    Pooling is the global spatial mean by default; passing ``tlc_window``
    switches to a local mean over that window (the test-time local
    converter used when full images are larger than the training patches).
    """

    def __init__(self, channels, rng=None, dtype=np.float32):
        self.conv = Conv2d(channels, channels, 1, rng=rng, dtype=dtype)

    def __call__(self, x, tlc_window=None):
        if tlc_window is None:
            pooled = T.adaptive_avg_pool_to_1(x)
        else:
            if tlc_window < 1:
                raise ConfigError(f"tlc_window must be >= 1, got {tlc_window}")
            pooled = T.local_avg_pool(x, tlc_window)
        return T.mul(x, self.conv(pooled))

    def named_params(self, prefix):
        yield from self.conv.named_params(f"{prefix}.conv")


class NAFBlock:
    """Activation-free residual block.

    Two residual branches: (norm -> 1x1 expand -> 3x3 depth-wise -> gate
    -> channel attention -> 1x1 project) and (norm -> 1x1 expand -> gate
    -> 1x1 project). No nonlinear activations anywhere; gating does the
    mixing.
    """

    def __init__(self, channels, rng=None, dtype=np.float32):
        c = channels
        self.ln1 = LayerNorm(c, dtype=dtype)
        self.expand1 = Conv2d(c, 2 * c, 1, rng=rng, dtype=dtype)
        self.dw = Conv2d(2 * c, 2 * c, 3, groups=2 * c, rng=rng, dtype=dtype)
        self.sca = SCA(c, rng=rng, dtype=dtype)
        self.project1 = Conv2d(c, c, 1, rng=rng, dtype=dtype)
        self.ln2 = LayerNorm(c, dtype=dtype)
        self.expand2 = Conv2d(c, 2 * c, 1, rng=rng, dtype=dtype)
        self.project2 = Conv2d(c, c, 1, rng=rng, dtype=dtype)
        self.channels = c

    def __call__(self, x, tlc_window=None):
        if x.shape[1] != self.channels:
            raise DimensionError(
                f"naf_block built for {self.channels} channels, input has {x.shape[1]}"
            )
        h = self.dw(self.expand1(self.ln1(x)))
        h = self.sca(simple_gate(h), tlc_window=tlc_window)
        x1 = T.add(x, self.project1(h))
        h2 = simple_gate(self.expand2(self.ln2(x1)))
        return T.add(x1, self.project2(h2))

    def named_params(self, prefix):
        for name, sub in (("ln1", self.ln1), ("expand1", self.expand1),
                          ("dw", self.dw), ("sca", self.sca),
                          ("project1", self.project1), ("ln2", self.ln2),
                          ("expand2", self.expand2), ("project2", self.project2)):
            yield from sub.named_params(f"{prefix}.{name}")


class Downsample:
    """Halve spatial extent, double channels: 2x2 stride-2 convolution."""

    def __init__(self, channels, rng=None, dtype=np.float32):
        self.conv = Conv2d(channels, 2 * channels, 2, stride=2, padding=0,
                           rng=rng, dtype=dtype)
        self.channels = channels

    def __call__(self, x):
        _, _, h, w = x.shape
        if h % 2 or w % 2:
            raise DimensionError(f"downsample needs even spatial axes, got ({h},{w})")
        return self.conv(x)

    def named_params(self, prefix):
        yield from self.conv.named_params(f"{prefix}.conv")


class Upsample:
    """Double spatial extent, halve channels: 1x1 conv then pixel shuffle.

    Chosen over a transposed convolution to avoid checkerboard artifacts.
    """

    def __init__(self, channels, rng=None, dtype=np.float32):
        if channels % 2:
            raise DimensionError(f"upsample needs an even channel count, got {channels}")
        self.conv = Conv2d(channels, 2 * channels, 1, rng=rng, dtype=dtype)
        self.channels = channels

    def __call__(self, x):
        return T.pixel_shuffle(self.conv(x), 2)

    def named_params(self, prefix):
        yield from self.conv.named_params(f"{prefix}.conv")


class MultiHeadAttention:
    """Global spatial self-attention over a BCHW feature map, residual.

    Queries/keys/values each come from a 1x1 conv followed by a 3x3
    depth-wise conv. Attention runs per head over all spatial tokens with
    a learnable positive temperature (one per head, softplus-parameterized,
    initialized to sqrt(head_dim)). The attended map passes through a 1x1
    conv and is added back onto the input.
    """

    def __init__(self, channels, heads, rng=None, dtype=np.float32):
        if channels % heads:
            raise ConfigError(f"heads={heads} must divide channels={channels}")
        self.channels = channels
        self.heads = heads
        self.q = _QKVProj(channels, rng, dtype)
        self.k = _QKVProj(channels, rng, dtype)
        self.v = _QKVProj(channels, rng, dtype)
        self.out = Conv2d(channels, channels, 1, rng=rng, dtype=dtype)
        rho0 = T.softplus_inverse(np.sqrt(channels / heads))
        self.temperature_raw = Tensor(np.full(heads, rho0, dtype=dtype), requires_grad=True)

    def attend(self, x):
        q, k, v = self.q(x), self.k(x), self.v(x)
        beta = T.softplus(self.temperature_raw)
        attended = multi_head_attention(q, k, v, beta, self.heads)
        return self.out(attended)

    def __call__(self, x):
        return T.add(x, self.attend(x))

    def named_params(self, prefix):
        yield from self.q.named_params(f"{prefix}.q")
        yield from self.k.named_params(f"{prefix}.k")
        yield from self.v.named_params(f"{prefix}.v")
        yield from self.out.named_params(f"{prefix}.out")
        yield f"{prefix}.temperature_raw", self.temperature_raw


class _QKVProj:
    def __init__(self, channels, rng, dtype):
        self.point = Conv2d(channels, channels, 1, rng=rng, dtype=dtype)
        self.depth = Conv2d(channels, channels, 3, groups=channels, rng=rng, dtype=dtype)

    def __call__(self, x):
        return self.depth(self.point(x))

    def named_params(self, prefix):
        yield from self.point.named_params(f"{prefix}.point")
        yield from self.depth.named_params(f"{prefix}.depth")


def multi_head_attention(q, k, v, beta, heads):
    """Scaled dot-product attention over spatial tokens of BCHW maps.

    beta is a per-head positive temperature dividing the q.k scores. Rows
    of the attention matrix are softmax-normalized, so a constant value
    map passes through unchanged.
    """
    B, C, H, W = q.shape
    if C % heads:
        raise ConfigError(f"heads={heads} must divide channels={C}")
    d = C // heads
    n = H * W

    def tokens(t):
        # BCHW -> (B, heads, tokens, head_dim)
        return T.transpose(T.reshape(t, (B, heads, d, n)), (0, 1, 3, 2))

    qh, kh, vh = tokens(q), tokens(k), tokens(v)
    inv_beta = T.reshape(T.reciprocal(beta), (1, heads, 1, 1))
    scores = T.mul(T.matmul_batched(qh, T.transpose(kh, (0, 1, 3, 2))), inv_beta)
    attn = T.softmax_lastdim(scores)
    mixed = T.matmul_batched(attn, vh)  # (B, heads, n, d)
    return T.reshape(T.transpose(mixed, (0, 1, 3, 2)), (B, C, H, W))
