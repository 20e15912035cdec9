"""The mountain-shaped restoration network.

A four-level encoder/decoder pyramid with three add-ons over the plain
U-Net baseline:

* a feature-fusion lattice between encoder and decoder that cascades
  upsampled coarse features into every finer level, down to full
  resolution;
* a global multi-head attention block bridging the encoder and decoder
  at the bottleneck (one more halving below the fourth level, where the
  token count is small enough for quadratic attention);
* a residual head whose final convolution starts at zero, so a freshly
  built model is exactly the identity map.

Level shape law: at level i (1-based), features have width*2^(i-1)
channels at 1/2^(i-1) of the input resolution; the bottleneck below the
last level has width*2^levels channels.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .blocks import Conv2d, Downsample, MultiHeadAttention, NAFBlock, Upsample
from .tensor import ConfigError, DimensionError, Tensor

ABLATIONS = ("baseline", "ffm", "mhamb", "full")


@dataclass
class ModelConfig:
    width: int = 32
    levels: int = 4
    enc_blocks: tuple = (1, 1, 1, 28)
    dec_blocks: tuple = (1, 1, 1, 1)
    ffm_blocks: tuple = (2, 2, 1, 0)
    heads: int = 8
    ablation: str = "full"
    tlc_window: int = 256

    def __post_init__(self):
        self.enc_blocks = tuple(int(n) for n in self.enc_blocks)
        self.dec_blocks = tuple(int(n) for n in self.dec_blocks)
        self.ffm_blocks = tuple(int(n) for n in self.ffm_blocks)
        if self.width < 2 or self.width % 2:
            raise ConfigError(f"width must be even and >= 2, got {self.width}")
        if self.levels < 2:
            raise ConfigError(f"levels must be >= 2, got {self.levels}")
        for name, blocks in (("enc_blocks", self.enc_blocks),
                             ("dec_blocks", self.dec_blocks),
                             ("ffm_blocks", self.ffm_blocks)):
            if len(blocks) != self.levels:
                raise ConfigError(f"{name} must have {self.levels} entries, got {blocks}")
            if any(n < 0 for n in blocks):
                raise ConfigError(f"{name} entries must be >= 0, got {blocks}")
        if any(n < 1 for n in self.enc_blocks) or any(n < 1 for n in self.dec_blocks):
            raise ConfigError("encoder/decoder levels need at least one block each")
        if self.ffm_blocks[-1] != 0:
            raise ConfigError("the deepest level cannot host fusion units "
                              f"(ffm_blocks={self.ffm_blocks})")
        for i in range(self.levels - 1):
            if self.ffm_blocks[i] < self.ffm_blocks[i + 1]:
                raise ConfigError(f"ffm_blocks must be non-increasing, got {self.ffm_blocks}")
            if self.ffm_blocks[i + 1] < self.ffm_blocks[i] - 1:
                raise ConfigError(
                    f"fusion unit ({self.ffm_blocks[i]},{i + 1}) has no source above it "
                    f"(ffm_blocks={self.ffm_blocks})"
                )
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.bridge_channels % self.heads:
            raise ConfigError(
                f"heads={self.heads} must divide bridge channels {self.bridge_channels}"
            )
        if self.tlc_window is not None and self.tlc_window < 1:
            raise ConfigError(f"tlc_window must be >= 1, got {self.tlc_window}")

    @property
    def bridge_channels(self):
        return self.width << self.levels

    @property
    def use_ffm(self):
        return self.ablation in ("ffm", "full")

    @property
    def use_attention(self):
        return self.ablation in ("mhamb", "full")

    @property
    def effective_ffm(self):
        return self.ffm_blocks if self.use_ffm else (0,) * self.levels

    @property
    def pad_multiple(self):
        return 1 << self.levels

    def channels(self, level):
        """Channel count at 0-based pyramid level (levels == bridge)."""
        return self.width << level

    def to_dict(self):
        return {
            "width": str(self.width),
            "levels": str(self.levels),
            "enc_blocks": ",".join(map(str, self.enc_blocks)),
            "dec_blocks": ",".join(map(str, self.dec_blocks)),
            "ffm_blocks": ",".join(map(str, self.ffm_blocks)),
            "heads": str(self.heads),
            "ablation": self.ablation,
            "tlc_window": str(self.tlc_window),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            width=int(d["width"]),
            levels=int(d["levels"]),
            enc_blocks=tuple(int(v) for v in d["enc_blocks"].split(",")),
            dec_blocks=tuple(int(v) for v in d["dec_blocks"].split(",")),
            ffm_blocks=tuple(int(v) for v in d["ffm_blocks"].split(",")),
            heads=int(d["heads"]),
            ablation=d["ablation"],
            tlc_window=int(d["tlc_window"]),
        )


def ffm_units(config):
    """Unrolled fusion lattice schedule: (s, level) pairs in compute order.

    Unit (1, i) fuses the level-i encoder output with the upsampled
    level-(i+1) output; unit (s, i) for s > 1 fuses unit (s-1, i) with the
    upsampled unit (s-1, i+1). Levels are 0-based here.
    """
    units = []
    max_s = max(config.effective_ffm, default=0)
    for s in range(1, max_s + 1):
        for i in range(config.levels - 1, -1, -1):
            if config.effective_ffm[i] >= s:
                units.append((s, i))
    return units


class M3SNet:
    """Assembled network: parameter container plus the forward graph."""

    def __init__(self, config, rng=None, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        c = config
        self.intro = Conv2d(3, c.width, 3, rng=rng, dtype=dtype)
        self.encoders = []
        self.downs = []
        for i in range(c.levels):
            ch = c.channels(i)
            self.encoders.append([NAFBlock(ch, rng=rng, dtype=dtype)
                                  for _ in range(c.enc_blocks[i])])
            self.downs.append(Downsample(ch, rng=rng, dtype=dtype))
        self.bridge = (MultiHeadAttention(c.bridge_channels, c.heads, rng=rng, dtype=dtype)
                       if c.use_attention else None)
        self.fusion = OrderedDict()
        for s, i in ffm_units(c):
            self.fusion[(s, i)] = {
                "up": Upsample(c.channels(i + 1), rng=rng, dtype=dtype),
                "block": NAFBlock(c.channels(i), rng=rng, dtype=dtype),
            }
        self.ups = []
        self.decoders = []
        for i in range(c.levels):
            self.ups.append(Upsample(c.channels(i + 1), rng=rng, dtype=dtype))
            self.decoders.append([NAFBlock(c.channels(i), rng=rng, dtype=dtype)
                                  for _ in range(c.dec_blocks[i])])
        self.output = Conv2d(c.width, 3, 3, zero_init=True, dtype=dtype)

    # ----- forward pieces -------------------------------------------------

    def encode(self, x, tlc_window=None):
        """Shallow conv then the encoder pyramid.

        Returns (per-level features before downsampling, bottleneck input).
        """
        h = self.intro(x)
        feats = []
        for i in range(self.config.levels):
            for blk in self.encoders[i]:
                h = blk(h, tlc_window=tlc_window)
            feats.append(h)
            h = self.downs[i](h)
        return feats, h

    def fuse(self, feats, tlc_window=None):
        """Run the fusion lattice; returns the per-level decoder skips."""
        c = self.config
        lattice = {}
        for (s, i), unit in self.fusion.items():
            if s == 1:
                above = feats[i + 1]
                here = feats[i]
            else:
                above = lattice[(s - 1, i + 1)]
                here = lattice[(s - 1, i)]
            lattice[(s, i)] = unit["block"](T.add(here, unit["up"](above)),
                                            tlc_window=tlc_window)
        skips = []
        for i in range(c.levels):
            n = c.effective_ffm[i]
            skips.append(lattice[(n, i)] if n > 0 else feats[i])
        return skips

    def decode(self, skips, bottleneck, tlc_window=None):
        h = bottleneck
        for i in range(self.config.levels - 1, -1, -1):
            h = T.add(self.ups[i](h), skips[i])
            for blk in self.decoders[i]:
                h = blk(h, tlc_window=tlc_window)
        return h

    def forward(self, x, tlc_window=None, pad=False):
        """Restore a batch of images; output = input + predicted residual.

        Spatial extents must be divisible by the pyramid depth's padding
        multiple unless ``pad`` is set, in which case the input is
        reflect-padded and the output cropped back.
        """
        if x.shape[1] != 3:
            raise DimensionError(f"expected 3 input channels, got {x.shape[1]} "
                                 f"(shape {x.shape})")
        _, _, h0, w0 = x.shape
        m = self.config.pad_multiple
        padded = False
        if h0 % m or w0 % m:
            if not pad:
                raise DimensionError(
                    f"spatial axes ({h0},{w0}) not divisible by {m}; pass pad=True"
                )
            x = T.reflect_pad2d(x, (0, -h0 % m, 0, -w0 % m))
            padded = True
        feats, bottom = self.encode(x, tlc_window=tlc_window)
        if self.bridge is not None:
            bottom = self.bridge(bottom)
        skips = self.fuse(feats, tlc_window=tlc_window)
        deep = self.decode(skips, bottom, tlc_window=tlc_window)
        out = T.add(x, self.output(deep))
        if padded:
            out = T.crop2d(out, h0, w0)
        return out

    def __call__(self, x, tlc_window=None, pad=False):
        return self.forward(x, tlc_window=tlc_window, pad=pad)

    def restore(self, images, tlc_window=None):
        """Inference on a numpy batch (no graph); returns a numpy batch."""
        with T.no_grad():
            out = self.forward(Tensor(np.asarray(images, dtype=self.dtype)),
                               tlc_window=tlc_window, pad=True)
        return out.data

    # ----- parameters -----------------------------------------------------

    def named_params(self):
        params = OrderedDict()

        def take(pairs):
            for name, p in pairs:
                params[name] = p

        take(self.intro.named_params("intro"))
        for i in range(self.config.levels):
            for j, blk in enumerate(self.encoders[i]):
                take(blk.named_params(f"enc.{i}.{j}"))
            take(self.downs[i].named_params(f"down.{i}"))
        if self.bridge is not None:
            take(self.bridge.named_params("bridge"))
        for (s, i), unit in self.fusion.items():
            take(unit["up"].named_params(f"ffm.{s}.{i}.up"))
            take(unit["block"].named_params(f"ffm.{s}.{i}.block"))
        for i in range(self.config.levels):
            take(self.ups[i].named_params(f"up.{i}"))
            for j, blk in enumerate(self.decoders[i]):
                take(blk.named_params(f"dec.{i}.{j}"))
        take(self.output.named_params("output"))
        return params

    def param_count(self):
        return sum(p.size for p in self.named_params().values())

    def load_state(self, tensors):
        params = self.named_params()
        missing = set(params) - set(tensors)
        extra = set(tensors) - set(params)
        if missing or extra:
            raise ConfigError(
                f"state does not match model: missing={sorted(missing)[:4]} "
                f"extra={sorted(extra)[:4]}"
            )
        for name, p in params.items():
            arr = np.asarray(tensors[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise DimensionError(
                    f"parameter {name}: checkpoint shape {arr.shape} != model {p.data.shape}"
                )
            p.data = arr.copy()


# ---------------------------------------------------------------------------
# cost accounting


def _conv_params(cin, cout, k, groups=1, bias=True):
    return cout * (cin // groups) * k * k + (cout if bias else 0)


def _naf_params(c):
    return (4 * c                               # two layer norms
            + _conv_params(c, 2 * c, 1)         # expand 1
            + _conv_params(2 * c, 2 * c, 3, groups=2 * c)
            + _conv_params(c, c, 1)             # channel attention conv
            + _conv_params(c, c, 1)             # project 1
            + _conv_params(c, 2 * c, 1)         # expand 2
            + _conv_params(c, c, 1))            # project 2


def count_params(config):
    """Exact learnable-parameter total for a configuration."""
    c = config
    total = _conv_params(3, c.width, 3)
    for i in range(c.levels):
        ch = c.channels(i)
        total += c.enc_blocks[i] * _naf_params(ch)
        total += _conv_params(ch, 2 * ch, 2)
    if c.use_attention:
        cb = c.bridge_channels
        total += 3 * (_conv_params(cb, cb, 1) + _conv_params(cb, cb, 3, groups=cb))
        total += _conv_params(cb, cb, 1) + c.heads
    for s, i in ffm_units(c):
        ch_up = c.channels(i + 1)
        total += _conv_params(ch_up, 2 * ch_up, 1) + _naf_params(c.channels(i))
    for i in range(c.levels):
        ch_up = c.channels(i + 1)
        total += _conv_params(ch_up, 2 * ch_up, 1)
        total += c.dec_blocks[i] * _naf_params(c.channels(i))
    total += _conv_params(c.width, 3, 3)
    return total


def _conv_macs(cin, cout, k, hout, wout, groups=1):
    return k * k * cin * cout * hout * wout // groups


def _naf_macs(c, h, w):
    # channel-attention conv runs on the pooled 1x1 map (global pooling);
    # gates, rescales, norms and residual adds are not multiply-accumulates
    return (_conv_macs(c, 2 * c, 1, h, w)
            + _conv_macs(2 * c, 2 * c, 3, h, w, groups=2 * c)
            + _conv_macs(c, c, 1, 1, 1)
            + _conv_macs(c, c, 1, h, w)
            + _conv_macs(c, 2 * c, 1, h, w)
            + _conv_macs(c, c, 1, h, w))


def estimate_macs(config, height, width, ops_per_mac=2):
    """Forward cost at the given input size, batch 1.

    Sums K^2*Cin*Cout*Hout*Wout/groups over every convolution plus the
    two quadratic attention products at the bottleneck. Elementwise
    gates/rescales and normalizations are omitted as negligible.
    ``ops_per_mac=2`` counts multiply and accumulate as separate
    operations, the convention behind the published complexity figures
    for this architecture family; pass 1 for raw multiply-accumulates.
    """
    c = config
    m = c.pad_multiple
    if height % m or width % m:
        raise ConfigError(f"input size ({height},{width}) must be divisible by {m}")
    total = _conv_macs(3, c.width, 3, height, width)
    for i in range(c.levels):
        ch, h, w = c.channels(i), height >> i, width >> i
        total += c.enc_blocks[i] * _naf_macs(ch, h, w)
        total += _conv_macs(ch, 2 * ch, 2, h // 2, w // 2)
    if c.use_attention:
        cb = c.bridge_channels
        hb, wb = height >> c.levels, width >> c.levels
        n = hb * wb
        total += 3 * (_conv_macs(cb, cb, 1, hb, wb)
                      + _conv_macs(cb, cb, 3, hb, wb, groups=cb))
        total += _conv_macs(cb, cb, 1, hb, wb)
        total += 2 * n * n * cb  # q.k' and attn.v batched products
    for s, i in ffm_units(c):
        ch_up = c.channels(i + 1)
        total += _conv_macs(ch_up, 2 * ch_up, 1, height >> (i + 1), width >> (i + 1))
        total += _naf_macs(c.channels(i), height >> i, width >> i)
    for i in range(c.levels):
        ch_up = c.channels(i + 1)
        total += _conv_macs(ch_up, 2 * ch_up, 1, height >> (i + 1), width >> (i + 1))
        total += c.dec_blocks[i] * _naf_macs(c.channels(i), height >> i, width >> i)
    total += _conv_macs(c.width, 3, 3, height, width)
    return total * ops_per_mac
