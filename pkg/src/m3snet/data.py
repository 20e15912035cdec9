"""Paired-image data: degradation synthesis, dataset IO, patch sampling.

Images are CHW float32 arrays in [0,1]. The haze/rain synthesizer follows
the atmospheric scattering model: the observed image is
``H*t - A*t + A + noise`` with transmission ``t = exp(-alpha * depth)``,
airlight ``A`` and Gaussian sensor noise. Blur uses box or linear-motion
kernels as stand-ins for real camera shake.

On disk a dataset is ``<root>/input/*.png`` and ``<root>/target/*.png``
with pairs matched by filename stem; the synthesizer adds a ``spec.txt``
describing the degradation it applied.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .tensor import ConfigError

log = logging.getLogger(__name__)

DEGRADATION_KINDS = ("haze_rain", "blur", "noise_only")
DEPTH_SOURCES = ("constant", "ramp", "file")
BLUR_KINDS = ("box", "motion")


class DatasetError(ValueError):
    pass


@dataclass
class ImagePair:
    degraded: np.ndarray  # CHW float32 in [0,1]
    clean: np.ndarray
    id: str

    def __post_init__(self):
        if self.degraded.shape != self.clean.shape:
            raise DatasetError(
                f"pair {self.id!r}: degraded {self.degraded.shape} != clean {self.clean.shape}"
            )


@dataclass
class DegradationSpec:
    kind: str = "haze_rain"
    airlight: float = 0.8          # A, global atmospheric light
    alpha: float = 0.5             # scattering coefficient
    depth_source: str = "constant"
    depth_value: float = 1.0       # constant depth / ramp maximum
    depth_file: str = ""
    noise_sigma: float = 0.0
    blur_kind: str = "box"
    blur_size: int = 5
    blur_length: int = 9
    blur_angle: float = 0.0

    def __post_init__(self):
        if self.kind not in DEGRADATION_KINDS:
            raise ConfigError(f"degradation kind must be one of {DEGRADATION_KINDS}, "
                              f"got {self.kind!r}")
        if not 0.0 <= self.airlight <= 1.0:
            raise ConfigError(f"airlight must lie in [0,1], got {self.airlight}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.depth_source not in DEPTH_SOURCES:
            raise ConfigError(f"depth_source must be one of {DEPTH_SOURCES}, "
                              f"got {self.depth_source!r}")
        if self.depth_value < 0:
            raise ConfigError(f"depth_value must be >= 0, got {self.depth_value}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.blur_kind not in BLUR_KINDS:
            raise ConfigError(f"blur_kind must be one of {BLUR_KINDS}, got {self.blur_kind!r}")
        if self.blur_size < 1 or self.blur_length < 1:
            raise ConfigError("blur kernel extents must be >= 1")

    def to_dict(self):
        return {
            "kind": self.kind,
            "airlight": repr(self.airlight),
            "alpha": repr(self.alpha),
            "depth_source": self.depth_source,
            "depth_value": repr(self.depth_value),
            "depth_file": self.depth_file,
            "noise_sigma": repr(self.noise_sigma),
            "blur_kind": self.blur_kind,
            "blur_size": str(self.blur_size),
            "blur_length": str(self.blur_length),
            "blur_angle": repr(self.blur_angle),
        }


def depth_map(spec, height, width):
    """Per-pixel scene depth used by the transmission map."""
    if spec.depth_source == "constant":
        return np.full((height, width), spec.depth_value, dtype=np.float64)
    if spec.depth_source == "ramp":
        ramp = np.linspace(0.0, spec.depth_value, height, dtype=np.float64)
        return np.broadcast_to(ramp[:, None], (height, width)).copy()
    arr = np.asarray(np.load(spec.depth_file) if spec.depth_file.endswith(".npy")
                     else load_image(spec.depth_file).mean(axis=0), dtype=np.float64)
    if arr.shape != (height, width):
        raise ConfigError(f"depth map {spec.depth_file} has shape {arr.shape}, "
                          f"image is ({height},{width})")
    return arr


def blur_kernel(spec):
    if spec.blur_kind == "box":
        k = np.ones((spec.blur_size, spec.blur_size), dtype=np.float64)
    else:
        # rasterize a centered line of the given length and angle
        n = spec.blur_length
        k = np.zeros((n, n), dtype=np.float64)
        c = (n - 1) / 2.0
        theta = np.deg2rad(spec.blur_angle)
        for step in np.linspace(-c, c, 4 * n):
            r = int(round(c + step * np.sin(theta)))
            q = int(round(c + step * np.cos(theta)))
            k[r, q] = 1.0
    return k / k.sum()


def degrade(clean, spec, rng=None):
    """Apply the configured degradation to a clean CHW image in [0,1]."""
    clean = np.asarray(clean, dtype=np.float64)
    _, h, w = clean.shape
    if spec.kind == "haze_rain":
        t = np.exp(-spec.alpha * depth_map(spec, h, w))[None]
        out = clean * t - spec.airlight * t + spec.airlight
    elif spec.kind == "blur":
        k = blur_kernel(spec)
        out = np.stack([ndimage.convolve(ch, k, mode="reflect") for ch in clean])
    else:
        out = clean.copy()
    if spec.noise_sigma > 0:
        if rng is None:
            raise ConfigError("noise_sigma > 0 requires an rng")
        out = out + rng.normal(0.0, spec.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def degrade_pair(clean, spec, rng=None, pair_id="synthetic"):
    return ImagePair(degrade(clean, spec, rng=rng), np.asarray(clean, np.float32), pair_id)


# ---------------------------------------------------------------------------
# sampling / augmentation


def sample_patch(pair, size=256, rng=None):
    """Random aligned crop of both images; reflect-pads smaller sources."""
    rng = np.random.default_rng() if rng is None else rng
    deg, clean = pair.degraded, pair.clean
    _, h, w = deg.shape
    if h < size or w < size:
        ph, pw = max(0, size - h), max(0, size - w)
        pad = ((0, 0), (0, ph), (0, pw))
        deg = np.pad(deg, pad, mode="reflect")
        clean = np.pad(clean, pad, mode="reflect")
        _, h, w = deg.shape
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return ImagePair(
        np.ascontiguousarray(deg[:, top:top + size, left:left + size]),
        np.ascontiguousarray(clean[:, top:top + size, left:left + size]),
        pair.id,
    )


def augment(pair, rng):
    """Horizontal/vertical flips, drawn independently, applied to both."""
    flip_h = bool(rng.integers(0, 2))
    flip_v = bool(rng.integers(0, 2))
    return flip(pair, flip_h, flip_v)


def flip(pair, horizontal, vertical):
    deg, clean = pair.degraded, pair.clean
    if horizontal:
        deg, clean = deg[:, :, ::-1], clean[:, :, ::-1]
    if vertical:
        deg, clean = deg[:, ::-1, :], clean[:, ::-1, :]
    return ImagePair(np.ascontiguousarray(deg), np.ascontiguousarray(clean), pair.id)


# ---------------------------------------------------------------------------
# disk IO


def load_image(path):
    """8-bit PNG -> CHW float32 in [0,1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_image(path, img_chw):
    arr = np.clip(np.asarray(img_chw, dtype=np.float64), 0.0, 1.0)
    data = np.rint(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def load_dataset(root):
    """Yield pairs matched by filename stem, in sorted stem order.

    Orphans on either side are skipped with a warning; a dataset with no
    matched pairs is an error.
    """
    root = Path(root)
    in_dir, tgt_dir = root / "input", root / "target"
    if not in_dir.is_dir() or not tgt_dir.is_dir():
        raise DatasetError(f"{root} must contain input/ and target/ directories")
    inputs = {p.stem: p for p in sorted(in_dir.glob("*.png"))}
    targets = {p.stem: p for p in sorted(tgt_dir.glob("*.png"))}
    for stem in sorted(set(inputs) ^ set(targets)):
        side = "target" if stem in inputs else "input"
        log.warning("skipping %r: no matching %s image", stem, side)
    stems = sorted(set(inputs) & set(targets))
    if not stems:
        raise DatasetError(f"{root}: no matched input/target pairs")
    for stem in stems:
        yield ImagePair(load_image(inputs[stem]), load_image(targets[stem]), stem)


def save_dataset(root, pairs, spec=None):
    root = Path(root)
    (root / "input").mkdir(parents=True, exist_ok=True)
    (root / "target").mkdir(parents=True, exist_ok=True)
    for pair in pairs:
        save_image(root / "input" / f"{pair.id}.png", pair.degraded)
        save_image(root / "target" / f"{pair.id}.png", pair.clean)
    if spec is not None:
        lines = [f"{k}={v}" for k, v in spec.to_dict().items()]
        (root / "spec.txt").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# synthetic clean images (desk-scale stand-ins for photographic content)


def synthesize_clean(rng, size=128):
    """Structured random image: smooth field plus geometric detail."""
    img = np.empty((3, size, size), dtype=np.float64)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    for c in range(3):
        low = rng.normal(0.0, 1.0, (6, 6))
        field = ndimage.zoom(low, size / 6.0, order=3)[:size, :size]
        grad = rng.normal(0.0, 0.4) * xx + rng.normal(0.0, 0.4) * yy
        img[c] = field + grad
    for _ in range(int(rng.integers(3, 7))):
        h = int(rng.integers(size // 8, size // 2))
        w = int(rng.integers(size // 8, size // 2))
        top = int(rng.integers(0, size - h + 1))
        left = int(rng.integers(0, size - w + 1))
        img[:, top:top + h, left:left + w] += rng.normal(0.0, 0.5, size=(3, 1, 1))
    lo, hi = img.min(), img.max()
    img = 0.05 + 0.9 * (img - lo) / max(hi - lo, 1e-9)
    return img.astype(np.float32)


def synthesize_dataset(count, size, spec, seed):
    """Deterministic set of degraded/clean pairs from the synthesizer."""
    pairs = []
    for idx in range(count):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(idx,)))
        clean = synthesize_clean(rng, size=size)
        pairs.append(degrade_pair(clean, spec, rng=rng, pair_id=f"{idx:04d}"))
    return pairs
