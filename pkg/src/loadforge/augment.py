"""Seeded image augmentation operators, chains and the FEW/EXTENSIVE presets.

Images are ``numpy`` arrays of shape (height, width, channels), uint8 or
float32.  Every random operator draws a fixed number of values from the
:class:`~loadforge.sample_store.SampleRng` it is handed, whatever values come
out, so a chain's output is a pure function of (image, chain, seed).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import InvalidArgument, LoadForgeError
from .sample_store import SampleRng, sample_seed

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
_F255 = np.float32(255.0)
_LUMA = (0.299, 0.587, 0.114)


def _check_image(img) -> np.ndarray:
    if not isinstance(img, np.ndarray) or img.ndim != 3:
        raise InvalidArgument("expected an HxWxC numpy array")
    if img.dtype not in (np.uint8, np.float32):
        raise InvalidArgument(f"unsupported image dtype {img.dtype}")
    if img.size == 0:
        raise InvalidArgument("image is empty")
    return img


# -- deterministic operators ----------------------------------------------------

@lru_cache(maxsize=256)
def _axis_taps(src: int, dst: int):
    coord = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    coord = np.clip(coord, 0.0, src - 1)
    lo = np.floor(coord).astype(np.intp)
    hi = np.minimum(lo + 1, src - 1)
    frac = (coord - lo).astype(np.float32)
    return lo, hi, frac, np.float32(1.0) - frac


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers; returns float32, unrounded."""
    img = _check_image(img)
    if out_h < 1 or out_w < 1:
        raise InvalidArgument(f"resize target {out_h}x{out_w} must be positive")
    h, w, _ = img.shape
    if (h, w) == (out_h, out_w):
        # identity taps: every weight is exactly 0 or 1
        return img.astype(np.float32)
    src = img.astype(np.float32, copy=False)
    y0, y1, fy, gy = _axis_taps(h, out_h)
    x0, x1, fx, gx = _axis_taps(w, out_w)
    rows = src[y0] * gy[:, None, None] + src[y1] * fy[:, None, None]
    out = rows[:, x0] * gx[None, :, None] + rows[:, x1] * fx[None, :, None]
    return np.ascontiguousarray(out, dtype=np.float32)


def short_side_shape(height: int, width: int, target: int) -> tuple[int, int]:
    short = min(height, width)
    # round half up, in exact integer arithmetic
    scale = lambda side: (2 * side * target + short) // (2 * short)  # noqa: E731
    if height <= width:
        return target, scale(width)
    return scale(height), target


def resize_short_side(img: np.ndarray, target: int) -> np.ndarray:
    if target < 1:
        raise InvalidArgument("short-side target must be >= 1")
    img = _check_image(img)
    out_h, out_w = short_side_shape(img.shape[0], img.shape[1], target)
    return resize_bilinear(img, out_h, out_w)


def hflip(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[:, ::-1])


def normalize(img: np.ndarray, mean, std) -> np.ndarray:
    """``(x / 255 - mean) / std`` per channel, evaluated in float32."""
    img = _check_image(img)
    return _normalize_window(img, *_mean_std(mean, std))


def _mean_std(mean, std) -> tuple[tuple, tuple]:
    """Validated float32 constants as hashable tuples."""
    mean = np.asarray(mean, dtype=np.float32)
    std = np.asarray(std, dtype=np.float32)
    if np.any(std == 0):
        raise InvalidArgument("normalization std must be non-zero")
    return tuple(mean.ravel().tolist()), tuple(std.ravel().tolist())


@lru_cache(maxsize=64)
def _tiled(shape: tuple, mean: tuple, std: tuple):
    # full-size constants keep numpy's inner loops long; a (3,) operand
    # broadcast over HxWx3 runs several times slower for the same result
    tiles = []
    for values in (mean, std):
        arr = np.asarray(values, dtype=np.float32)
        arr = arr if len(values) > 1 else arr.reshape(())
        tile = np.ascontiguousarray(np.broadcast_to(arr, shape))
        tile.flags.writeable = False
        tiles.append(tile)
    return tiles


def _normalize_window(window: np.ndarray, mean: tuple, std: tuple) -> np.ndarray:
    shape = np.broadcast_shapes(window.shape, (len(mean),), (len(std),))
    m, s = _tiled(shape, mean, std)
    out = np.empty(shape, dtype=np.float32)
    np.divide(window, _F255, out=out, dtype=np.float32)
    np.subtract(out, m, out=out)
    np.divide(out, s, out=out)
    return out


# -- random operators -----------------------------------------------------------

def _crop_origin(img, rng: SampleRng, out_h: int, out_w: int) -> tuple[int, int]:
    h, w = img.shape[:2]
    out_h, out_w = int(out_h), int(out_w)
    if not (1 <= out_h <= h and 1 <= out_w <= w):
        raise InvalidArgument(f"cannot crop {out_h}x{out_w} from a {h}x{w} image")
    top = rng.next_u64() % (h - out_h + 1)
    left = rng.next_u64() % (w - out_w + 1)
    return top, left


def random_crop(img: np.ndarray, rng: SampleRng, out_h: int, out_w: int) -> np.ndarray:
    img = _check_image(img)
    top, left = _crop_origin(img, rng, out_h, out_w)
    return img[top:top + out_h, left:left + out_w].copy()


def random_hflip(img: np.ndarray, rng: SampleRng, p: float) -> np.ndarray:
    if not 0.0 <= p <= 1.0:
        raise InvalidArgument(f"flip probability {p} outside [0, 1]")
    if rng.next_unit() < p:
        return hflip(img)
    return img


def jitter_factors(rng: SampleRng, brightness: float, contrast: float, saturation: float):
    factors = []
    for strength in (brightness, contrast, saturation):
        if strength < 0:
            raise InvalidArgument("jitter strengths must be >= 0")
        lo, hi = max(0.0, 1.0 - strength), 1.0 + strength
        factors.append(lo + rng.next_unit() * (hi - lo))
    return tuple(factors)


def _luma(img: np.ndarray) -> np.ndarray:
    # float64 then rounded, so a gray pixel's luma is exactly its value
    r, g, b = (img[..., c].astype(np.float64) for c in range(3))
    return (_LUMA[0] * r + _LUMA[1] * g + _LUMA[2] * b).astype(np.float32)


def apply_jitter(img: np.ndarray, f_b: float, f_c: float, f_s: float) -> np.ndarray:
    """Brightness, contrast, saturation with fixed factors, in that order.

    A factor of exactly 1 leaves the image untouched.
    """
    img = _check_image(img)
    if img.shape[2] != 3:
        raise InvalidArgument("color jitter needs an RGB image")
    out = img.astype(np.float32)
    if f_b != 1.0:
        out = out * np.float32(f_b)
    if f_c != 1.0:
        mean_gray = np.float32(_luma(out).mean(dtype=np.float64))
        out = mean_gray + (out - mean_gray) * np.float32(f_c)
    if f_s != 1.0:
        gray = _luma(out)[..., None]
        out = gray + (out - gray) * np.float32(f_s)
    return out


def color_jitter(img, rng: SampleRng, brightness: float, contrast: float, saturation: float):
    img = _check_image(img)
    if img.dtype != np.float32:
        raise InvalidArgument("color jitter expects a float32 image")
    return apply_jitter(img, *jitter_factors(rng, brightness, contrast, saturation))


def fused_crop_normalize(img, rng: SampleRng, out_h: int, out_w: int, mean, std) -> np.ndarray:
    """Crop and normalize straight from the source window into one buffer.

    Bitwise equal to ``normalize(random_crop(img, rng, ...), mean, std)`` and
    consumes the same two draws, but never materializes the cropped copy.
    """
    img = _check_image(img)
    mean, std = _mean_std(mean, std)
    top, left = _crop_origin(img, rng, out_h, out_w)
    return _normalize_window(img[top:top + out_h, left:left + out_w], mean, std)


# -- operator descriptions ------------------------------------------------------

GEOMETRIC = "geometric"
PHOTOMETRIC = "photometric"
NORMALIZING = "normalizing"


@dataclass(frozen=True)
class ResizeShortSide:
    target: int = 256
    family = GEOMETRIC
    draws = 0

    def __post_init__(self):
        if self.target < 1:
            raise InvalidArgument("ResizeShortSide target must be >= 1")

    def apply(self, img, rng):
        return resize_short_side(img, self.target)


@dataclass(frozen=True)
class RandomCrop:
    out_h: int = 224
    out_w: int = 224
    family = GEOMETRIC
    draws = 2

    def __post_init__(self):
        if self.out_h < 1 or self.out_w < 1:
            raise InvalidArgument("crop dimensions must be >= 1")

    def apply(self, img, rng):
        return random_crop(img, rng, self.out_h, self.out_w)


@dataclass(frozen=True)
class RandomHFlip:
    p: float = 0.5
    family = GEOMETRIC
    draws = 1

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise InvalidArgument("flip probability must lie in [0, 1]")

    def apply(self, img, rng):
        return random_hflip(img, rng, self.p)


@dataclass(frozen=True)
class ColorJitter:
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    family = PHOTOMETRIC
    draws = 3

    def __post_init__(self):
        if min(self.brightness, self.contrast, self.saturation) < 0:
            raise InvalidArgument("jitter strengths must be >= 0")

    def apply(self, img, rng):
        return color_jitter(
            img.astype(np.float32, copy=False), rng, self.brightness, self.contrast, self.saturation
        )


def _as_triple(values) -> tuple[float, float, float]:
    values = tuple(float(v) for v in values)
    if len(values) != 3:
        raise InvalidArgument("mean/std need exactly three components")
    return values


@dataclass(frozen=True)
class Normalize:
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD
    family = NORMALIZING
    draws = 0

    def __post_init__(self):
        object.__setattr__(self, "mean", _as_triple(self.mean))
        object.__setattr__(self, "std", _as_triple(self.std))
        if any(s <= 0 for s in self.std):
            raise InvalidArgument("std components must be > 0")
        object.__setattr__(self, "_consts", _mean_std(self.mean, self.std))

    def apply(self, img, rng):
        return _normalize_window(_check_image(img), *self._consts)


@dataclass(frozen=True)
class FusedCropNormalize:
    out_h: int = 224
    out_w: int = 224
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD
    family = NORMALIZING
    draws = 2

    def __post_init__(self):
        RandomCrop(self.out_h, self.out_w)
        norm = Normalize(self.mean, self.std)
        object.__setattr__(self, "mean", norm.mean)
        object.__setattr__(self, "std", norm.std)
        object.__setattr__(self, "_consts", norm._consts)

    def apply(self, img, rng):
        img = _check_image(img)
        top, left = _crop_origin(img, rng, self.out_h, self.out_w)
        return _normalize_window(img[top:top + self.out_h, left:left + self.out_w], *self._consts)


AugmentOp = ResizeShortSide | RandomCrop | RandomHFlip | ColorJitter | Normalize | FusedCropNormalize
OP_TYPES = (ResizeShortSide, RandomCrop, RandomHFlip, ColorJitter, Normalize, FusedCropNormalize)


@dataclass(frozen=True)
class AugmentChain:
    """An ordered tuple of ops; a Normalize-family op may only come last."""

    ops: tuple = field(default_factory=tuple)

    def __post_init__(self):
        ops = tuple(self.ops)
        object.__setattr__(self, "ops", ops)
        for op in ops:
            if not isinstance(op, OP_TYPES):
                raise InvalidArgument(f"not an augmentation op: {op!r}")
        normalizing = [i for i, op in enumerate(ops) if op.family == NORMALIZING]
        if len(normalizing) > 1 or (normalizing and normalizing[0] != len(ops) - 1):
            raise InvalidArgument("at most one normalize op is allowed and it must be last")

    def __len__(self):
        return len(self.ops)

    def __iter__(self):
        return iter(self.ops)

    def __getitem__(self, i):
        return self.ops[i]

    @property
    def draws(self) -> int:
        return sum(op.draws for op in self.ops)


class AugmentPreset(enum.Enum):
    FEW = "few"
    EXTENSIVE = "extensive"


def preset_chain(
    preset,
    short_side: int = 256,
    crop: int = 224,
    flip_p: float = 0.5,
    jitter: float = 0.4,
    mean=IMAGENET_MEAN,
    std=IMAGENET_STD,
) -> AugmentChain:
    """Expand a preset name into its op chain.

    few: resize short side, random crop, random flip, normalize.
    extensive: the same with color jitter before normalize.
    """
    preset = AugmentPreset(preset.value if isinstance(preset, AugmentPreset) else str(preset).lower())
    ops = [ResizeShortSide(short_side), RandomCrop(crop, crop), RandomHFlip(flip_p)]
    if preset is AugmentPreset.EXTENSIVE:
        ops.append(ColorJitter(jitter, jitter, jitter))
    ops.append(Normalize(mean, std))
    return AugmentChain(tuple(ops))


def run_ops(img: np.ndarray, ops: Sequence, rng: SampleRng, start: int = 0) -> np.ndarray:
    for i, op in enumerate(ops, start):
        try:
            img = op.apply(img, rng)
        except LoadForgeError as exc:
            exc.op_index = i
            raise
    return img


def apply_chain(img: np.ndarray, chain: AugmentChain, seed: int) -> np.ndarray:
    """Run ``chain`` on ``img`` with one RNG seeded from ``seed``; float32 out."""
    img = _check_image(img)
    out = run_ops(img, chain.ops, SampleRng(seed))
    return out.astype(np.float32, copy=False)


class AugmentTransformer(BaseEstimator, TransformerMixin):
    """Apply a preset (or explicit chain) to a stack of images.

    Row ``i`` is augmented with ``sample_seed(seed, epoch, i)``, the same
    per-sample seed the loading pipeline uses.
    """

    def __init__(self, preset="few", short_side=256, crop=224, chain=None, seed=0, epoch=0):
        self.preset = preset
        self.short_side = short_side
        self.crop = crop
        self.chain = chain
        self.seed = seed
        self.epoch = epoch

    def _chain(self) -> AugmentChain:
        if self.chain is not None:
            return self.chain
        return preset_chain(self.preset, short_side=self.short_side, crop=self.crop)

    def fit(self, X, y=None):
        self.chain_ = self._chain()
        return self

    def transform(self, X):
        chain = getattr(self, "chain_", None) or self._chain()
        return np.stack([
            apply_chain(np.asarray(img), chain, sample_seed(self.seed, self.epoch, i))
            for i, img in enumerate(X)
        ])
