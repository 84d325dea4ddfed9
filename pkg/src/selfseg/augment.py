"""Training-time augmentation applied jointly to an image and its mask.

A sampled `AugmentRecord` fully determines one application, so any transform
can be replayed bit-for-bit.  Order of application:

  1. geometric: hflip -> vflip -> rot90 -> affine (scale/translate/rotate
     about the canvas center, inverse-mapped) -> crop to crop_size
  2. photometric (image only): brightness/contrast -> HSV shift
  3. per-channel normalization

Geometry hits image and mask identically; the image is resampled bilinearly
(zero fill outside the source), the mask by nearest neighbor (IGNORE fill).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import IGNORE, check_image, check_mask
from .errors import InvalidConfigError, InvalidInputError
from .rng import SplitMix64, derive_seed

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class AugmentConfig:
    crop_size: int = 512
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_rot90: float = 0.5
    scale_range: float = 0.20
    translate_range: float = 0.0625
    rotate_range: float = 30.0
    brightness_contrast_range: float = 0.30
    hsv_shift_limits: tuple[float, float, float] = (10.0, 0.15, 0.15)
    normalize_mean: tuple[float, float, float] = IMAGENET_MEAN
    normalize_std: tuple[float, float, float] = IMAGENET_STD
    seed: int = 0

    def validate(self) -> None:
        for name in ("p_hflip", "p_vflip", "p_rot90"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise InvalidConfigError(f"{name} must be in [0, 1], got {p}")
        for name in ("scale_range", "translate_range", "rotate_range",
                     "brightness_contrast_range"):
            if getattr(self, name) < 0:
                raise InvalidConfigError(f"{name} must be non-negative")
        if self.crop_size < 1:
            raise InvalidConfigError("crop_size must be >= 1")
        if any(s <= 0 for s in self.normalize_std):
            raise InvalidConfigError("normalize_std components must be > 0")
        if any(lim < 0 for lim in self.hsv_shift_limits):
            raise InvalidConfigError("hsv_shift_limits must be non-negative")


@dataclass
class AugmentRecord:
    """The sampled decisions for one application; replaying is exact."""

    hflip: bool = False
    vflip: bool = False
    rot90: int = 0  # quarter turns, counterclockwise
    scale: float = 1.0
    translate: tuple[float, float] = (0.0, 0.0)  # (dy, dx) as canvas fractions
    rotate_deg: float = 0.0
    brightness: float = 0.0
    contrast: float = 0.0
    hue_shift: float = 0.0
    sat_shift: float = 0.0
    val_shift: float = 0.0
    crop_uv: tuple[float, float] = (0.0, 0.0)
    crop_size: int | None = None
    normalize_mean: tuple[float, float, float] = IMAGENET_MEAN
    normalize_std: tuple[float, float, float] = IMAGENET_STD

    def is_geometric_identity(self) -> bool:
        return (not self.hflip and not self.vflip and self.rot90 == 0
                and self.scale == 1.0 and self.translate == (0.0, 0.0)
                and self.rotate_deg == 0.0)


def sample_record(config: AugmentConfig, stream_key: tuple) -> AugmentRecord:
    """Sample one record from the stream derived from (config.seed, stream_key).

    The same (config, stream_key) always yields the same record, independent
    of call order, so per-sample work can run on any worker.
    """
    config.validate()
    rng = SplitMix64(derive_seed(config.seed, "augment", *stream_key))
    hflip = rng.random() < config.p_hflip
    vflip = rng.random() < config.p_vflip
    rot_gate = rng.random() < config.p_rot90
    quarter = rng.randint(1, 3)
    s = config.scale_range
    scale = 1.0 + rng.uniform(-s, s)
    t = config.translate_range
    translate = (rng.uniform(-t, t), rng.uniform(-t, t))
    rotate_deg = rng.uniform(-config.rotate_range, config.rotate_range)
    bc = config.brightness_contrast_range
    brightness = rng.uniform(-bc, bc)
    contrast = rng.uniform(-bc, bc)
    hue_lim, sat_lim, val_lim = config.hsv_shift_limits
    return AugmentRecord(
        hflip=hflip,
        vflip=vflip,
        rot90=quarter if rot_gate else 0,
        scale=scale,
        translate=translate,
        rotate_deg=rotate_deg,
        brightness=brightness,
        contrast=contrast,
        hue_shift=rng.uniform(-hue_lim, hue_lim),
        sat_shift=rng.uniform(-sat_lim, sat_lim),
        val_shift=rng.uniform(-val_lim, val_lim),
        crop_uv=(rng.random(), rng.random()),
        crop_size=config.crop_size,
        normalize_mean=config.normalize_mean,
        normalize_std=config.normalize_std,
    )


def normalize(image: np.ndarray, mean, std) -> np.ndarray:
    """(value - mean) / std per channel."""
    std = np.asarray(std, dtype=np.float32)
    if (std <= 0).any():
        raise InvalidInputError("normalize std must be > 0")
    mean = np.asarray(mean, dtype=np.float32)
    return ((image - mean[None, None, :]) / std[None, None, :]).astype(np.float32)


def _affine_source_coords(record: AugmentRecord, h: int, w: int):
    """Source coordinates sampled by each output pixel (inverse mapping).

    Forward model: dst = R(theta) * scale * (src - center) + center + t_px,
    so src = R(-theta) * (dst - center - t_px) / scale + center.
    """
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ty, tx = record.translate[0] * h, record.translate[1] * w
    theta = math.radians(record.rotate_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    py = ys - cy - ty
    px = xs - cx - tx
    sx = (cos_t * px + sin_t * py) / record.scale + cx
    sy = (-sin_t * px + cos_t * py) / record.scale + cy
    return sy, sx


def _sample_bilinear_zero(image: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    h, w = image.shape[:2]
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy = (sy - y0).astype(np.float32)[..., None]
    fx = (sx - x0).astype(np.float32)[..., None]
    out = np.zeros(sy.shape + (image.shape[2],), dtype=np.float32)
    for dy, dx, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                        (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yy, xx = y0 + dy, x0 + dx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = image[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        out += wgt * np.where(valid[..., None], vals, 0.0)
    return out


def _sample_nearest_ignore(mask: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    yi = np.floor(sy + 0.5).astype(np.int64)
    xi = np.floor(sx + 0.5).astype(np.int64)
    valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
    out = np.full(sy.shape, IGNORE, dtype=np.uint8)
    out[valid] = mask[yi[valid], xi[valid]]
    return out


def _rot90_flip(arr: np.ndarray, record: AugmentRecord) -> np.ndarray:
    if record.hflip:
        arr = arr[:, ::-1]
    if record.vflip:
        arr = arr[::-1, :]
    if record.rot90:
        arr = np.rot90(arr, k=record.rot90)
    return np.ascontiguousarray(arr)


def apply_geometric(record: AugmentRecord, image: np.ndarray, mask: np.ndarray):
    """Flips/rot90 -> affine -> crop, applied identically to image and mask."""
    image = _rot90_flip(image, record)
    mask = _rot90_flip(mask, record)

    if not record.is_geometric_identity():
        h, w = mask.shape
        sy, sx = _affine_source_coords(record, h, w)
        image = _sample_bilinear_zero(image, sy, sx)
        mask = _sample_nearest_ignore(mask, sy, sx)

    if record.crop_size is not None:
        h, w = mask.shape
        cs = record.crop_size
        if cs > h or cs > w:
            raise InvalidConfigError(f"crop_size {cs} exceeds canvas {h}x{w}")
        r0 = int(record.crop_uv[0] * (h - cs + 1))
        c0 = int(record.crop_uv[1] * (w - cs + 1))
        r0, c0 = min(r0, h - cs), min(c0, w - cs)
        image = image[r0:r0 + cs, c0:c0 + cs]
        mask = mask[r0:r0 + cs, c0:c0 + cs]
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


def apply_photometric(record: AugmentRecord, image: np.ndarray) -> np.ndarray:
    """Brightness/contrast then HSV shift, on [0, 1] RGB; mask is never touched."""
    out = image.astype(np.float32)
    if record.brightness != 0.0 or record.contrast != 0.0:
        out = np.clip(out * (1.0 + record.contrast) + record.brightness, 0.0, 1.0)
    if record.hue_shift != 0.0 or record.sat_shift != 0.0 or record.val_shift != 0.0:
        h, s, v = rgb_to_hsv(out)
        h = np.mod(h + record.hue_shift, 360.0)
        s = np.clip(s + record.sat_shift, 0.0, 1.0)
        v = np.clip(v + record.val_shift, 0.0, 1.0)
        out = hsv_to_rgb(h, s, v)
    return out


def apply_paired(record: AugmentRecord, image: np.ndarray,
                 mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Run the full record; returns (normalized image, mask)."""
    check_image(image)
    check_mask(mask)
    if image.shape[:2] != mask.shape:
        raise InvalidInputError(
            f"image {image.shape[:2]} and mask {mask.shape} dimensions differ")
    image, mask = apply_geometric(record, image, mask)
    image = apply_photometric(record, image)
    image = normalize(image, record.normalize_mean, record.normalize_std)
    return image, mask


def rgb_to_hsv(rgb: np.ndarray):
    """Vectorized RGB [0,1] -> (hue degrees [0,360), sat [0,1], val [0,1])."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc
    with np.errstate(divide="ignore", invalid="ignore"):
        hue = np.select(
            [delta == 0, maxc == r, maxc == g],
            [0.0,
             np.mod((g - b) / delta, 6.0),
             (b - r) / delta + 2.0],
            default=(r - g) / delta + 4.0,
        ) * 60.0
        sat = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    return hue.astype(np.float32), sat.astype(np.float32), maxc.astype(np.float32)


def hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    hp = (np.mod(h, 360.0) / 60.0).astype(np.float32)
    c = v * s
    x = c * (1.0 - np.abs(np.mod(hp, 2.0) - 1.0))
    zeros = np.zeros_like(c)
    sector = np.floor(hp).astype(np.int64) % 6
    r = np.choose(sector, [c, x, zeros, zeros, x, c])
    g = np.choose(sector, [x, c, c, x, zeros, zeros])
    b = np.choose(sector, [zeros, zeros, x, c, c, x])
    m = (v - c)[..., None]
    return (np.stack([r, g, b], axis=-1) + m).astype(np.float32)
