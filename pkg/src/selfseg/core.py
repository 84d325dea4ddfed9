"""Array conventions and the numeric primitives everything else builds on.

Data moves through the pipeline as plain numpy arrays:

  image   float32 (H, W, 3), values in [0, 1] until normalization
  mask    uint8   (H, W), class ids in {0..K-1} or IGNORE (255)
  logits  float32/float64 (H, W, K) finite scores; batches add a leading N

Resampling uses half-pixel centers (no corner alignment): output pixel i
samples source coordinate (i + 0.5) * in/out - 0.5, with edge clamping for
bilinear and round-half-up (floor(x + 0.5)) for nearest.  All reductions
run in numpy's fixed left-to-right order, so results are bit-stable.
"""
from __future__ import annotations

import numpy as np

from .errors import InvalidInputError

IGNORE = 255


def check_image(image: np.ndarray) -> np.ndarray:
    if image.ndim != 3 or image.shape[2] != 3:
        raise InvalidInputError(f"image must be (H, W, 3), got {image.shape}")
    return image


def check_mask(mask: np.ndarray, num_classes: int | None = None) -> np.ndarray:
    if mask.ndim != 2:
        raise InvalidInputError(f"mask must be (H, W), got {mask.shape}")
    if num_classes is not None:
        bad = (mask >= num_classes) & (mask != IGNORE)
        if bad.any():
            raise InvalidInputError(
                f"mask contains values outside 0..{num_classes - 1} and {IGNORE}")
    return mask


def softmax(logits: np.ndarray) -> np.ndarray:
    """Per-pixel softmax over the trailing class axis, max-subtracted for stability."""
    if not np.isfinite(logits).all():
        raise InvalidInputError("softmax requires finite logits")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def argmax_mask(logits: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over the class axis; ties go to the lowest class index."""
    if logits.shape[-1] < 2:
        raise InvalidInputError("argmax_mask requires K >= 2 classes")
    return logits.argmax(axis=-1).astype(np.uint8)


def _source_coords(out_size: int, in_size: int) -> np.ndarray:
    return (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Channel-independent bilinear resize of an (H, W) or (H, W, C) array.

    Half-pixel-center sampling with edge clamping; same-size resize returns
    the input values exactly (source coordinates land on integers).
    """
    if out_h < 1 or out_w < 1:
        raise InvalidInputError("resize target must be at least 1x1")
    in_h, in_w = arr.shape[:2]
    if (out_h, out_w) == (in_h, in_w):
        return arr.copy()

    ys = _source_coords(out_h, in_h)
    xs = _source_coords(out_w, in_w)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = (ys - y0).astype(arr.dtype if arr.dtype.kind == "f" else np.float64)
    fx = (xs - x0).astype(fy.dtype)
    y0c = np.clip(y0, 0, in_h - 1)
    y1c = np.clip(y0 + 1, 0, in_h - 1)
    x0c = np.clip(x0, 0, in_w - 1)
    x1c = np.clip(x0 + 1, 0, in_w - 1)

    fy = fy[:, None] if arr.ndim == 2 else fy[:, None, None]
    fx = fx[None, :] if arr.ndim == 2 else fx[None, :, None]
    top = arr[np.ix_(y0c, x0c)] * (1 - fx) + arr[np.ix_(y0c, x1c)] * fx
    bot = arr[np.ix_(y1c, x0c)] * (1 - fx) + arr[np.ix_(y1c, x1c)] * fx
    return (top * (1 - fy) + bot * fy).astype(arr.dtype, copy=False)


def resize_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize; output values are drawn from the input's values."""
    if out_h < 1 or out_w < 1:
        raise InvalidInputError("resize target must be at least 1x1")
    in_h, in_w = mask.shape[:2]
    ys = np.clip(np.floor(_source_coords(out_h, in_h) + 0.5).astype(np.int64), 0, in_h - 1)
    xs = np.clip(np.floor(_source_coords(out_w, in_w) + 0.5).astype(np.int64), 0, in_w - 1)
    return mask[np.ix_(ys, xs)].copy()
