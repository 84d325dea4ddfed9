"""Test-time augmentation, model ensembling, and submission post-processing.

Each TTA view transforms the input image, runs the model, and transforms the
logits back to the original frame: flips and quarter-turn rotations invert
as pure index permutations (bit-exact); scale views resize the input by the
factor and bilinearly resize the logits back.  Views are averaged in the
configured order, then member models are averaged in ensemble order, so a
run is bit-reproducible.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from statistics import median

import numpy as np

from .augment import normalize
from .core import argmax_mask, resize_bilinear, resize_nearest
from .dataio import SampleManifest, SubmissionRow, encode_submission, read_ppm
from .errors import CodecError, InvalidConfigError, InvalidInputError

DEFAULT_VIEWS = ("identity", "hflip", "vflip", "rot90", "rot180", "rot270",
                 "scale:0.75", "scale:1.25")


@dataclass(frozen=True)
class TtaView:
    kind: str  # identity | hflip | vflip | rot90 | rot180 | rot270 | scale
    factor: float = 1.0

    @classmethod
    def parse(cls, text: str) -> "TtaView":
        if text.startswith("scale:"):
            factor = float(text.split(":", 1)[1])
            if factor <= 0:
                raise InvalidConfigError(f"scale factor must be > 0, got {factor}")
            return cls("scale", factor)
        if text not in ("identity", "hflip", "vflip", "rot90", "rot180", "rot270"):
            raise InvalidConfigError(f"unknown TTA view {text!r}")
        return cls(text)

    def __str__(self) -> str:
        return f"scale:{self.factor}" if self.kind == "scale" else self.kind


def parse_views(names) -> list[TtaView]:
    views = [TtaView.parse(n) for n in names]
    if not views:
        raise InvalidInputError("TTA view list must be non-empty")
    return views


_ROT = {"rot90": 1, "rot180": 2, "rot270": 3}


def apply_view(arr: np.ndarray, view: TtaView) -> np.ndarray:
    """Transform an (H, W, C) array into the view's frame."""
    if view.kind == "identity":
        return arr
    if view.kind == "hflip":
        return np.ascontiguousarray(arr[:, ::-1])
    if view.kind == "vflip":
        return np.ascontiguousarray(arr[::-1, :])
    if view.kind in _ROT:
        return np.ascontiguousarray(np.rot90(arr, k=_ROT[view.kind]))
    h, w = arr.shape[:2]
    nh, nw = int(round(h * view.factor)), int(round(w * view.factor))
    if nh < 1 or nw < 1:
        raise InvalidConfigError(f"scale {view.factor} collapses {h}x{w} below 1 pixel")
    return resize_bilinear(arr, nh, nw)


def inverse_view(logits: np.ndarray, view: TtaView,
                 orig_shape: tuple[int, int]) -> np.ndarray:
    """Map logits produced under `view` back to the original frame."""
    if view.kind == "identity":
        out = logits
    elif view.kind == "hflip":
        out = np.ascontiguousarray(logits[:, ::-1])
    elif view.kind == "vflip":
        out = np.ascontiguousarray(logits[::-1, :])
    elif view.kind in _ROT:
        out = np.ascontiguousarray(np.rot90(logits, k=4 - _ROT[view.kind]))
    else:
        out = resize_bilinear(logits, *orig_shape)
    if out.shape[:2] != orig_shape:
        raise InvalidInputError(
            f"inverse of {view} produced {out.shape[:2]}, expected {orig_shape}")
    return out


def tta_logits(model, image: np.ndarray, views: list[TtaView]) -> np.ndarray:
    """Average of inverse-transformed logits, in view-list order."""
    if not views:
        raise InvalidInputError("TTA view list must be non-empty")
    orig = image.shape[:2]
    total = None
    for view in views:
        transformed = apply_view(image, view)
        logits = model.forward(transformed[None])[0]
        restored = inverse_view(logits, view, orig)
        total = restored if total is None else total + restored
    return total / len(views)


def ensemble_logits(models: list, image: np.ndarray, views: list[TtaView]) -> np.ndarray:
    """Unweighted mean of per-model TTA logits, in member order."""
    if not models:
        raise InvalidInputError("ensemble must contain at least one model")
    total = None
    for model in models:
        logits = tta_logits(model, image, views)
        total = logits if total is None else total + logits
    return total / len(models)


def postprocess(logits: np.ndarray, model_resolution: int,
                output_resolution: int) -> np.ndarray:
    """Bilinear-upsample logits, argmax, then nearest-resize to the output grid."""
    upsampled = resize_bilinear(logits, model_resolution, model_resolution)
    mask = argmax_mask(upsampled)
    return resize_nearest(mask, output_resolution, output_resolution)


# ---------------------------------------------------------------------------
# ensemble specs

@dataclass
class EnsembleMember:
    checkpoint_path: str
    val_miou: float


def select_members(members: list[EnsembleMember]) -> list[EnsembleMember]:
    """Keep members with val mIoU >= median (ties kept); never empty."""
    if not members:
        raise InvalidInputError("ensemble spec has no members")
    cutoff = median(m.val_miou for m in members)
    return [m for m in members if m.val_miou >= cutoff]


def read_ensemble_spec(path: str | Path) -> list[EnsembleMember]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CodecError(f"cannot read ensemble spec {path}: {exc}") from exc
    members = [EnsembleMember(str(m["checkpoint_path"]), float(m["val_miou"]))
               for m in doc.get("members", [])]
    if not members:
        raise InvalidInputError(f"{path}: ensemble spec has no members")
    return members


def write_ensemble_spec(members: list[EnsembleMember], path: str | Path) -> None:
    doc = {"members": [{"checkpoint_path": m.checkpoint_path,
                        "val_miou": m.val_miou} for m in members]}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# full prediction path

@dataclass
class PredictSettings:
    inference_resolution: int
    output_resolution: int
    views: list[TtaView]
    normalize_mean: tuple[float, float, float]
    normalize_std: tuple[float, float, float]


def predict_mask(models: list, image: np.ndarray,
                 settings: PredictSettings) -> np.ndarray:
    """Resize -> normalize -> ensemble TTA logits -> postprocess, for one image."""
    res = settings.inference_resolution
    resized = resize_bilinear(image, res, res)
    net_input = normalize(resized, settings.normalize_mean, settings.normalize_std)
    logits = ensemble_logits(models, net_input, settings.views)
    return postprocess(logits, res, settings.output_resolution)


def predict_submission(models: list, manifest: SampleManifest,
                       settings: PredictSettings,
                       workers: int = 1) -> tuple[list[SubmissionRow], list[str]]:
    """Predict every manifest sample; returns (rows in manifest order, errors).

    Unreadable samples are reported in `errors` and their rows omitted.
    """
    from .parallel import run_indexed

    def _one(entry):
        image = read_ppm(manifest.image_file(entry))
        return entry.sample_id, predict_mask(models, image, settings)

    results = run_indexed(_one, manifest.entries, workers)
    masks, errors = [], []
    for entry, outcome in zip(manifest.entries, results):
        if isinstance(outcome, Exception):
            errors.append(f"{entry.sample_id}: {outcome}")
        else:
            masks.append(outcome)
    return encode_submission(masks), errors
