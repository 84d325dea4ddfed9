"""Dataset manifests, netpbm codecs, the submission CSV, and synthetic data.

On-disk formats (all byte-stable for identical inputs):

  images       binary P6 PPM, maxval 255
  masks        binary P5 PGM, maxval 255; pixel value = class id, 255 = IGNORE
  manifest     manifest.json {"entries": [{sample_id, image_path, mask_path,
               labeled}]}, paths relative to the manifest's directory
  submission   UTF-8 CSV, LF endings, header `sample_id,height,width,rle`;
               rle = space-separated `class:count` runs of the row-major mask
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import IGNORE, resize_bilinear
from .errors import CodecError, InvalidInputError, LabelRangeError
from .rng import SplitMix64, derive_seed


# ---------------------------------------------------------------------------
# netpbm codecs

def _read_pnm_header(data: bytes, magic: bytes, path: Path) -> tuple[int, int, int]:
    if not data.startswith(magic):
        raise CodecError(f"{path}: expected {magic.decode()} header")
    fields: list[int] = []
    pos = len(magic)
    while len(fields) < 3:
        if pos >= len(data):
            raise CodecError(f"{path}: truncated header")
        ch = data[pos:pos + 1]
        if ch == b"#":
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise CodecError(f"{path}: unterminated comment")
            pos = nl + 1
        elif ch.isspace():
            pos += 1
        elif ch.isdigit():
            end = pos
            while end < len(data) and data[end:end + 1].isdigit():
                end += 1
            fields.append(int(data[pos:end]))
            pos = end
        else:
            raise CodecError(f"{path}: malformed header byte {ch!r}")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise CodecError(f"{path}: missing whitespace after maxval")
    width, height, maxval = fields
    if maxval != 255:
        raise CodecError(f"{path}: only maxval 255 is supported, got {maxval}")
    if width < 1 or height < 1:
        raise CodecError(f"{path}: invalid dimensions {width}x{height}")
    return width, height, pos + 1


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a binary P6 PPM into a float32 (H, W, 3) image with values in [0, 1]."""
    path = Path(path)
    data = path.read_bytes()
    width, height, offset = _read_pnm_header(data, b"P6", path)
    payload = data[offset:]
    expected = width * height * 3
    if len(payload) != expected:
        raise CodecError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return (pixels.astype(np.float32) / 255.0)


def write_ppm(image: np.ndarray, path: str | Path) -> None:
    """Write a [0, 1] image as binary P6 PPM (clamped, rounded half-up)."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise InvalidInputError(f"expected (H, W, 3) image, got {image.shape}")
    h, w = image.shape[:2]
    quantized = np.floor(np.clip(image.astype(np.float64), 0.0, 1.0) * 255.0 + 0.5)
    payload = quantized.astype(np.uint8).tobytes()
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + payload)


def read_pgm(path: str | Path, num_classes: int | None = None) -> np.ndarray:
    """Read a binary P5 PGM into a uint8 (H, W) mask; values are class ids or IGNORE."""
    path = Path(path)
    data = path.read_bytes()
    width, height, offset = _read_pnm_header(data, b"P5", path)
    payload = data[offset:]
    expected = width * height
    if len(payload) != expected:
        raise CodecError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    mask = np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()
    if num_classes is not None:
        bad = (mask >= num_classes) & (mask != IGNORE)
        if bad.any():
            value = int(mask[bad][0])
            raise LabelRangeError(
                f"{path}: mask value {value} outside 0..{num_classes - 1} and {IGNORE}")
    return mask


def write_pgm(mask: np.ndarray, path: str | Path) -> None:
    if mask.ndim != 2:
        raise InvalidInputError(f"expected (H, W) mask, got {mask.shape}")
    h, w = mask.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + mask.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# manifests

@dataclass
class SampleEntry:
    sample_id: str
    image_path: str
    mask_path: str | None
    labeled: bool


@dataclass
class SampleManifest:
    """Declarative sample listing; paths are relative to `base_dir`."""

    entries: list[SampleEntry]
    base_dir: Path

    def image_file(self, entry: SampleEntry) -> Path:
        return self.base_dir / entry.image_path

    def mask_file(self, entry: SampleEntry) -> Path:
        if entry.mask_path is None:
            raise InvalidInputError(f"sample {entry.sample_id} has no mask")
        return self.base_dir / entry.mask_path

    @property
    def labeled(self) -> list[SampleEntry]:
        return [e for e in self.entries if e.labeled]

    @property
    def unlabeled(self) -> list[SampleEntry]:
        return [e for e in self.entries if not e.labeled]


def validate_manifest(entries: list[SampleEntry]) -> None:
    seen: set[str] = set()
    for e in entries:
        if e.sample_id in seen:
            raise InvalidInputError(f"duplicate sample_id {e.sample_id!r}")
        seen.add(e.sample_id)
        if e.labeled and not e.mask_path:
            raise InvalidInputError(f"labeled sample {e.sample_id!r} has no mask_path")


def read_manifest(path: str | Path) -> SampleManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CodecError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(doc, dict) or "entries" not in doc:
        raise CodecError(f"{path}: manifest must be an object with an 'entries' list")
    entries = []
    for raw in doc["entries"]:
        entries.append(SampleEntry(
            sample_id=str(raw["sample_id"]),
            image_path=str(raw["image_path"]),
            mask_path=raw.get("mask_path"),
            labeled=bool(raw["labeled"]),
        ))
    validate_manifest(entries)
    return SampleManifest(entries=entries, base_dir=path.parent)


def write_manifest(manifest: SampleManifest, path: str | Path) -> None:
    validate_manifest(manifest.entries)
    doc = {"entries": [
        {"sample_id": e.sample_id, "image_path": e.image_path,
         "mask_path": e.mask_path, "labeled": e.labeled}
        for e in manifest.entries
    ]}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# submission CSV

SUBMISSION_HEADER = "sample_id,height,width,rle"


@dataclass
class SubmissionRow:
    sample_id: str
    height: int
    width: int
    rle: str


def rle_encode(values: np.ndarray) -> str:
    """Run-length encode a 1-D class-id sequence as `class:count` tokens."""
    values = np.asarray(values).ravel()
    if values.size == 0:
        return ""
    boundaries = np.flatnonzero(np.diff(values)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [values.size]))
    return " ".join(f"{int(values[s])}:{e - s}" for s, e in zip(starts, ends))


def rle_decode(rle: str, height: int, width: int) -> np.ndarray:
    out = np.empty(height * width, dtype=np.uint8)
    pos = 0
    for token in rle.split():
        try:
            cls_s, count_s = token.split(":")
            cls, count = int(cls_s), int(count_s)
        except ValueError as exc:
            raise CodecError(f"bad rle token {token!r}") from exc
        if count < 1 or cls < 0 or cls > 255:
            raise CodecError(f"bad rle token {token!r}")
        if pos + count > out.size:
            raise CodecError("rle longer than height*width")
        out[pos:pos + count] = cls
        pos += count
    if pos != out.size:
        raise CodecError(f"rle decodes {pos} values, expected {out.size}")
    return out.reshape(height, width)


def encode_submission(masks: list[tuple[str, np.ndarray]]) -> list[SubmissionRow]:
    rows = []
    for sample_id, mask in masks:
        if "," in sample_id or "\n" in sample_id:
            raise InvalidInputError(f"sample_id {sample_id!r} not CSV-safe")
        if (mask == IGNORE).any():
            raise InvalidInputError(f"sample {sample_id}: submission masks must not contain IGNORE")
        rows.append(SubmissionRow(sample_id, mask.shape[0], mask.shape[1], rle_encode(mask)))
    return rows


def decode_submission(rows: list[SubmissionRow]) -> list[tuple[str, np.ndarray]]:
    return [(r.sample_id, rle_decode(r.rle, r.height, r.width)) for r in rows]


def write_submission_csv(rows: list[SubmissionRow], path: str | Path) -> None:
    lines = [SUBMISSION_HEADER]
    lines += [f"{r.sample_id},{r.height},{r.width},{r.rle}" for r in rows]
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


def read_submission_csv(path: str | Path) -> list[SubmissionRow]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if not lines or lines[0] != SUBMISSION_HEADER:
        raise CodecError(f"{path}: expected header {SUBMISSION_HEADER!r}")
    rows = []
    for i, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",", 3)
        if len(parts) != 4:
            raise CodecError(f"{path}:{i}: expected 4 comma-separated fields")
        try:
            rows.append(SubmissionRow(parts[0], int(parts[1]), int(parts[2]), parts[3]))
        except ValueError as exc:
            raise CodecError(f"{path}:{i}: bad height/width") from exc
    return rows


# ---------------------------------------------------------------------------
# synthetic dataset generator

@dataclass
class SyntheticSpec:
    """Parameters of the generated desk-scale dataset."""

    count_labeled: int = 12
    count_unlabeled: int = 120
    height: int = 64
    width: int = 64
    seed: int = 0
    foreground_blob_count_range: tuple[int, int] = (2, 6)
    class_count: int = 2

    def validate(self) -> None:
        if self.count_labeled < 0 or self.count_unlabeled < 0:
            raise InvalidInputError("sample counts must be >= 0")
        if self.height < 8 or self.width < 8:
            raise InvalidInputError("synthetic images must be at least 8x8")
        lo, hi = self.foreground_blob_count_range
        if lo < 0 or hi < lo:
            raise InvalidInputError("bad foreground_blob_count_range")
        if self.class_count < 2:
            raise InvalidInputError("class_count must be >= 2")


# Background is a green-hued value-noise canopy; foreground blobs are
# yellow-hued ellipses.  The color gap is what makes the task learnable by
# a small model at desk scale.
_BG_BASE = np.array([0.18, 0.42, 0.14], dtype=np.float64)
_BG_JITTER = 0.14
_FG_BASE = np.array([0.82, 0.74, 0.22], dtype=np.float64)
_FG_JITTER = 0.10
_AXIS_FRACTION = (0.07, 0.15)  # ellipse semi-axes relative to min(H, W)


def synthesize_sample(spec: SyntheticSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministically render sample `index`: (image, mask).

    The per-sample stream is derived as seed XOR hash(index), so samples can
    be generated in any order or in parallel with identical results.
    """
    rng = SplitMix64(derive_seed(spec.seed, "sample", index))
    h, w = spec.height, spec.width

    # coarse value-noise grid, bilinearly upsampled, plus fine per-pixel noise
    grid = 6
    coarse = rng.uniform_array(-_BG_JITTER, _BG_JITTER, grid * grid * 3).reshape(grid, grid, 3)
    field = resize_bilinear(coarse, h, w)
    fine = rng.uniform_array(-0.03, 0.03, h * w * 3).reshape(h, w, 3)
    image = _BG_BASE[None, None, :] + field + fine

    mask = np.zeros((h, w), dtype=np.uint8)
    lo, hi = spec.foreground_blob_count_range
    n_blobs = rng.randint(lo, hi)
    ys, xs = np.mgrid[0:h, 0:w]
    for _ in range(n_blobs):
        cy = rng.uniform(0.1 * h, 0.9 * h)
        cx = rng.uniform(0.1 * w, 0.9 * w)
        a = rng.uniform(*_AXIS_FRACTION) * min(h, w)
        b = rng.uniform(*_AXIS_FRACTION) * min(h, w)
        theta = rng.uniform(0.0, np.pi)
        cls = 1 if spec.class_count == 2 else rng.randint(1, spec.class_count - 1)
        shade = rng.uniform_array(-_FG_JITTER, _FG_JITTER, 3)

        dy, dx = ys - cy, xs - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        mask[inside] = cls
        image[inside] = (_FG_BASE + shade)[None, :]

    return np.clip(image, 0.0, 1.0).astype(np.float32), mask


def generate_synthetic(spec: SyntheticSpec, out_dir: str | Path) -> SampleManifest:
    """Write PPM images, PGM masks for labeled samples, and manifest.json."""
    spec.validate()
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InvalidInputError(f"cannot create dataset directory {out_dir}: {exc}") from exc

    entries = []
    total = spec.count_labeled + spec.count_unlabeled
    for index in range(total):
        labeled = index < spec.count_labeled
        sample_id = f"lab_{index:04d}" if labeled else f"unl_{index:04d}"
        image, mask = synthesize_sample(spec, index)
        image_rel = f"images/{sample_id}.ppm"
        write_ppm(image, out_dir / image_rel)
        mask_rel = None
        if labeled:
            mask_rel = f"masks/{sample_id}.pgm"
            write_pgm(mask, out_dir / mask_rel)
        entries.append(SampleEntry(sample_id, image_rel, mask_rel, labeled))

    manifest = SampleManifest(entries=entries, base_dir=out_dir)
    write_manifest(manifest, out_dir / "manifest.json")
    return manifest
