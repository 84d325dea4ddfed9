"""Built-in segmentation model, loss, optimizer, and the training loop.

The built-in model is a small convolutional network (3 -> 16 -> 16 -> K
channels, 3x3 kernels, stride 1, zero padding 1, ReLU between layers, no
activation on the head), standing in for a large pretrained backbone so the
whole pipeline runs on a CPU in minutes.  Anything implementing the
`SegModel` protocol (forward preserving H x W, flat parameter vector,
checkpoint round-trip) can be dropped in instead.

Convolutions run as im2col matmuls; backward is the exact analytic
gradient, verified against central finite differences by `grad_check`.

Flat parameter layout, in order: for each layer, W as (out, in*9) row-major
(kernel index = c*9 + dy*3 + dx), then the bias (out,).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .augment import AugmentConfig, apply_paired, sample_record
from .core import IGNORE, resize_bilinear, resize_nearest
from .errors import (CodecError, DegenerateBatchError, InvalidInputError,
                     NonFiniteGradientError)
from .rng import SplitMix64, derive_seed, fnv1a64


class TinySegNet:
    """Three-layer convnet; stride 1, so any input size is valid."""

    HIDDEN = 16
    KERNEL = 3
    stride = 1

    def __init__(self, num_classes: int, dtype=np.float32):
        if num_classes < 2:
            raise InvalidInputError("num_classes must be >= 2")
        self.num_classes = num_classes
        self.dtype = np.dtype(dtype)
        self.channels = [3, self.HIDDEN, self.HIDDEN, num_classes]
        self.params = np.zeros(self.param_count(), dtype=self.dtype)
        self._cache = None

    @property
    def arch_id(self) -> str:
        return f"tinyseg16/{self.num_classes}"

    def param_count(self) -> int:
        k2 = self.KERNEL * self.KERNEL
        return sum(cin * k2 * cout + cout
                   for cin, cout in zip(self.channels, self.channels[1:]))

    def _layer_slices(self):
        k2 = self.KERNEL * self.KERNEL
        offset = 0
        for cin, cout in zip(self.channels, self.channels[1:]):
            w_size = cout * cin * k2
            yield (slice(offset, offset + w_size), (cout, cin * k2),
                   slice(offset + w_size, offset + w_size + cout))
            offset += w_size + cout

    def init_params(self, seed: int) -> None:
        """He-uniform fan-in initialization; biases zero."""
        rng = SplitMix64(seed)
        k2 = self.KERNEL * self.KERNEL
        pieces = []
        for cin, cout in zip(self.channels, self.channels[1:]):
            fan_in = cin * k2
            limit = np.sqrt(6.0 / fan_in)
            pieces.append(rng.uniform_array(-limit, limit, cout * fan_in))
            pieces.append(np.zeros(cout))
        self.params = np.concatenate(pieces).astype(self.dtype)

    def get_params(self) -> np.ndarray:
        return self.params.copy()

    def set_params(self, flat: np.ndarray) -> None:
        if flat.shape != (self.param_count(),):
            raise InvalidInputError(
                f"expected {self.param_count()} parameters, got {flat.shape}")
        self.params = flat.astype(self.dtype)

    def copy(self) -> "TinySegNet":
        clone = TinySegNet(self.num_classes, dtype=self.dtype)
        clone.params = self.params.copy()
        return clone

    def astype(self, dtype) -> "TinySegNet":
        clone = TinySegNet(self.num_classes, dtype=dtype)
        clone.params = self.params.astype(dtype)
        return clone

    # -- forward / backward -------------------------------------------------

    @staticmethod
    def _im2col(x: np.ndarray) -> np.ndarray:
        n, h, w, c = x.shape
        padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        windows = sliding_window_view(padded, (3, 3), axis=(1, 2))
        return windows.reshape(n * h * w, c * 9)

    def forward(self, images: np.ndarray, keep_cache: bool = False) -> np.ndarray:
        """(N, H, W, 3) batch -> (N, H, W, K) logits at the same resolution."""
        if images.ndim != 4 or images.shape[3] != 3:
            raise InvalidInputError(f"expected (N, H, W, 3) batch, got {images.shape}")
        x = images.astype(self.dtype, copy=False)
        n, h, w, _ = x.shape
        cache = {"cols": [], "pre": []}
        layers = list(self._layer_slices())
        for li, (w_slice, w_shape, b_slice) in enumerate(layers):
            weight = self.params[w_slice].reshape(w_shape)
            bias = self.params[b_slice]
            cols = self._im2col(x)
            z = (cols @ weight.T + bias).reshape(n, h, w, w_shape[0])
            if keep_cache:
                cache["cols"].append(cols)
            last = li == len(layers) - 1
            if not last:
                if keep_cache:
                    cache["pre"].append(z)
                x = np.maximum(z, 0)
            else:
                x = z
        self._cache = cache if keep_cache else None
        return x

    def backward(self, images: np.ndarray, grad_logits: np.ndarray) -> np.ndarray:
        """Gradient of the loss w.r.t. the flat parameter vector.

        Requires the cache from forward(images, keep_cache=True) on the same
        inputs; grad_logits is d(loss)/d(logits) at (N, H, W, K).
        """
        if self._cache is None:
            raise InvalidInputError("backward requires forward(..., keep_cache=True) first")
        n, h, w, _ = images.shape
        cache = self._cache
        layers = list(self._layer_slices())
        grad = np.zeros_like(self.params)
        dy = grad_logits.astype(self.dtype, copy=False)
        for li in range(len(layers) - 1, -1, -1):
            w_slice, w_shape, b_slice = layers[li]
            weight = self.params[w_slice].reshape(w_shape)
            dy_flat = dy.reshape(n * h * w, w_shape[0])
            grad[w_slice] = (dy_flat.T @ cache["cols"][li]).ravel()
            grad[b_slice] = dy_flat.sum(axis=0)
            if li == 0:
                break
            dcols = (dy_flat @ weight).reshape(n, h, w, self.channels[li], 3, 3)
            dx_pad = np.zeros((n, h + 2, w + 2, self.channels[li]), dtype=self.dtype)
            for dyy in range(3):
                for dxx in range(3):
                    dx_pad[:, dyy:dyy + h, dxx:dxx + w, :] += dcols[:, :, :, :, dyy, dxx]
            dx = dx_pad[:, 1:h + 1, 1:w + 1, :]
            dy = dx * (cache["pre"][li - 1] > 0)
        return grad


def forward(model, images: np.ndarray) -> np.ndarray:
    return model.forward(images)


# ---------------------------------------------------------------------------
# loss

def ce_loss(logits: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over non-IGNORE pixels and its gradient w.r.t. logits.

    grad = (softmax - onehot) / n_valid on valid pixels, zero elsewhere.
    Raises DegenerateBatchError when every pixel is IGNORE.
    """
    if logits.shape[:-1] != mask.shape:
        raise InvalidInputError(
            f"logits {logits.shape} and mask {mask.shape} shapes do not match")
    k = logits.shape[-1]
    if mask[(mask != IGNORE)].size and int(mask[(mask != IGNORE)].max()) >= k:
        raise InvalidInputError("mask contains class ids >= K")
    valid = mask != IGNORE
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise DegenerateBatchError("all pixels are IGNORE; skipping batch")

    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=-1, keepdims=True)
    probs = exp / denom
    log_probs = shifted - np.log(denom)

    safe_labels = np.where(valid, mask, 0).astype(np.int64)
    picked = np.take_along_axis(log_probs, safe_labels[..., None], axis=-1)[..., 0]
    loss = float(-(picked * valid).sum() / n_valid)

    grad = probs.copy()
    onehot_idx = safe_labels[..., None]
    np.put_along_axis(grad, onehot_idx,
                      np.take_along_axis(grad, onehot_idx, axis=-1) - 1.0, axis=-1)
    grad *= (valid[..., None] / n_valid)
    return loss, grad.astype(logits.dtype, copy=False)


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamWState:
    """Decoupled-weight-decay Adam state; m and v are sized like the parameters."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


def adamw_init(n_params: int, lr: float, weight_decay: float = 0.01,
               dtype=np.float32) -> AdamWState:
    return AdamWState(m=np.zeros(n_params, dtype=dtype),
                      v=np.zeros(n_params, dtype=dtype),
                      lr=lr, weight_decay=weight_decay)


def adamw_step(params: np.ndarray, grads: np.ndarray,
               state: AdamWState) -> tuple[np.ndarray, AdamWState]:
    """One update: moments, bias correction, then decoupled decay.

    theta' = theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
    """
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise InvalidInputError("params, grads, and moments must share a shape")
    if not np.isfinite(grads).all():
        raise NonFiniteGradientError(
            f"non-finite gradient at step {state.step + 1}")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    update = m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * params
    new_params = params - state.lr * update
    return new_params.astype(params.dtype), replace(state, m=m, v=v, step=t)


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainSample:
    sample_id: str
    image: np.ndarray  # (H, W, 3) float32 in [0, 1], unnormalized
    mask: np.ndarray   # (H, W) uint8


@dataclass
class TrainStageConfig:
    epochs: int
    batch_size: int
    lr: float
    resolution: int
    shuffle_seed: int | None = None  # None means "derive from the pipeline seed"
    weight_decay: float = 0.01

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.resolution < 1:
            raise InvalidInputError("bad training stage configuration")


def _prepare_sample(sample: TrainSample, resolution: int) -> TrainSample:
    if sample.image.shape[:2] == (resolution, resolution):
        return sample
    return TrainSample(
        sample.sample_id,
        resize_bilinear(sample.image, resolution, resolution),
        resize_nearest(sample.mask, resolution, resolution),
    )


def train_stage(model, dataset: list[TrainSample], stage: TrainStageConfig,
                augment: AugmentConfig) -> tuple[object, list[float]]:
    """Run epochs x batches of forward / ce_loss / backward / adamw_step.

    Samples are resized to the stage resolution, then augmented per
    (sample_id, epoch) streams; per-epoch shuffles come from the stage's
    shuffle seed.  Returns the trained model and per-epoch mean losses.
    """
    stage.validate()
    if not dataset:
        raise InvalidInputError("train_stage requires a non-empty dataset")
    resized = [_prepare_sample(s, stage.resolution) for s in dataset]

    params = model.get_params()
    opt = adamw_init(params.size, stage.lr, stage.weight_decay, dtype=model.dtype)
    history: list[float] = []
    shuffle_seed = stage.shuffle_seed if stage.shuffle_seed is not None else 0
    for epoch in range(stage.epochs):
        order = list(range(len(resized)))
        SplitMix64(derive_seed(shuffle_seed, "epoch", epoch)).shuffle(order)
        losses = []
        for start in range(0, len(order), stage.batch_size):
            chunk = order[start:start + stage.batch_size]
            images, masks = [], []
            for idx in chunk:
                sample = resized[idx]
                record = sample_record(augment, (sample.sample_id, epoch))
                img, msk = apply_paired(record, sample.image, sample.mask)
                images.append(img)
                masks.append(msk)
            batch = np.stack(images)
            target = np.stack(masks)
            logits = model.forward(batch, keep_cache=True)
            try:
                loss, grad_logits = ce_loss(logits, target)
            except DegenerateBatchError:
                continue
            grads = model.backward(batch, grad_logits)
            params, opt = adamw_step(params, grads, opt)
            model.set_params(params)
            losses.append(loss)
        history.append(float(np.mean(losses)) if losses else float("nan"))
    return model, history


# ---------------------------------------------------------------------------
# gradient verification

def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(1e-8, abs(a) + abs(b))


def grad_check(model, n_probes: int = 50, seed: int = 0, h: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs in float64 on a small random input/mask pair; probes n_probes
    random parameter coordinates.
    """
    shadow = model.astype(np.float64)
    rng = SplitMix64(derive_seed(seed, "grad_check"))
    size = 8
    image = rng.uniform_array(0.0, 1.0, size * size * 3).reshape(1, size, size, 3)
    labels = np.array([rng.randbelow(shadow.num_classes + 1)
                       for _ in range(size * size)], dtype=np.uint8)
    labels[labels == shadow.num_classes] = IGNORE  # sprinkle some ignored pixels
    mask = labels.reshape(1, size, size)

    logits = shadow.forward(image, keep_cache=True)
    _, grad_logits = ce_loss(logits, mask)
    analytic = shadow.backward(image, grad_logits)

    def loss_at(params: np.ndarray) -> float:
        probe = shadow.copy()
        probe.params = params
        loss, _ = ce_loss(probe.forward(image), mask)
        return loss

    base = shadow.params
    worst = 0.0
    n = base.size
    for _ in range(n_probes):
        i = rng.randbelow(n)
        bumped = base.copy()
        bumped[i] = base[i] + h
        up = loss_at(bumped)
        bumped[i] = base[i] - h
        down = loss_at(bumped)
        fd = (up - down) / (2.0 * h)
        worst = max(worst, relative_error(float(analytic[i]), fd))
    return worst


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"SSEGCKPT"
CHECKPOINT_VERSION = 1
_ARCH_REGISTRY = {"tinyseg16": TinySegNet}


def save_checkpoint(model, path) -> None:
    """Magic, version, arch id, param count, float32 LE payload, FNV-1a64 checksum."""
    arch = model.arch_id.encode("utf-8")
    payload = model.get_params().astype("<f4").tobytes()
    body = (CHECKPOINT_MAGIC
            + struct.pack("<I", CHECKPOINT_VERSION)
            + struct.pack("<I", len(arch)) + arch
            + struct.pack("<Q", model.param_count())
            + payload)
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<Q", fnv1a64(body)))


def load_checkpoint(path):
    data = open(path, "rb").read()
    if len(data) < len(CHECKPOINT_MAGIC) + 16 or not data.startswith(CHECKPOINT_MAGIC):
        raise CodecError(f"{path}: not a checkpoint file")
    body, checksum = data[:-8], struct.unpack("<Q", data[-8:])[0]
    if fnv1a64(body) != checksum:
        raise CodecError(f"{path}: checksum mismatch")
    pos = len(CHECKPOINT_MAGIC)
    version, = struct.unpack_from("<I", body, pos); pos += 4
    if version != CHECKPOINT_VERSION:
        raise CodecError(f"{path}: unsupported checkpoint version {version}")
    arch_len, = struct.unpack_from("<I", body, pos); pos += 4
    arch = body[pos:pos + arch_len].decode("utf-8"); pos += arch_len
    count, = struct.unpack_from("<Q", body, pos); pos += 8
    name, _, classes = arch.partition("/")
    if name not in _ARCH_REGISTRY or not classes.isdigit():
        raise CodecError(f"{path}: unknown architecture {arch!r}")
    model = _ARCH_REGISTRY[name](int(classes))
    params = np.frombuffer(body, dtype="<f4", count=count, offset=pos)
    if params.size != model.param_count() or pos + 4 * count != len(body):
        raise CodecError(f"{path}: parameter payload does not match {arch!r}")
    model.set_params(params.astype(np.float32))
    return model
