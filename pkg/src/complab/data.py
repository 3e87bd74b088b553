"""CIFAR-10 binary ingestion, augmentation and class-balanced sampling.

Records in the binary files are 3073 bytes: one label byte followed by a
32x32 image stored channel-major (1024 red, 1024 green, 1024 blue bytes).
In memory images are ``uint8`` arrays of shape ``(N, 32, 32, 3)``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

RECORD = 3073
SIDE = 32
NUM_CLASSES = 10
CROP = 28
DATA_ENV = "COMPLAB_CIFAR_DIR"
TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_FILES = ["test_batch.bin"]


class CorruptDataError(ValueError):
    pass


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (32, 32, 3) uint8
    label: int

    def scaled(self) -> np.ndarray:
        return self.pixels.astype(np.float32) / 255.0


@dataclass
class ImageSet:
    images: np.ndarray  # (N, 32, 32, 3) uint8
    labels: np.ndarray  # (N,) int64

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> LabeledImage:
        return LabeledImage(self.images[i], int(self.labels[i]))

    def subset(self, n: int | None) -> "ImageSet":
        if n is None or n >= len(self):
            return self
        return ImageSet(self.images[:n], self.labels[:n])

    @classmethod
    def concat(cls, parts: list["ImageSet"]) -> "ImageSet":
        if not parts:
            return cls(np.zeros((0, SIDE, SIDE, 3), np.uint8), np.zeros(0, np.int64))
        return cls(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]))


def decode_cifar(raw: bytes) -> ImageSet:
    if len(raw) % RECORD:
        whole = len(raw) // RECORD * RECORD
        raise CorruptDataError(f"truncated record at byte offset {whole}: "
                               f"{len(raw) - whole} trailing bytes, records are {RECORD} bytes")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= NUM_CLASSES)
    if bad.size:
        raise CorruptDataError(f"record {bad[0]} (byte offset {bad[0] * RECORD}) has label {labels[bad[0]]}")
    images = rec[:, 1:].reshape(-1, 3, SIDE, SIDE).transpose(0, 2, 3, 1)
    return ImageSet(np.ascontiguousarray(images), labels)


def encode_cifar(data: ImageSet) -> bytes:
    n = len(data)
    rec = np.empty((n, RECORD), dtype=np.uint8)
    rec[:, 0] = data.labels
    rec[:, 1:] = data.images.transpose(0, 3, 1, 2).reshape(n, RECORD - 1)
    return rec.tobytes()


def load_cifar_batch(path) -> ImageSet:
    return decode_cifar(Path(path).read_bytes())


def find_cifar_dir(path=None) -> Path | None:
    """Directory holding the binary batches: ``path``, then ``$COMPLAB_CIFAR_DIR``.

    Accepts the extracted ``cifar-10-batches-bin`` folder or its parent.
    """
    for cand in (path, os.environ.get(DATA_ENV)):
        if not cand:
            continue
        for d in (Path(cand), Path(cand) / "cifar-10-batches-bin"):
            if (d / TEST_FILES[0]).is_file() and all((d / f).is_file() for f in TRAIN_FILES):
                return d
    return None


def load_cifar10(path=None) -> tuple[ImageSet, ImageSet]:
    root = find_cifar_dir(path)
    if root is None:
        raise FileNotFoundError(
            f"CIFAR-10 binary batches not found (looked at {path!r} and ${DATA_ENV})")
    train = ImageSet.concat([load_cifar_batch(root / f) for f in TRAIN_FILES])
    test = ImageSet.concat([load_cifar_batch(root / f) for f in TEST_FILES])
    return train, test


def synthetic_cifar(n: int, seed: int = 0, num_classes: int = NUM_CLASSES, noise: float = 40.0) -> ImageSet:
    """Seeded class-coloured noise images for tests and smoke runs.

    Each class has a fixed base colour and a fixed low-frequency pattern, so
    small convnets can separate them after a few epochs.
    """
    proto_rng = np.random.default_rng(12345)
    colours = proto_rng.uniform(40, 215, size=(num_classes, 3))
    yy, xx = np.mgrid[0:SIDE, 0:SIDE] / SIDE
    freqs = proto_rng.uniform(1, 3, size=(num_classes, 2))
    phase = proto_rng.uniform(0, 2 * np.pi, size=num_classes)
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=n)
    pattern = np.sin(2 * np.pi * (freqs[labels, 0, None, None] * yy + freqs[labels, 1, None, None] * xx)
                     + phase[labels, None, None])
    img = colours[labels, None, None, :] + 35.0 * pattern[..., None] + rng.normal(0, noise, (n, SIDE, SIDE, 3))
    return ImageSet(np.clip(img, 0, 255).astype(np.uint8), labels.astype(np.int64))


# --------------------------------------------------------------------------
# preprocessing
# --------------------------------------------------------------------------

@dataclass
class AugmentConfig:
    crop: int = CROP
    flip_lr: float = 0.5
    flip_ud: float = 0.5
    hue_delta: float = 0.08
    saturation_range: tuple[float, float] = (0.6, 1.4)
    contrast_range: tuple[float, float] = (0.7, 1.3)
    jitter: bool = True

    def __post_init__(self):
        if not 1 <= self.crop <= SIDE:
            raise ValueError(f"crop must lie in [1, {SIDE}]")
        if not (0 <= self.flip_lr <= 1 and 0 <= self.flip_ud <= 1):
            raise ValueError("flip probabilities must lie in [0, 1]")


def standardize(x: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Per-image ``(x - mean) / max(std, floor)`` over all values jointly.

    A leading batch axis is allowed when ``x`` is 4-d.
    """
    x64 = x.astype(np.float64)
    axes = tuple(range(x.ndim - 3, x.ndim))
    mu = x64.mean(axis=axes, keepdims=True)
    sd = np.maximum(x64.std(axis=axes, keepdims=True), floor)
    return ((x64 - mu) / sd).astype(np.float32)


def _per_image(v, x):
    return np.asarray(v, dtype=x.dtype).reshape(np.shape(v) + (1,) * (x.ndim - np.ndim(v) - 1))


def adjust_hue(x: np.ndarray, delta) -> np.ndarray:
    hsv = rgb_to_hsv(x)
    hsv[..., 0] = (hsv[..., 0] + _per_image(delta, x)) % 1.0
    return hsv_to_rgb(hsv)


def adjust_saturation(x: np.ndarray, factor) -> np.ndarray:
    hsv = rgb_to_hsv(x)
    hsv[..., 1] = np.clip(hsv[..., 1] * _per_image(factor, x), 0.0, 1.0)
    return hsv_to_rgb(hsv)


def adjust_contrast(x: np.ndarray, factor) -> np.ndarray:
    """Scale deviations from the per-channel mean of each image."""
    mean = x.mean(axis=(-3, -2), keepdims=True)
    f = _per_image(factor, x)[..., None] if np.ndim(factor) else factor
    return np.clip((x - mean) * f + mean, 0.0, 1.0)


def image_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-image stream keyed by a counter, independent of processing order."""
    return np.random.default_rng([seed, epoch, index])


def _draw_augment(cfg: AugmentConfig, rng: np.random.Generator, offset=None):
    span = SIDE - cfg.crop
    oy, ox = offset if offset is not None else rng.integers(0, span + 1, size=2)
    flip_lr = rng.random() < cfg.flip_lr
    flip_ud = rng.random() < cfg.flip_ud
    if cfg.jitter:
        jit = (rng.uniform(-cfg.hue_delta, cfg.hue_delta), rng.uniform(*cfg.contrast_range),
               rng.uniform(*cfg.saturation_range))
    else:
        jit = None
    return int(oy), int(ox), flip_lr, flip_ud, jit


def _augment(pixels: np.ndarray, cfg: AugmentConfig, draws: list) -> np.ndarray:
    c = cfg.crop
    x = np.empty((len(draws), c, c, 3), np.float32)
    for i, (oy, ox, flr, fud, _) in enumerate(draws):
        v = pixels[i, oy:oy + c, ox:ox + c]
        if flr:
            v = v[:, ::-1]
        if fud:
            v = v[::-1]
        x[i] = v
    x /= np.float32(255.0)
    if cfg.jitter:
        hue, con, sat = (np.array(v, dtype=np.float64) for v in zip(*(d[4] for d in draws)))
        x = adjust_hue(x, hue)
        x = adjust_contrast(x, con)
        x = adjust_saturation(x, sat)
    return standardize(x)


def preprocess_train(img: LabeledImage | np.ndarray, cfg: AugmentConfig, rng: np.random.Generator,
                     offset: tuple[int, int] | None = None) -> np.ndarray:
    """Scale, random crop, coin-flip mirrors, colour jitter, standardise.

    Jitter order is hue, contrast, saturation. ``offset`` pins the crop
    origin instead of drawing it.
    """
    pixels = img.pixels if isinstance(img, LabeledImage) else img
    return _augment(pixels[None], cfg, [_draw_augment(cfg, rng, offset)])[0]


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centres (``align_corners=False``).

    Works on ``(h, w)`` or ``(h, w, c)`` arrays.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("output extents must be positive")
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    x = img.astype(np.float64)

    def axis(n_in, n_out):
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    fy = fy.reshape(-1, *[1] * (x.ndim - 1))
    fx = fx.reshape(1, -1, *[1] * (x.ndim - 2))
    rows = x[y0] * (1 - fy) + x[y1] * fy
    out = rows[:, x0] * (1 - fx) + rows[:, x1] * fx
    return out.astype(img.dtype) if img.dtype.kind == "f" else out


def preprocess_eval(img: LabeledImage | np.ndarray, size: int = CROP, crop: int = CROP) -> np.ndarray:
    """Central crop, bilinear resize when ``size != crop``, standardise."""
    pixels = img.pixels if isinstance(img, LabeledImage) else img
    x = pixels.astype(np.float32) / 255.0
    o = (SIDE - crop) // 2
    x = x[o:o + crop, o:o + crop]
    if size != crop:
        x = bilinear_resize(x, size, size)
    return standardize(x)


def preprocess_eval_batch(data: ImageSet) -> np.ndarray:
    return np.stack([preprocess_eval(im) for im in data.images]) if len(data) else \
        np.zeros((0, CROP, CROP, 3), np.float32)


def preprocess_train_batch(data: ImageSet, idx: np.ndarray, cfg: AugmentConfig | None, seed: int,
                           epoch: int) -> np.ndarray:
    """Augment ``data[idx]``; each image draws from its own ``(seed, epoch, index)`` stream."""
    if cfg is None:
        return np.stack([preprocess_eval(data.images[i]) for i in idx])
    draws = [_draw_augment(cfg, image_rng(seed, epoch, int(i))) for i in idx]
    return _augment(data.images[np.asarray(idx)], cfg, draws)


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------

SAMPLING = ("none", "uniform", "stratified")


@dataclass
class Sampler:
    """Index stream over a labelled set.

    ``none`` shuffles every epoch. ``uniform`` picks a class uniformly and
    then an instance of it, with replacement. ``stratified`` gives every batch
    ``batch // K`` instances per class and fills the remainder with distinct
    randomly chosen classes, so per-class counts differ by at most one.
    """

    labels: np.ndarray
    strategy: str
    rng: np.random.Generator
    num_classes: int
    by_class: list[np.ndarray] = field(default_factory=list)

    def draws_per_epoch(self) -> int:
        return len(self.labels)

    def batches(self, batch_size: int, drop_last: bool = False):
        n = len(self.labels)
        if self.strategy == "none":
            order = self.rng.permutation(n)
            for s in range(0, n, batch_size):
                b = order[s:s + batch_size]
                if len(b) == batch_size or not drop_last:
                    yield b
            return
        n_batches = n // batch_size if drop_last else -(-n // batch_size)
        for k in range(n_batches):
            size = min(batch_size, n - k * batch_size) if not drop_last else batch_size
            yield self.draw_batch(size)

    def draw_batch(self, size: int) -> np.ndarray:
        k = self.num_classes
        if self.strategy == "uniform":
            cls = self.rng.integers(0, k, size=size)
        elif self.strategy == "stratified":
            cls = np.concatenate([np.repeat(np.arange(k), size // k),
                                  self.rng.choice(k, size=size % k, replace=False)])
            cls = self.rng.permutation(cls)
        else:
            raise ValueError("draw_batch needs a balancing strategy")
        return np.array([self.by_class[c][self.rng.integers(len(self.by_class[c]))] for c in cls], dtype=np.int64)


def make_sampler(labels, strategy: str, rng: np.random.Generator, num_classes: int | None = None) -> Sampler:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("no labels to sample from")
    if strategy not in SAMPLING:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {SAMPLING}")
    k = int(num_classes if num_classes is not None else labels.max() + 1)
    by_class = [np.flatnonzero(labels == c) for c in range(k)]
    if strategy != "none":
        for c, members in enumerate(by_class):
            if members.size == 0:
                raise ValueError(f"class {c} has no instances; cannot balance with {strategy!r}")
    return Sampler(labels, strategy, rng, k, by_class)
