"""Dataset ingestion, synthesis, augmentation, and batch iteration.

Supports the CIFAR binary record formats (bit-exact round trip), stratified
deterministic subsampling for desk-scale runs, and a 4-class synthetic
dataset engineered so that one class pair is separable only through hue and
the other only through luminance.
"""

from __future__ import annotations

import hashlib
import threading
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .colorspace import (
    ChannelStats,
    ColorSpace,
    PlanarImage,
    compute_channel_stats,
    convert_array,
)
from .errors import DataError, UsageError

CIFAR10_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST_FILES = ("test_batch.bin",)
_CIFAR_IMAGE_BYTES = 3 * 32 * 32


@dataclass(frozen=True)
class LabeledBatch:
    """A batch of same-shaped images in one color space plus class labels."""

    planes: np.ndarray  # (N, C, H, W) float64
    labels: np.ndarray  # (N,) int64
    space: ColorSpace

    def __post_init__(self):
        planes = np.asarray(self.planes, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "planes", planes)
        object.__setattr__(self, "labels", labels)
        if planes.ndim != 4:
            raise UsageError(f"batch planes must be (N, C, H, W), got {planes.shape}")
        if planes.shape[1] != self.space.channels:
            raise UsageError(
                f"{self.space.name} needs {self.space.channels} channels, got {planes.shape[1]}"
            )
        if labels.ndim != 1 or labels.shape[0] != planes.shape[0]:
            raise UsageError("labels must be one-dimensional and match the image count")
        if planes.size and not np.all(np.isfinite(planes)):
            raise DataError("non-finite pixel values in batch")

    def __len__(self) -> int:
        return self.planes.shape[0]

    @property
    def images(self) -> tuple[PlanarImage, ...]:
        return tuple(PlanarImage(self.space, self.planes[i]) for i in range(len(self)))

    def subset(self, indices) -> "LabeledBatch":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledBatch(self.planes[idx], self.labels[idx], self.space)

    @classmethod
    def from_images(cls, images: Sequence[PlanarImage], labels) -> "LabeledBatch":
        if not images:
            raise UsageError("cannot build a batch from zero images")
        space = images[0].space
        return cls(np.stack([img.planes for img in images]), np.asarray(labels), space)


@dataclass
class DatasetSplit:
    """Train/test sources plus per-space normalization stats (train only)."""

    train: LabeledBatch
    test: LabeledBatch
    num_classes: int
    _stats: dict[ColorSpace, ChannelStats] = field(default_factory=dict, repr=False)
    _stats_lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        for name, batch in (("train", self.train), ("test", self.test)):
            if len(batch) and (batch.labels.min() < 0 or batch.labels.max() >= self.num_classes):
                raise DataError(f"{name} labels outside [0, {self.num_classes})")
        if self.train.space is not self.test.space:
            raise UsageError("train and test splits must share a color space")

    def stats_for(self, space: ColorSpace) -> ChannelStats:
        """Normalization stats for `space`, computed on the training split only."""
        with self._stats_lock:
            if space not in self._stats:
                converted = convert_array(np.moveaxis(self.train.planes, 1, 0), space)
                self._stats[space] = compute_channel_stats(np.moveaxis(converted, 0, 1))
            return self._stats[space]


# ---------------------------------------------------------------------------
# CIFAR binary format.
# ---------------------------------------------------------------------------

def _parse_cifar_records(raw: bytes, path, label_bytes: int, num_classes: int):
    record = label_bytes + _CIFAR_IMAGE_BYTES
    if len(raw) == 0 or len(raw) % record != 0:
        raise DataError(
            f"{path}: truncated CIFAR file, {len(raw)} bytes is not a multiple of "
            f"{record} (offset of partial record: {len(raw) - len(raw) % record})"
        )
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
    labels = arr[:, label_bytes - 1].astype(np.int64)  # fine label is the last label byte
    bad = np.nonzero(labels >= num_classes)[0]
    if bad.size:
        raise DataError(
            f"{path}: label {labels[bad[0]]} >= {num_classes} in record {bad[0]} "
            f"(byte offset {bad[0] * record})"
        )
    pixels = arr[:, label_bytes:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return pixels, labels


def _load_cifar_files(dir_path, files, label_bytes, num_classes) -> LabeledBatch:
    root = Path(dir_path)
    planes, labels = [], []
    for name in files:
        path = root / name
        if not path.is_file():
            raise DataError(f"missing CIFAR file: {path}")
        p, l = _parse_cifar_records(path.read_bytes(), path, label_bytes, num_classes)
        planes.append(p)
        labels.append(l)
    return LabeledBatch(np.concatenate(planes), np.concatenate(labels), ColorSpace.SRGB)


def load_cifar10(dir_path) -> DatasetSplit:
    """Load the CIFAR-10 binary batches (1 label byte + 3072 planar pixel bytes)."""
    return DatasetSplit(
        train=_load_cifar_files(dir_path, CIFAR10_TRAIN_FILES, 1, 10),
        test=_load_cifar_files(dir_path, CIFAR10_TEST_FILES, 1, 10),
        num_classes=10,
    )


def load_cifar100(dir_path) -> DatasetSplit:
    """Load CIFAR-100 binary files (2 label bytes: coarse then fine; fine is used)."""
    return DatasetSplit(
        train=_load_cifar_files(dir_path, ("train.bin",), 2, 100),
        test=_load_cifar_files(dir_path, ("test.bin",), 2, 100),
        num_classes=100,
    )


def cifar_record_bytes(batch: LabeledBatch) -> bytes:
    """Serialize a batch back to CIFAR-10-style records (inverse of ingestion)."""
    if batch.space is not ColorSpace.SRGB:
        raise UsageError("CIFAR records store sRGB data")
    pixels = np.rint(batch.planes * 255.0).astype(np.uint8).reshape(len(batch), -1)
    labels = batch.labels.astype(np.uint8).reshape(-1, 1)
    return np.concatenate([labels, pixels], axis=1).tobytes()


def fingerprint(split: DatasetSplit) -> str:
    """Content hash identifying a split's exact pixel and label data."""
    h = hashlib.sha256()
    for batch in (split.train, split.test):
        h.update(np.ascontiguousarray(batch.planes).tobytes())
        h.update(np.ascontiguousarray(batch.labels).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Stratified subsetting.
# ---------------------------------------------------------------------------

def _stratified_indices(labels: np.ndarray, n: int, num_classes: int, rng) -> np.ndarray:
    if n > labels.shape[0]:
        raise UsageError(f"requested {n} samples but only {labels.shape[0]} available")
    base, extra = divmod(n, num_classes)
    picked = []
    for c in range(num_classes):
        quota = base + (1 if c < extra else 0)
        pool = np.nonzero(labels == c)[0]
        if quota > pool.size:
            raise UsageError(f"class {c} has {pool.size} samples, cannot take {quota}")
        picked.append(rng.permutation(pool)[:quota])
    return np.sort(np.concatenate(picked))


def load_subset(split: DatasetSplit, train_n: int, test_n: int, seed: int) -> DatasetSplit:
    """Class-stratified deterministic subsample of both splits."""
    train_rng, test_rng = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2)]
    return DatasetSplit(
        train=split.train.subset(_stratified_indices(split.train.labels, train_n, split.num_classes, train_rng)),
        test=split.test.subset(_stratified_indices(split.test.labels, test_n, split.num_classes, test_rng)),
        num_classes=split.num_classes,
    )


def carve_holdout(split: DatasetSplit, fraction: float, seed: int):
    """Split the training data into (main split, held-out batch), stratified.

    The held-out batch is meant for fusion-head training and is never seen
    by branch training.
    """
    if not 0.0 < fraction < 1.0:
        raise UsageError("holdout fraction must be in (0, 1)")
    n_hold = max(split.num_classes, int(round(len(split.train) * fraction)))
    rng = np.random.default_rng(seed)
    hold_idx = _stratified_indices(split.train.labels, n_hold, split.num_classes, rng)
    mask = np.ones(len(split.train), dtype=bool)
    mask[hold_idx] = False
    main = DatasetSplit(
        train=split.train.subset(np.nonzero(mask)[0]),
        test=split.test,
        num_classes=split.num_classes,
    )
    return main, split.train.subset(hold_idx)


# ---------------------------------------------------------------------------
# Synthetic color-separable dataset.
# ---------------------------------------------------------------------------

_LUMA = np.array([0.299, 0.587, 0.114])

#: Generative recipe, one entry per class.
#:
#: Classes 0/1 (the hue pair) share brightness and luminance distributions
#: exactly (luminance is a shared fraction of brightness, realized by
#: solving saturation per pixel), so they are distinguishable only through
#: hue: class 0 sits at hue 40, class 1 draws hue 120 or 350 per image, the
#: two modes straddling class 0 on the chroma circle while staying on one
#: side of it on the hue axis.  Chroma amplitudes are kept low relative to
#: the pixel noise: a hue readout must pool many pixels, which linear
#: opponent channels do losslessly while the per-pixel angular hue channel
#: scrambles first.
#:
#: Classes 2/3 (the luminance pair) share hue, brightness, and saturation
#: marginals; saturation tracks the brightness texture with a
#: class-specific sign, so only the mean luminance (via the
#: saturation-brightness product) differs between them.
SYNTH_RECIPE = {
    0: {"kind": "hue", "hue_modes": (40.0,)},
    1: {"kind": "hue", "hue_modes": (120.0, 350.0)},
    2: {"kind": "luma", "hue_modes": (240.0,), "correlation": +1.0},
    3: {"kind": "luma", "hue_modes": (240.0,), "correlation": -1.0},
}
SYNTH_NUM_CLASSES = 4
SYNTH_VALUE_RANGE = (0.50, 0.98)
#: Image-mean luminance as a fraction of brightness for the hue pair
#: (identical for classes 0 and 1; high values keep chroma amplitudes near
#: the pixel-noise floor so single pixels do not reveal hue).
SYNTH_LUMA_RATIO = (0.88, 0.96)
#: Base saturation band and coupling strength for the luminance pair:
#: saturation tracks the brightness texture with a class-specific sign,
#: shifting mean luminance through the saturation-brightness product while
#: leaving every single-channel marginal identical between the two classes.
SYNTH_LUMA_PAIR_BASE_SAT = (0.40, 0.60)
SYNTH_LUMA_PAIR_COUPLING = 1.8
SYNTH_HUE_SIGMA = 4.0
SYNTH_PIXEL_HUE_SIGMA = 2.0
SYNTH_PIXEL_NOISE = 0.04
SYNTH_VALUE_TEXTURE = 0.12


def _hsv_to_linear(h_deg, s, v):
    """Inverse HSV map used only by the generator (vectorized)."""
    h = np.mod(h_deg, 360.0) / 60.0
    c = v * s
    x = c * (1.0 - np.abs(np.mod(h, 2.0) - 1.0))
    z = np.zeros_like(c)
    sector = np.floor(h).astype(int) % 6
    r = np.choose(sector, [c, x, z, z, x, c])
    g = np.choose(sector, [x, c, c, x, z, z])
    b = np.choose(sector, [z, z, x, c, c, x])
    m = v - c
    return np.stack([r + m, g + m, b + m])


def _pattern_luma(h_deg):
    """BT.601 luma of the full-saturation color pattern at a given hue."""
    rgb = _hsv_to_linear(np.asarray(h_deg, dtype=np.float64), 1.0, 1.0)
    return np.einsum("c...,c->...", rgb, _LUMA)


def _synth_images(n_per_class: int, size: int, rng) -> tuple[np.ndarray, np.ndarray]:
    images, labels = [], []
    for cls in range(SYNTH_NUM_CLASSES):
        p = SYNTH_RECIPE[cls]
        for _ in range(n_per_class):
            v_img = rng.uniform(*SYNTH_VALUE_RANGE)
            texture = np.clip(rng.normal(1.0, SYNTH_VALUE_TEXTURE, size=(size, size)), 0.75, 1.25)
            v_px = np.clip(v_img * texture, 0.10, 0.98)
            if p["kind"] == "hue":
                modes = p["hue_modes"]
                hue = modes[rng.integers(len(modes))] + rng.normal(0.0, SYNTH_HUE_SIGMA)
                hue_px = hue + rng.normal(0.0, SYNTH_PIXEL_HUE_SIGMA, size=(size, size))
                y_img = rng.uniform(*SYNTH_LUMA_RATIO) * v_img
                v_px = np.maximum(v_px, y_img * 1.03)
                # Saturation realizing the shared luminance target per pixel:
                # y = v (1 - s (1 - pattern_luma(h))).
                s_px = np.clip((1.0 - y_img / v_px) / (1.0 - _pattern_luma(hue_px)), 0.02, 0.98)
            else:
                hue_px = p["hue_modes"][0] + rng.normal(0.0, SYNTH_HUE_SIGMA) \
                    + rng.normal(0.0, SYNTH_PIXEL_HUE_SIGMA, size=(size, size))
                s_px = np.clip(
                    rng.uniform(*SYNTH_LUMA_PAIR_BASE_SAT)
                    + p["correlation"] * SYNTH_LUMA_PAIR_COUPLING * (texture - 1.0),
                    0.02,
                    0.98,
                )
            lin = _hsv_to_linear(hue_px, s_px, v_px)
            lin = np.clip(lin + rng.normal(0.0, SYNTH_PIXEL_NOISE, size=lin.shape), 0.0, 1.0)
            images.append(np.power(lin, 1.0 / 2.2))  # encode so ingestion linearization recovers `lin`
            labels.append(cls)
    return np.stack(images) if images else np.zeros((0, 3, size, size)), np.asarray(labels, dtype=np.int64)


def synth_colorsep(n_per_class: int, seed: int, *, test_per_class: int | None = None, size: int = 16) -> DatasetSplit:
    """4-class synthetic dataset with controlled color-space separability.

    Classes 0/1 draw brightness and target luminance from identical
    distributions (luminance is realized exactly by solving saturation per
    pixel), so they differ only through their hue textures; the textures are
    built so image-mean chroma cancels in opponent spaces (see
    ``SYNTH_RECIPE``).  Classes 2/3 share hue and brightness and differ only
    in their luminance band.  Images are stored gamma-encoded so the
    ingestion power law of 2.2 recovers the designed linear-RGB structure
    exactly (up to pixel noise).
    """
    if test_per_class is None:
        test_per_class = max(n_per_class // 2, 1) if n_per_class else 0
    train_rng, test_rng = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2)]
    train_planes, train_labels = _synth_images(n_per_class, size, train_rng)
    test_planes, test_labels = _synth_images(test_per_class, size, test_rng)
    return DatasetSplit(
        train=LabeledBatch(train_planes, train_labels, ColorSpace.SRGB),
        test=LabeledBatch(test_planes, test_labels, ColorSpace.SRGB),
        num_classes=SYNTH_NUM_CLASSES,
    )


# ---------------------------------------------------------------------------
# Augmentation and batching.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentationConfig:
    horizontal_flip: float = 0.5
    shift_fraction: float = 0.125
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.horizontal_flip <= 1.0:
            raise UsageError("horizontal_flip probability must be in [0, 1]")
        if not 0.0 <= self.shift_fraction <= 0.5:
            raise UsageError("shift_fraction must be in [0, 0.5]")


def draw_augment_params(rng, n: int, cfg: AugmentationConfig, height: int, width: int):
    """Per-image flip decisions and integer shifts, drawn in image order."""
    flips = rng.random(n) < cfg.horizontal_flip
    sy = int(height * cfg.shift_fraction)
    sx = int(width * cfg.shift_fraction)
    dys = rng.integers(-sy, sy + 1, size=n) if sy else np.zeros(n, dtype=np.int64)
    dxs = rng.integers(-sx, sx + 1, size=n) if sx else np.zeros(n, dtype=np.int64)
    return flips, dys, dxs


def spatial_transform(planes: np.ndarray, flips, dys, dxs) -> np.ndarray:
    """Apply per-image horizontal flips and edge-replicated integer shifts.

    Works on any channel count and dtype; used both by :func:`augment` and by
    training-time augmentation of converted tensors (valid because flips and
    shifts commute with per-pixel color conversions).
    """
    n, _, h, w = planes.shape
    out = np.empty_like(planes)
    py = int(np.max(np.abs(dys))) if n else 0
    px = int(np.max(np.abs(dxs))) if n else 0
    for i in range(n):
        img = planes[i, :, :, ::-1] if flips[i] else planes[i]
        dy, dx = int(dys[i]), int(dxs[i])
        if dy or dx:
            padded = np.pad(img, ((0, 0), (py, py), (px, px)), mode="edge")
            img = padded[:, py - dy : py - dy + h, px - dx : px - dx + w]
        out[i] = img
    return out


def augment(batch: LabeledBatch, cfg: AugmentationConfig, seed: int) -> LabeledBatch:
    """Per-image random horizontal flip and width/height shift; labels unchanged."""
    if batch.space not in (ColorSpace.SRGB, ColorSpace.RGB_LINEAR):
        raise UsageError(f"augment expects SRGB or RGB_LINEAR images, got {batch.space.name}")
    if not cfg.enabled or len(batch) == 0:
        return batch
    rng = np.random.default_rng(seed)
    flips, dys, dxs = draw_augment_params(rng, len(batch), cfg, batch.planes.shape[2], batch.planes.shape[3])
    return LabeledBatch(spatial_transform(batch.planes, flips, dys, dxs), batch.labels, batch.space)


def batch_index_plan(n: int, batch_size: int, shuffle_seed: int) -> list[np.ndarray]:
    """Deterministically shuffled index batches; the last partial batch is kept."""
    if batch_size < 1:
        raise UsageError("batch_size must be >= 1")
    order = np.random.default_rng(shuffle_seed).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def batches(data, batch_size: int, shuffle_seed: int) -> Iterator[LabeledBatch]:
    """Yield shuffled mini-batches from a split's training data (or any batch)."""
    source = data.train if isinstance(data, DatasetSplit) else data
    for idx in batch_index_plan(len(source), batch_size, shuffle_seed):
        yield source.subset(idx)
