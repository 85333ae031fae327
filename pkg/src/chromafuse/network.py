"""Compact per-color-space CNN: topology, optimizer, training, checkpoints.

The branch network is conv3x3(32)-relu-conv3x3(32)-relu-pool-dropout-
conv3x3(64)-relu-conv3x3(64)-relu-pool-dropout-flatten-dense(K).  Training
uses SGD with Nesterov momentum 0.9, weight decay 1e-4 (never on biases),
and a step learning-rate schedule that divides by 10 at fixed fractions of
the epoch budget.  Given a seed, training is bit-deterministic on a single
thread.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .colorspace import ChannelStats, ColorSpace, convert_array, normalize_array
from .dataset import (
    AugmentationConfig,
    DatasetSplit,
    LabeledBatch,
    batch_index_plan,
    draw_augment_params,
    spatial_transform,
)
from .errors import DataError, NumericError, UsageError
from .layers import Conv2d, Dense, Dropout, Flatten, Layer, MaxPool2d, Param, ReLU, softmax, softmax_cross_entropy

CHECKPOINT_VERSION = 1
_CHECKPOINT_MAGIC = b"CHROMAF1"

#: Filter widths of the two convolution stages.
CONV_WIDTHS = (32, 64)


@dataclass(frozen=True)
class TrainConfig:
    """Reproducible training protocol for one branch."""

    epochs: int
    batch_size: int = 32
    learning_rate: float = 0.1
    lr_milestones: tuple[float, ...] = (0.25, 0.5)
    momentum: float = 0.9
    weight_decay: float = 1e-4
    dropout_rate: float | None = None  # None: 0.2 without augmentation, 0.0 with
    augment: bool = False
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise UsageError("epochs must be >= 1")
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        ms = tuple(float(m) for m in self.lr_milestones)
        object.__setattr__(self, "lr_milestones", ms)
        if any(not 0.0 < m < 1.0 for m in ms) or list(ms) != sorted(set(ms)):
            raise UsageError("lr_milestones must be strictly increasing fractions in (0, 1)")

    @property
    def resolved_dropout(self) -> float:
        if self.dropout_rate is not None:
            return self.dropout_rate
        return 0.0 if self.augment else 0.2

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch index under the milestone schedule."""
        drops = sum(epoch >= int(np.floor(m * self.epochs)) for m in self.lr_milestones)
        return self.learning_rate / (10.0**drops)


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    test_accuracy: float


class BranchModel:
    """One compact CNN bound to a color space."""

    def __init__(self, space: ColorSpace, num_classes: int, image_hw: tuple[int, int],
                 in_channels: int, rng_seed: int, dropout_rate: float, layers: list[Layer],
                 stats: ChannelStats | None = None):
        self.space = space
        self.num_classes = num_classes
        self.image_hw = tuple(image_hw)
        self.in_channels = in_channels
        self.rng_seed = rng_seed
        self.dropout_rate = dropout_rate
        self.layers = layers
        self.stats = stats

    @classmethod
    def build(cls, space: ColorSpace, num_classes: int, image_hw: tuple[int, int], *,
              in_channels: int | None = None, seed: int = 0, dropout_rate: float = 0.2,
              dtype=np.float32) -> "BranchModel":
        h, w = image_hw
        if h % 4 or w % 4:
            raise UsageError(f"image size must be divisible by 4 for two pooling stages, got {h}x{w}")
        if in_channels is None:
            in_channels = space.channels
        rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
        c1, c2 = CONV_WIDTHS
        layers: list[Layer] = [
            Conv2d("conv1", in_channels, c1, rng=rng, dtype=dtype),
            ReLU("relu1"),
            Conv2d("conv2", c1, c1, rng=rng, dtype=dtype),
            ReLU("relu2"),
            MaxPool2d("pool1"),
            Dropout(dropout_rate, "drop1"),
            Conv2d("conv3", c1, c2, rng=rng, dtype=dtype),
            ReLU("relu3"),
            Conv2d("conv4", c2, c2, rng=rng, dtype=dtype),
            ReLU("relu4"),
            MaxPool2d("pool2"),
            Dropout(dropout_rate, "drop2"),
            Flatten(),
            Dense("dense", c2 * (h // 4) * (w // 4), num_classes, rng=rng, dtype=dtype),
        ]
        return cls(space, num_classes, image_hw, in_channels, seed, dropout_rate, layers)

    def forward(self, x: np.ndarray, *, train: bool = False, rng=None) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, train=train, rng=rng)
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def params(self) -> list[Param]:
        out: list[Param] = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def param_count(self) -> int:
        return int(sum(p.value.size for p in self.params()))

    def predict_logits(self, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
        chunks = [self.forward(x[i : i + batch_size]) for i in range(0, x.shape[0], batch_size)]
        return np.concatenate(chunks) if chunks else np.zeros((0, self.num_classes))


def predict_scores(model: BranchModel, batch) -> np.ndarray:
    """Softmax class probabilities for a normalized batch in the model's space."""
    if isinstance(batch, LabeledBatch):
        if batch.space is not model.space:
            raise UsageError(f"model expects {model.space.name} input, got {batch.space.name}")
        x = batch.planes
    else:
        x = np.asarray(batch)
    logits = model.predict_logits(x.astype(np.float32, copy=False))
    return softmax(logits.astype(np.float64))


# ---------------------------------------------------------------------------
# Optimizer.
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocities: list[np.ndarray] = field(default_factory=list)

    def ensure(self, params: list[Param]) -> None:
        if not self.velocities:
            self.velocities = [np.zeros_like(p.value) for p in params]


def sgd_nesterov_step(params: list[Param], state: OptimizerState, lr: float) -> None:
    """v <- mu v - lr (g + wd p);  p <- p + mu v - lr (g + wd p).

    Weight decay is skipped for parameters flagged as biases.
    """
    state.ensure(params)
    mu = state.momentum
    for p, v in zip(params, state.velocities):
        g = p.grad + state.weight_decay * p.value if (p.decay and state.weight_decay) else p.grad
        v *= mu
        v -= lr * g
        p.value += mu * v - lr * g


# ---------------------------------------------------------------------------
# Training.
# ---------------------------------------------------------------------------

def prepare_tensors(split: DatasetSplit, space: ColorSpace):
    """Convert both splits into `space`, standardize with train-split stats."""
    stats = split.stats_for(space)

    def prep(batch: LabeledBatch) -> np.ndarray:
        converted = convert_array(np.moveaxis(batch.planes, 1, 0), space)
        return normalize_array(np.moveaxis(converted, 0, 1), stats, channel_axis=1).astype(np.float32)

    return prep(split.train), split.train.labels, prep(split.test), split.test.labels, stats


def _train_network(model: BranchModel, x_train, y_train, x_test, y_test, cfg: TrainConfig):
    """Shared training loop; mutates `model` in place and returns the epoch log."""
    ss = np.random.SeedSequence(cfg.seed)
    shuffle_rng, dropout_rng, augment_rng = (np.random.default_rng(c) for c in ss.spawn(3))
    state = OptimizerState(momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    params = model.params()
    logs: list[EpochLog] = []
    n, _, height, width = x_train.shape
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        if cfg.augment and cfg.augmentation.enabled:
            # Spatial flips/shifts commute with the per-pixel conversion and
            # normalization already applied, so augmenting here matches
            # augmenting the raw images before conversion.
            flips, dys, dxs = draw_augment_params(augment_rng, n, cfg.augmentation, height, width)
            x_epoch = spatial_transform(x_train, flips, dys, dxs)
        else:
            x_epoch = x_train
        epoch_seed = int(shuffle_rng.integers(0, 2**63))
        loss_sum = 0.0
        for idx in batch_index_plan(n, cfg.batch_size, epoch_seed):
            logits = model.forward(x_epoch[idx], train=True, rng=dropout_rng)
            loss, dlogits = softmax_cross_entropy(logits, y_train[idx])
            if not np.isfinite(loss):
                raise NumericError(f"training loss diverged (non-finite) at epoch {epoch}")
            model.backward(dlogits)
            sgd_nesterov_step(params, state, lr)
            loss_sum += loss * idx.size
        test_acc = float(np.mean(model.predict_logits(x_test).argmax(axis=1) == y_test)) if len(y_test) else 0.0
        logs.append(EpochLog(epoch, lr, loss_sum / n, test_acc))
    return logs


def train_branch(space: ColorSpace, split: DatasetSplit, cfg: TrainConfig):
    """Train one branch on `split` converted into `space`.

    Returns ``(model, logs)``; deterministic for a fixed config seed.
    """
    x_train, y_train, x_test, y_test, stats = prepare_tensors(split, space)
    model = BranchModel.build(
        space,
        split.num_classes,
        x_train.shape[2:],
        in_channels=space.channels,
        seed=cfg.seed,
        dropout_rate=cfg.resolved_dropout,
    )
    model.stats = stats
    logs = _train_network(model, x_train, y_train, x_test, y_test, cfg)
    return model, logs


# ---------------------------------------------------------------------------
# Checkpoint container: JSON manifest + raw little-endian float32 arrays.
# ---------------------------------------------------------------------------

def _manifest(model: BranchModel, schedule: dict | None) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "kind": "branch",
        "space": model.space.name,
        "num_classes": model.num_classes,
        "image_hw": list(model.image_hw),
        "in_channels": model.in_channels,
        "rng_seed": model.rng_seed,
        "dropout_rate": model.dropout_rate,
        "topology": [
            {"layer": type(l).__name__, "name": l.name} for l in model.layers
        ],
        "schedule": schedule or {},
        "stats": None if model.stats is None else {
            "mean": model.stats.mean.tolist(),
            "std": model.stats.std.tolist(),
        },
        "params": [{"name": p.name, "shape": list(p.value.shape)} for p in model.params()],
    }


def save_checkpoint(model: BranchModel, path, schedule: dict | None = None) -> None:
    manifest = json.dumps(_manifest(model, schedule), sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for p in model.params():
            fh.write(np.ascontiguousarray(p.value, dtype="<f4").tobytes())


def load_checkpoint(path) -> BranchModel:
    raw = Path(path).read_bytes()
    if raw[: len(_CHECKPOINT_MAGIC)] != _CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    off = len(_CHECKPOINT_MAGIC)
    (mlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    manifest = json.loads(raw[off : off + mlen])
    off += mlen
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise DataError(
            f"{path}: checkpoint version {manifest.get('version')} not supported "
            f"(expected {CHECKPOINT_VERSION}); refusing to load"
        )
    model = BranchModel.build(
        ColorSpace[manifest["space"]],
        manifest["num_classes"],
        tuple(manifest["image_hw"]),
        in_channels=manifest["in_channels"],
        seed=manifest["rng_seed"],
        dropout_rate=manifest["dropout_rate"],
    )
    for p, spec in zip(model.params(), manifest["params"]):
        if p.name != spec["name"] or list(p.value.shape) != spec["shape"]:
            raise DataError(f"{path}: parameter layout mismatch at {spec['name']}")
        count = int(np.prod(spec["shape"])) * 4
        if off + count > len(raw):
            raise DataError(f"{path}: truncated parameter data at {spec['name']}")
        p.value = np.frombuffer(raw[off : off + count], dtype="<f4").reshape(spec["shape"]).copy()
        off += count
    if off != len(raw):
        raise DataError(f"{path}: {len(raw) - off} trailing bytes after parameters")
    if manifest["stats"] is not None:
        model.stats = ChannelStats(np.array(manifest["stats"]["mean"]), np.array(manifest["stats"]["std"]))
    return model
