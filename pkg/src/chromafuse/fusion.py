"""Multi-branch orchestration and score fusion.

A fusion model holds one trained CNN per color space plus a head that
combines per-branch class probabilities: either a plain average or a dense
layer trained on held-out data with the branches frozen.  Early fusion
(channel-stacking all converted spaces into one wide network) is provided
for comparison experiments.
"""

from __future__ import annotations

import enum
import hashlib
import time
from concurrent.futures import ThreadPoolExecutor
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .colorspace import (
    ChannelStats,
    ColorSpace,
    PlanarImage,
    convert_array,
    normalize_array,
)
from .dataset import DatasetSplit, LabeledBatch, batch_index_plan, carve_holdout
from .errors import ChromafuseError, UsageError
from .layers import Param, softmax, softmax_cross_entropy
from .network import (
    BranchModel,
    EpochLog,
    OptimizerState,
    TrainConfig,
    _train_network,
    predict_scores,
    prepare_tensors,
    sgd_nesterov_step,
)

#: Branch set used by default for late fusion.
DEFAULT_BRANCH_SPACES = (
    ColorSpace.RGB_LINEAR,
    ColorSpace.LAB,
    ColorSpace.HSV,
    ColorSpace.YUV,
    ColorSpace.YCBCR,
    ColorSpace.HED,
    ColorSpace.YIQ,
)


class FusionKind(enum.Enum):
    AVERAGE = "average"
    WEIGHTED_DENSE = "weighted"


@dataclass(frozen=True)
class FusionHead:
    kind: FusionKind
    spaces: tuple[ColorSpace, ...]
    weight: np.ndarray | None = None  # (K, n_branches * K)
    bias: np.ndarray | None = None  # (K,)

    def __post_init__(self):
        if self.kind is FusionKind.WEIGHTED_DENSE and (self.weight is None or self.bias is None):
            raise UsageError("weighted head needs weight and bias")


@dataclass
class FusionModel:
    branches: dict[ColorSpace, BranchModel]
    head: FusionHead

    def __post_init__(self):
        if not self.branches:
            raise UsageError("fusion model needs at least one branch")
        classes = {b.num_classes for b in self.branches.values()}
        if len(classes) != 1:
            raise UsageError("branches disagree on num_classes")
        if set(self.head.spaces) != set(self.branches):
            raise UsageError("head spaces do not match branch set")

    @property
    def spaces(self) -> tuple[ColorSpace, ...]:
        return self.head.spaces

    @property
    def num_classes(self) -> int:
        return next(iter(self.branches.values())).num_classes

    def param_count(self) -> int:
        n = sum(b.param_count() for b in self.branches.values())
        if self.head.weight is not None:
            n += self.head.weight.size + self.head.bias.size
        return int(n)


def branch_seed(master_seed: int, space: ColorSpace) -> int:
    """Derive a decorrelated per-branch seed from the master seed."""
    digest = hashlib.sha256(f"{master_seed}:{space.name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def train_all_branches(split: DatasetSplit, spaces: Sequence[ColorSpace], cfg: TrainConfig, *,
                       jobs: int = 1) -> tuple[FusionModel, dict[ColorSpace, list[EpochLog]]]:
    """Train one branch per space with per-branch derived seeds.

    Branches are independent; with ``jobs > 1`` they train concurrently.
    The returned model carries an untrained AVERAGE head.
    """
    spaces = tuple(spaces)
    if not spaces:
        raise UsageError("spaces must be nonempty")
    for space in spaces:  # prime the stats cache before any worker threads start
        split.stats_for(space)

    def run(space: ColorSpace):
        try:
            from .network import train_branch

            return train_branch(space, split, replace_seed(cfg, branch_seed(cfg.seed, space)))
        except ChromafuseError as exc:
            raise type(exc)(f"[{space.name} branch] {exc}") from exc

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, spaces))
    else:
        results = [run(s) for s in spaces]
    branches = {space: model for space, (model, _) in zip(spaces, results)}
    logs = {space: log for space, (_, log) in zip(spaces, results)}
    return FusionModel(branches, FusionHead(FusionKind.AVERAGE, spaces)), logs


def replace_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    from dataclasses import replace

    return replace(cfg, seed=seed)


# ---------------------------------------------------------------------------
# Inference-time fusion.
# ---------------------------------------------------------------------------

def branch_probabilities(model: FusionModel, batch: LabeledBatch) -> list[np.ndarray]:
    """Per-branch softmax scores for an sRGB batch, in head-space order."""
    if batch.space is not ColorSpace.SRGB:
        raise UsageError(f"fusion inference expects SRGB input, got {batch.space.name}")
    out = []
    stacked = np.moveaxis(batch.planes, 1, 0)  # (C, N, H, W)
    for space in model.spaces:
        branch = model.branches[space]
        if branch.stats is None:
            raise UsageError(f"{space.name} branch has no normalization stats")
        converted = np.moveaxis(convert_array(stacked, space), 0, 1)
        normalized = normalize_array(converted, branch.stats, channel_axis=1).astype(np.float32)
        out.append(predict_scores(branch, normalized))
    return out


def average_fusion(scores: Sequence[np.ndarray]) -> np.ndarray:
    """Arithmetic mean of per-branch score matrices (rows stay on the simplex)."""
    scores = [np.asarray(s, dtype=np.float64) for s in scores]
    if not scores:
        raise UsageError("no score matrices to fuse")
    if len({s.shape for s in scores}) != 1:
        raise UsageError(f"score shapes differ: {[s.shape for s in scores]}")
    return np.mean(scores, axis=0)


def identity_head(spaces: Sequence[ColorSpace], num_classes: int) -> FusionHead:
    """Weighted head initialized to identity blocks: equals average fusion."""
    spaces = tuple(spaces)
    k, n = num_classes, len(spaces)
    weight = np.hstack([np.eye(k) / n for _ in range(n)])
    return FusionHead(FusionKind.WEIGHTED_DENSE, spaces, weight, np.zeros(k))


def fused_scores(model: FusionModel, batch: LabeledBatch) -> np.ndarray:
    """Final class probabilities for an sRGB batch under the model's head."""
    per_branch = branch_probabilities(model, batch)
    if model.head.kind is FusionKind.AVERAGE:
        return average_fusion(per_branch)
    logits = np.hstack(per_branch) @ model.head.weight.T + model.head.bias
    return softmax(logits)


@dataclass(frozen=True)
class HeadConfig:
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0


def train_fusion_head(model: FusionModel, heldout: LabeledBatch, head_cfg: HeadConfig = HeadConfig()) -> FusionModel:
    """Train a weighted dense head on held-out data; branches stay frozen.

    Branch parameters are never touched: only per-branch probabilities are
    computed, and the head is optimized with softmax cross-entropy and
    Nesterov SGD starting from the identity-averaging initialization.
    """
    if len(heldout) == 0:
        raise UsageError("held-out set for head training is empty")
    features = np.hstack(branch_probabilities(model, heldout))  # (N, n*K)
    labels = heldout.labels
    k = model.num_classes
    init = identity_head(model.spaces, k)
    w = Param("head.w", init.weight.copy())
    b = Param("head.b", init.bias.copy(), decay=False)
    state = OptimizerState(momentum=head_cfg.momentum, weight_decay=head_cfg.weight_decay)
    rng = np.random.default_rng(head_cfg.seed)
    for _ in range(head_cfg.epochs):
        epoch_seed = int(rng.integers(0, 2**63))
        for idx in batch_index_plan(len(heldout), head_cfg.batch_size, epoch_seed):
            logits = features[idx] @ w.value.T + b.value
            _, dlogits = softmax_cross_entropy(logits, labels[idx])
            w.grad = dlogits.T @ features[idx]
            b.grad = dlogits.sum(axis=0)
            sgd_nesterov_step([w, b], state, head_cfg.learning_rate)
    head = FusionHead(FusionKind.WEIGHTED_DENSE, model.spaces, w.value, b.value)
    return FusionModel(dict(model.branches), head)


# ---------------------------------------------------------------------------
# Early fusion.
# ---------------------------------------------------------------------------

def early_fusion_assemble(img: PlanarImage, spaces: Sequence[ColorSpace],
                          stats: Mapping[ColorSpace, ChannelStats]) -> np.ndarray:
    """Stack converted-and-normalized copies of one sRGB image channel-wise."""
    if img.space is not ColorSpace.SRGB:
        raise UsageError(f"early fusion assembles sRGB input, got {img.space.name}")
    spaces = tuple(spaces)
    if not spaces:
        raise UsageError("spaces must be nonempty")
    parts = [
        normalize_array(convert_array(img.planes, space), stats[space])
        for space in spaces
    ]
    return np.concatenate(parts, axis=0)


def assemble_early_batch(planes: np.ndarray, spaces: Sequence[ColorSpace],
                         stats: Mapping[ColorSpace, ChannelStats]) -> np.ndarray:
    stacked = np.moveaxis(planes, 1, 0)
    parts = [
        normalize_array(np.moveaxis(convert_array(stacked, space), 0, 1), stats[space], channel_axis=1)
        for space in spaces
    ]
    return np.concatenate(parts, axis=1).astype(np.float32)


@dataclass
class EarlyFusionModel:
    spaces: tuple[ColorSpace, ...]
    stats: dict[ColorSpace, ChannelStats]
    net: BranchModel

    def predict(self, batch: LabeledBatch) -> np.ndarray:
        if batch.space is not ColorSpace.SRGB:
            raise UsageError("early fusion inference expects SRGB input")
        x = assemble_early_batch(batch.planes, self.spaces, self.stats)
        return softmax(self.net.predict_logits(x).astype(np.float64))

    def param_count(self) -> int:
        return self.net.param_count()


def train_early_fusion(split: DatasetSplit, spaces: Sequence[ColorSpace], cfg: TrainConfig):
    """Train one widened network on the channel-stacked multi-space input."""
    spaces = tuple(spaces)
    if not spaces:
        raise UsageError("spaces must be nonempty")
    stats = {space: split.stats_for(space) for space in spaces}
    x_train = assemble_early_batch(split.train.planes, spaces, stats)
    x_test = assemble_early_batch(split.test.planes, spaces, stats)
    net = BranchModel.build(
        ColorSpace.SRGB,  # input arrives as raw sRGB batches and is assembled internally
        split.num_classes,
        x_train.shape[2:],
        in_channels=x_train.shape[1],
        seed=cfg.seed,
        dropout_rate=cfg.resolved_dropout,
    )
    logs = _train_network(net, x_train, split.train.labels, x_test, split.test.labels, cfg)
    return EarlyFusionModel(spaces, stats, net), logs


# ---------------------------------------------------------------------------
# Ablation over space subsets.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AblationRow:
    subset: tuple[str, ...]
    fusion_kind: str
    accuracy: float
    params: int
    wall_time: float


@dataclass
class AblationTable:
    rows: list[AblationRow] = field(default_factory=list)

    def to_json_obj(self) -> list[dict]:
        return [
            {
                "subset": "+".join(r.subset),
                "fusion_kind": r.fusion_kind,
                "accuracy": r.accuracy,
                "params": r.params,
                "wall_time": r.wall_time,
            }
            for r in self.rows
        ]

    def to_csv(self) -> str:
        lines = ["subset,fusion_kind,accuracy,params,wall_time"]
        for r in self.rows:
            lines.append(f"{'+'.join(r.subset)},{r.fusion_kind},{r.accuracy:.6f},{r.params},{r.wall_time:.3f}")
        return "\n".join(lines) + "\n"


def ablate_subsets(split: DatasetSplit, subsets: Sequence[Sequence[ColorSpace]], cfg: TrainConfig, *,
                   kinds: Sequence[FusionKind] = (FusionKind.AVERAGE,), include_early: bool = False,
                   head_cfg: HeadConfig = HeadConfig(), holdout_fraction: float = 0.1,
                   jobs: int = 1) -> AblationTable:
    """Evaluate fusion over each space subset, training every branch once.

    When a weighted head is requested, a stratified fraction of the training
    split is held out for head training and all branches (for every kind)
    train on the remainder, so cached branches stay shared across kinds.
    """
    subsets = [tuple(s) for s in subsets]
    if not subsets:
        raise UsageError("subsets must be nonempty")
    kinds = tuple(kinds)
    needs_holdout = FusionKind.WEIGHTED_DENSE in kinds
    if needs_holdout:
        branch_split, heldout = carve_holdout(split, holdout_fraction, cfg.seed)
    else:
        branch_split, heldout = split, None

    cache: dict[ColorSpace, tuple[BranchModel, float]] = {}

    def branch_for(space: ColorSpace) -> tuple[BranchModel, float]:
        if space not in cache:
            t0 = time.perf_counter()
            from .network import train_branch

            model, _ = train_branch(space, branch_split, replace_seed(cfg, branch_seed(cfg.seed, space)))
            cache[space] = (model, time.perf_counter() - t0)
        return cache[space]

    unique_spaces = list(dict.fromkeys(s for subset in subsets for s in subset))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(branch_for, unique_spaces))
    else:
        for space in unique_spaces:
            branch_for(space)

    table = AblationTable()
    for subset in subsets:
        branches = {space: branch_for(space)[0] for space in subset}
        train_time = sum(branch_for(space)[1] for space in subset)
        for kind in kinds:
            model = FusionModel(branches, FusionHead(FusionKind.AVERAGE, subset))
            t0 = time.perf_counter()
            if kind is FusionKind.WEIGHTED_DENSE:
                model = train_fusion_head(model, heldout, head_cfg)
            scores = fused_scores(model, split.test)
            acc = float(np.mean(scores.argmax(axis=1) == split.test.labels))
            table.rows.append(AblationRow(
                tuple(s.name for s in subset), kind.value, acc, model.param_count(),
                train_time + (time.perf_counter() - t0),
            ))
        if include_early:
            t0 = time.perf_counter()
            early_seed = int.from_bytes(
                hashlib.sha256(f"{cfg.seed}:early:{'+'.join(s.name for s in subset)}".encode()).digest()[:8],
                "little",
            )
            early, _ = train_early_fusion(branch_split, subset, replace_seed(cfg, early_seed))
            scores = early.predict(split.test)
            acc = float(np.mean(scores.argmax(axis=1) == split.test.labels))
            table.rows.append(AblationRow(
                tuple(s.name for s in subset), "early", acc, early.param_count(),
                time.perf_counter() - t0,
            ))
    return table
