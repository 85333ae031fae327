"""Color-space conversion engine and multi-branch CNN classification pipeline."""

__version__ = "0.1.0"

from .colorspace import (
    ChannelStats,
    ColorSpace,
    ConversionMatrix,
    PlanarImage,
    convert,
    convert_batch,
    normalize_for_network,
)
from .dataset import (
    AugmentationConfig,
    DatasetSplit,
    LabeledBatch,
    augment,
    batches,
    load_cifar10,
    load_cifar100,
    load_subset,
    synth_colorsep,
)
from .network import BranchModel, TrainConfig, load_checkpoint, predict_scores, save_checkpoint, train_branch
from .fusion import (
    DEFAULT_BRANCH_SPACES,
    FusionKind,
    FusionModel,
    ablate_subsets,
    average_fusion,
    fused_scores,
    train_all_branches,
    train_fusion_head,
)
from .analytics import ConfusionMatrix, EvalReport, branch_disagreement, confusion, cross_space_class_deltas

__all__ = [name for name in dir() if not name.startswith("_")]
