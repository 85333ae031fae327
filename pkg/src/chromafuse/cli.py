"""Command-line entry point: convert, train, evaluate, ablate, report.

Every run writes its fully resolved configuration (defaults < config file <
flags), the tool version, and a content hash of the dataset next to its
outputs, so any reported number can be reproduced from the run directory
alone.  Exit codes: 0 success, 2 usage error, 3 data/IO error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .analytics import EvalReport, evaluate_scores
from .colorspace import ColorSpace, convert_array
from .dataset import DatasetSplit, carve_holdout, fingerprint, load_cifar10, load_cifar100, load_subset, synth_colorsep
from .errors import DataError, NumericError, UsageError
from .fusion import (
    DEFAULT_BRANCH_SPACES,
    FusionHead,
    FusionKind,
    FusionModel,
    HeadConfig,
    ablate_subsets,
    fused_scores,
    train_all_branches,
    train_fusion_head,
)
from .network import TrainConfig, load_checkpoint, predict_scores, save_checkpoint
from .dataset import AugmentationConfig

OUTPUT_DIR_ENV = "CHROMAFUSE_OUTPUT_DIR"

_SPACE_ALIASES = {"RGB": ColorSpace.RGB_LINEAR}


def parse_space(name: str) -> ColorSpace:
    key = name.strip().upper()
    if key in _SPACE_ALIASES:
        return _SPACE_ALIASES[key]
    try:
        return ColorSpace[key]
    except KeyError:
        raise UsageError(f"unknown color space {name!r}; choices: "
                         f"{', '.join(s.name for s in ColorSpace)}") from None


def parse_spaces(text: str) -> tuple[ColorSpace, ...]:
    return tuple(parse_space(tok) for tok in text.split(",") if tok.strip())


def output_dir(args) -> Path:
    base = args.output_dir or os.environ.get(OUTPUT_DIR_ENV) or "runs"
    path = Path(base)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# Dataset loading from a "kind:arg" spec.
# ---------------------------------------------------------------------------

def load_dataset(spec: str, *, train_n: int = 0, test_n: int = 0, subset_seed: int = 0,
                 synth_size: int = 16, synth_test_per_class: int | None = None) -> DatasetSplit:
    if ":" not in spec:
        raise UsageError(f"dataset spec must be kind:arg, got {spec!r}")
    kind, arg = spec.split(":", 1)
    if kind == "cifar10":
        split = load_cifar10(arg)
    elif kind == "cifar100":
        split = load_cifar100(arg)
    elif kind == "synth":
        split = synth_colorsep(int(arg), subset_seed, test_per_class=synth_test_per_class, size=synth_size)
    else:
        raise UsageError(f"unknown dataset kind {kind!r} (expected cifar10, cifar100, or synth)")
    if train_n or test_n:
        split = load_subset(split, train_n or len(split.train), test_n or len(split.test), subset_seed)
    return split


# ---------------------------------------------------------------------------
# Config resolution: defaults < config file < explicit CLI flags.
# ---------------------------------------------------------------------------

TRAIN_DEFAULTS = {
    "dataset": None,
    "train_n": 0,
    "test_n": 0,
    "synth_size": 16,
    "synth_test_per_class": None,
    "spaces": ",".join(s.name for s in DEFAULT_BRANCH_SPACES),
    "fusion": "average",
    "epochs": 20,
    "batch_size": 32,
    "learning_rate": 0.1,
    "lr_milestones": [0.25, 0.5],
    "momentum": 0.9,
    "weight_decay": 1e-4,
    "dropout_rate": None,
    "augment": False,
    "flip_probability": 0.5,
    "shift_fraction": 0.125,
    "holdout_fraction": 0.1,
    "head_epochs": 200,
    "seed": 0,
    "jobs": 1,
}


def resolve_config(args, defaults: dict) -> dict:
    resolved = dict(defaults)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise DataError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"config file {path}: {exc}") from exc
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        resolved.update(loaded)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    problems = validate_train_config(resolved)
    if problems:
        raise UsageError("invalid configuration: " + "; ".join(problems))
    return resolved


def validate_train_config(cfg: dict) -> list[str]:
    """Collect every violated field instead of stopping at the first."""
    problems = []
    if not cfg.get("dataset"):
        problems.append("dataset: required (kind:arg)")
    for key in ("epochs", "batch_size", "jobs"):
        if int(cfg[key]) < 1:
            problems.append(f"{key}: must be >= 1")
    if not 0.0 < float(cfg["learning_rate"]):
        problems.append("learning_rate: must be positive")
    ms = [float(m) for m in cfg["lr_milestones"]]
    if any(not 0.0 < m < 1.0 for m in ms) or ms != sorted(set(ms)):
        problems.append("lr_milestones: strictly increasing fractions in (0, 1)")
    if cfg["dropout_rate"] is not None and not 0.0 <= float(cfg["dropout_rate"]) < 1.0:
        problems.append("dropout_rate: must be in [0, 1) or null")
    if not 0.0 <= float(cfg["flip_probability"]) <= 1.0:
        problems.append("flip_probability: must be in [0, 1]")
    if not 0.0 <= float(cfg["shift_fraction"]) <= 0.5:
        problems.append("shift_fraction: must be in [0, 0.5]")
    if not 0.0 < float(cfg["holdout_fraction"]) < 1.0:
        problems.append("holdout_fraction: must be in (0, 1)")
    if cfg["fusion"] not in ("average", "weighted", "none"):
        problems.append("fusion: one of average, weighted, none")
    return problems


def train_config_from(resolved: dict, seed: int | None = None) -> TrainConfig:
    return TrainConfig(
        epochs=int(resolved["epochs"]),
        batch_size=int(resolved["batch_size"]),
        learning_rate=float(resolved["learning_rate"]),
        lr_milestones=tuple(float(m) for m in resolved["lr_milestones"]),
        momentum=float(resolved["momentum"]),
        weight_decay=float(resolved["weight_decay"]),
        dropout_rate=None if resolved["dropout_rate"] is None else float(resolved["dropout_rate"]),
        augment=bool(resolved["augment"]),
        augmentation=AugmentationConfig(
            horizontal_flip=float(resolved["flip_probability"]),
            shift_fraction=float(resolved["shift_fraction"]),
            enabled=bool(resolved["augment"]),
        ),
        seed=int(resolved["seed"] if seed is None else seed),
    )


def write_run_metadata(run_dir: Path, subcommand: str, resolved: dict, split: DatasetSplit) -> None:
    payload = {
        "subcommand": subcommand,
        "tool_version": __version__,
        "dataset_fingerprint": fingerprint(split),
        "config": resolved,
    }
    (run_dir / "config.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# convert
# ---------------------------------------------------------------------------

def _read_planar(path: Path):
    if path.suffix == ".bin":
        from .dataset import _parse_cifar_records

        pixels, _ = _parse_cifar_records(path.read_bytes(), path, 1, 10)
        return pixels, ColorSpace.SRGB
    if path.suffix == ".npz":
        with np.load(path, allow_pickle=False) as data:
            if "planes" not in data or "space" not in data:
                raise DataError(f"{path}: planar container needs 'planes' and 'space' entries")
            planes = np.asarray(data["planes"], dtype=np.float64)
            space = parse_space(str(data["space"]))
        if planes.ndim == 3:
            planes = planes[None]
        if planes.ndim != 4:
            raise DataError(f"{path}: planes must be (C,H,W) or (N,C,H,W), got {planes.shape}")
        return planes, space
    raise UsageError(f"unsupported input format {path.suffix!r} (expected .bin or .npz)")


def cmd_convert(args) -> int:
    target = parse_space(args.to)
    in_path = Path(args.input)
    if not in_path.is_file():
        raise DataError(f"input file not found: {in_path}")
    planes, space = _read_planar(in_path)
    if space is target:
        out = planes
    elif space is ColorSpace.SRGB:
        out = np.moveaxis(convert_array(np.moveaxis(planes, 1, 0), target), 0, 1)
    else:
        raise UsageError(f"input is {space.name}; only SRGB inputs can be converted (target {target.name})")
    out_path = Path(args.output)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(out_path, planes=out, space=target.name)
    for c in range(out.shape[1]):
        print(f"channel {c}: min={out[:, c].min():.6f} max={out[:, c].max():.6f}")
    return 0


# ---------------------------------------------------------------------------
# train / evaluate
# ---------------------------------------------------------------------------

def _load_from_args(resolved: dict) -> DatasetSplit:
    return load_dataset(
        resolved["dataset"],
        train_n=int(resolved.get("train_n") or 0),
        test_n=int(resolved.get("test_n") or 0),
        subset_seed=int(resolved["seed"]),
        synth_size=int(resolved.get("synth_size") or 16),
        synth_test_per_class=resolved.get("synth_test_per_class"),
    )


def save_fusion(model: FusionModel, run_dir: Path, schedule: dict) -> None:
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    for space in model.spaces:
        save_checkpoint(model.branches[space], ckpt_dir / f"branch_{space.name}.ckpt", schedule)
    head = {
        "version": 1,
        "kind": "fusion_head",
        "fusion": model.head.kind.value,
        "spaces": [s.name for s in model.spaces],
        "weight": None if model.head.weight is None else model.head.weight.tolist(),
        "bias": None if model.head.bias is None else model.head.bias.tolist(),
    }
    (run_dir / "head.json").write_text(json.dumps(head, sort_keys=True, indent=2) + "\n")


def load_fusion(run_dir: Path) -> FusionModel:
    head_path = run_dir / "head.json"
    if not head_path.is_file():
        raise DataError(f"{run_dir}: missing head.json")
    head_obj = json.loads(head_path.read_text())
    if head_obj.get("version") != 1:
        raise DataError(f"{head_path}: unsupported head version {head_obj.get('version')}")
    spaces = tuple(ColorSpace[name] for name in head_obj["spaces"])
    branches = {}
    for space in spaces:
        path = run_dir / "checkpoints" / f"branch_{space.name}.ckpt"
        if not path.is_file():
            raise DataError(f"missing branch checkpoint: {path}")
        branches[space] = load_checkpoint(path)
    if head_obj["fusion"] == FusionKind.WEIGHTED_DENSE.value:
        head = FusionHead(FusionKind.WEIGHTED_DENSE, spaces,
                          np.asarray(head_obj["weight"]), np.asarray(head_obj["bias"]))
    else:
        head = FusionHead(FusionKind.AVERAGE, spaces)
    return FusionModel(branches, head)


def cmd_train(args) -> int:
    resolved = resolve_config(args, TRAIN_DEFAULTS)
    run_dir = output_dir(args)
    split = _load_from_args(resolved)
    spaces = parse_spaces(resolved["spaces"])
    cfg = train_config_from(resolved)
    schedule = {
        "learning_rate": resolved["learning_rate"],
        "lr_milestones": list(resolved["lr_milestones"]),
        "epochs": resolved["epochs"],
    }
    if resolved["fusion"] == "weighted":
        branch_split, heldout = carve_holdout(split, float(resolved["holdout_fraction"]), cfg.seed)
    else:
        branch_split, heldout = split, None
    model, logs = train_all_branches(branch_split, spaces, cfg, jobs=int(resolved["jobs"]))
    if resolved["fusion"] == "weighted":
        model = train_fusion_head(model, heldout, HeadConfig(epochs=int(resolved["head_epochs"]), seed=cfg.seed))
    write_run_metadata(run_dir, "train", resolved, split)
    save_fusion(model, run_dir, schedule)
    log_dir = run_dir / "logs"
    log_dir.mkdir(exist_ok=True)
    for space, entries in logs.items():
        lines = [
            json.dumps({"epoch": e.epoch, "lr": e.lr, "train_loss": e.train_loss,
                        "test_accuracy": e.test_accuracy}, sort_keys=True)
            for e in entries
        ]
        (log_dir / f"{space.name}.jsonl").write_text("\n".join(lines) + "\n")
    print(f"trained {len(spaces)} branch(es); run directory: {run_dir}")
    return 0


def _evaluate_checkpoint(path: Path, split: DatasetSplit, identifier: str | None):
    t0 = time.perf_counter()
    if path.is_dir():
        model = load_fusion(path)
        scores = fused_scores(model, split.test)
        name = identifier or "+".join(s.name for s in model.spaces)
        params = model.param_count()
    else:
        branch = load_checkpoint(path)
        if branch.stats is None:
            raise DataError(f"{path}: checkpoint has no normalization stats")
        from .colorspace import normalize_array

        stacked = np.moveaxis(split.test.planes, 1, 0)
        converted = np.moveaxis(convert_array(stacked, branch.space), 0, 1)
        scores = predict_scores(branch, normalize_array(converted, branch.stats, channel_axis=1).astype(np.float32))
        name = identifier or branch.space.name
        params = branch.param_count()
    return evaluate_scores(name, split.test.labels, scores, split.num_classes,
                           wall_time=time.perf_counter() - t0, param_count=params)


def cmd_evaluate(args) -> int:
    split = load_dataset(args.dataset, train_n=args.train_n or 0, test_n=args.test_n or 0,
                         subset_seed=args.seed or 0)
    report = _evaluate_checkpoint(Path(args.checkpoint), split, args.identifier)
    out = output_dir(args)
    (out / "report.json").write_text(report.to_json())
    (out / "report.csv").write_text(report.csv_header() + "\n" + report.to_csv_row() + "\n")
    (out / "confusion.txt").write_text(report.confusion.to_text_grid())
    print(f"{report.identifier}: accuracy={report.accuracy:.4f}")
    return 0


# ---------------------------------------------------------------------------
# ablate / report
# ---------------------------------------------------------------------------

def cmd_ablate(args) -> int:
    resolved = resolve_config(args, {**TRAIN_DEFAULTS, "subsets": None, "kinds": "average", "early": False})
    if not resolved["subsets"]:
        raise UsageError("--subsets is required (e.g. 'RGB;HSV;RGB+HSV')")
    run_dir = output_dir(args)
    split = _load_from_args(resolved)
    subsets = [parse_spaces(part.replace("+", ",")) for part in str(resolved["subsets"]).split(";") if part.strip()]
    kinds = []
    for token in str(resolved["kinds"]).split(","):
        token = token.strip()
        if not token:
            continue
        try:
            kinds.append(FusionKind(token))
        except ValueError:
            raise UsageError(f"unknown fusion kind {token!r} (average, weighted)") from None
    cfg = train_config_from(resolved)
    table = ablate_subsets(split, subsets, cfg, kinds=kinds, include_early=bool(resolved["early"]),
                           head_cfg=HeadConfig(epochs=int(resolved["head_epochs"]), seed=cfg.seed),
                           holdout_fraction=float(resolved["holdout_fraction"]), jobs=int(resolved["jobs"]))
    write_run_metadata(run_dir, "ablate", resolved, split)
    (run_dir / "ablation.csv").write_text(table.to_csv())
    (run_dir / "ablation.json").write_text(json.dumps(table.to_json_obj(), sort_keys=True, indent=2) + "\n")
    print(table.to_csv(), end="")
    return 0


def cmd_report(args) -> int:
    root = Path(args.run_dir)
    if not root.is_dir():
        raise DataError(f"run directory not found: {root}")
    reports = []
    for path in sorted(root.rglob("report.json")):
        reports.append(EvalReport.from_json_obj(json.loads(path.read_text())))
    out = output_dir(args)
    rows = [EvalReport.csv_header()] + [r.to_csv_row() for r in reports]
    (out / "summary.csv").write_text("\n".join(rows) + "\n")
    (out / "summary.json").write_text(
        json.dumps([r.to_json_obj() for r in reports], sort_keys=True, indent=2) + "\n"
    )
    print(f"aggregated {len(reports)} report(s) into {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser.
# ---------------------------------------------------------------------------

def _add_dataset_flags(p):
    p.add_argument("--dataset", help="dataset spec: cifar10:DIR, cifar100:DIR, or synth:N_PER_CLASS")
    p.add_argument("--train-n", dest="train_n", type=int, help="stratified train subset size (0 = all)")
    p.add_argument("--test-n", dest="test_n", type=int, help="stratified test subset size (0 = all)")
    p.add_argument("--synth-size", dest="synth_size", type=int, help="synthetic image edge length")
    p.add_argument("--synth-test-per-class", dest="synth_test_per_class", type=int,
                   help="synthetic test images per class")


def _add_train_flags(p):
    p.add_argument("--config", help="JSON config file (flags override file values)")
    p.add_argument("--spaces", help="comma-separated color spaces (RGB is an alias for RGB_LINEAR)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--lr-milestones", dest="lr_milestones", type=lambda s: [float(x) for x in s.split(",")],
                   help="fractions of the epoch budget at which LR divides by 10")
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--dropout-rate", dest="dropout_rate", type=float,
                   help="dropout rate; omitted: 0.2 without augmentation, 0 with")
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--flip-probability", dest="flip_probability", type=float)
    p.add_argument("--shift-fraction", dest="shift_fraction", type=float)
    p.add_argument("--holdout-fraction", dest="holdout_fraction", type=float)
    p.add_argument("--head-epochs", dest="head_epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, help="max concurrent branch trainings")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chromafuse",
        description="Color-space conversion engine and multi-branch CNN classification pipeline.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("convert", help="convert a planar container or CIFAR batch file")
    p.add_argument("input", help="input file: .npz planar container or CIFAR .bin batch")
    p.add_argument("--to", required=True, help="target color space")
    p.add_argument("--output", required=True, help="output .npz path")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("train", help="train per-space branches and a fusion head")
    _add_dataset_flags(p)
    _add_train_flags(p)
    p.add_argument("--fusion", choices=["average", "weighted", "none"])
    p.add_argument("--output-dir", dest="output_dir", help=f"run directory (or ${OUTPUT_DIR_ENV})")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint (file) or fusion run (directory)")
    p.add_argument("checkpoint")
    p.add_argument("--dataset", required=True)
    p.add_argument("--train-n", dest="train_n", type=int, default=0)
    p.add_argument("--test-n", dest="test_n", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--identifier", help="identifier used in the report")
    p.add_argument("--output-dir", dest="output_dir")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="compare fusion over subsets of color spaces")
    _add_dataset_flags(p)
    _add_train_flags(p)
    p.add_argument("--subsets", help="semicolon-separated subsets, spaces joined by '+', e.g. 'RGB;RGB+HSV'")
    p.add_argument("--kinds", help="comma-separated fusion kinds: average, weighted")
    p.add_argument("--early", action=argparse.BooleanOptionalAction, default=None,
                   help="additionally train an early-fusion model per subset")
    p.add_argument("--output-dir", dest="output_dir")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="aggregate all EvalReports under a run directory")
    p.add_argument("run_dir")
    p.add_argument("--output-dir", dest="output_dir")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
