#!/usr/bin/env python3
"""
Command-line surface for the multi-task radiograph pipeline.

Subcommands: synth, validate, rasterize, train, eval, predict, ablate,
stability, roc-export. Every subcommand reads one RunConfig (shipped
defaults, then --config, then CMTNET_* environment variables) and applies
its flags last.

Exit codes: 0 success, 1 validation or precondition failure, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import pathlib
import sys
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from dotenv import load_dotenv
from PIL import Image

# Add project root to Python path so imports work when running script directly
project_root = pathlib.Path(__file__).parent.parent.parent
if str(project_root) not in sys.path:
    sys.path.insert(0, str(project_root))

from src.domain.config import ConfigError, RunConfig, load_run_config, with_overrides
from src.domain.datamodel import Dataset, SplitTag, read_manifest, validate_manifest
from src.domain.evaluation import (
    EvaluationReport,
    covid_scoreset,
    collect_predictions,
    report,
    roc,
    roc_to_csv,
)
from src.domain.ingestion import (
    augment_dataset,
    build_dataset,
    load_image,
    rasterize_manifest,
    split_subject_disjoint,
    stratum_counts,
)
from src.domain.network import CMTNet, forward, init_network
from src.domain.synthetic import generate_synthetic
from src.domain.training import load_checkpoint, save_checkpoint, train

logger = logging.getLogger(__name__)

LUNG_COLOR = (0, 255, 0)
DISEASE_COLOR = (255, 0, 0)
OVERLAY_ALPHA = 0.4

DEFAULT_ABLATION_SUBSETS = ((1, 4), (2, 4), (1, 2, 4), (1, 3, 4), (2, 3, 4), (1, 2, 3, 4))


class ManifestInvalidError(ValueError):
    """Raised when a manifest fails validation."""


################################################################################
# Helpers
################################################################################
def setup_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        force=True,
    )


def parse_tasks(text: str) -> Tuple[int, ...]:
    """Parse "1,2,4" into a sorted tuple of task numbers."""
    try:
        tasks = tuple(sorted({int(t) for t in text.replace(" ", "").split(",") if t}))
    except ValueError:
        raise ValueError(f"Invalid task list: {text!r}")
    if not tasks or any(t not in (1, 2, 3, 4) for t in tasks):
        raise ValueError(f"Tasks must be drawn from 1-4, got {text!r}")
    return tasks


def tasks_to_enable(tasks: Sequence[int]) -> Tuple[bool, bool, bool, bool]:
    return tuple(k in tasks for k in (1, 2, 3, 4))  # type: ignore[return-value]


def parse_subsets(text: Optional[str]) -> List[Tuple[int, ...]]:
    """Parse "1,4;2,4" into validated, de-duplicated task subsets.

    Each subset must contain task 4 and at least one segmentation task.

    Raises:
        ValueError: On any invalid subset.
    """
    if text is None:
        raw = list(DEFAULT_ABLATION_SUBSETS)
    else:
        raw = [parse_tasks(part) for part in text.split(";") if part.strip()]
    if not raw:
        raise ValueError("no task subsets given")

    subsets: List[Tuple[int, ...]] = []
    for subset in raw:
        subset = tuple(sorted(subset))
        if 4 not in subset or not ({1, 2} & set(subset)):
            raise ValueError(f"subset {set(subset)} must include task 4 and at least one of tasks 1 or 2")
        if subset in subsets:
            logger.warning(f"Duplicate subset {set(subset)} ignored")
            continue
        subsets.append(subset)
    return subsets


def parse_seeds(text: str) -> List[int]:
    try:
        seeds = [int(s) for s in text.replace(" ", "").split(",") if s]
    except ValueError:
        raise ValueError(f"Invalid seed list: {text!r}")
    if len(seeds) < 2:
        raise ValueError(f"seed stability needs at least 2 seeds, got {len(seeds)}")
    return seeds


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Load the RunConfig and apply flag overrides."""
    overrides: Dict[str, Dict[str, Any]] = {"network": {}, "train": {}, "data": {}}
    if getattr(args, "seed", None) is not None:
        overrides["train"]["seed"] = args.seed
    if getattr(args, "device", None) is not None:
        overrides["train"]["device"] = args.device
    if getattr(args, "epochs", None) is not None:
        overrides["train"]["epochs"] = args.epochs
    if getattr(args, "tasks", None) is not None:
        overrides["train"]["task_enable"] = tasks_to_enable(parse_tasks(args.tasks))
    if getattr(args, "pretrained", None) is not None:
        overrides["train"]["pretrained_encoder"] = args.pretrained
    if getattr(args, "scale_factor", None) is not None:
        overrides["network"]["scale_factor"] = args.scale_factor
    if getattr(args, "manifest", None) is not None:
        overrides["data"]["manifest"] = str(args.manifest)
    if getattr(args, "split", None) is not None:
        overrides["data"]["eval_split"] = args.split

    config = load_run_config(args.config, overrides={k: v for k, v in overrides.items() if v})
    logger.info(f"Resolved config: {config.to_json()}")
    return config


def _validated_records(config: RunConfig):
    if config.data.manifest is None:
        raise ConfigError("data.manifest is not set (use --manifest or the config file)")
    records = read_manifest(pathlib.Path(config.data.manifest))
    issues = validate_manifest(records)
    if issues:
        for issue in issues:
            logger.error(f"{issue.sample_id}: {issue.reason}")
        raise ManifestInvalidError(f"manifest has {len(issues)} invalid record(s)")
    return records


def load_datasets(config: RunConfig, size: Optional[int] = None,
                  augment_train: bool = True) -> Tuple[Dataset, Dataset]:
    """Read, validate and split the manifest, then build both datasets.

    Augmentation is applied to the train side only.
    """
    size = size or config.image_size
    records = _validated_records(config)
    train_records, test_records = split_subject_disjoint(
        records, config.data.train_fraction, config.data.split_seed
    )
    kwargs = dict(
        mask_dir=config.data.resolved_mask_dir(),
        image_root=config.data.resolved_image_root(),
        size=size,
        workers=config.data.workers,
    )
    train_set = build_dataset(train_records, split_tag=SplitTag.TRAIN, **kwargs)
    test_set = build_dataset(test_records, split_tag=SplitTag.TEST, **kwargs)
    if augment_train and config.data.augment:
        train_set = augment_dataset(train_set, config.data.augment_strata)
    return train_set, test_set


def eval_dataset(config: RunConfig, size: int) -> Dataset:
    train_set, test_set = load_datasets(config, size, augment_train=False)
    return train_set if config.data.eval_split == "train" else test_set


def overlay(image: np.ndarray, mask: np.ndarray, color: Tuple[int, int, int],
            alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """Alpha-blend a solid color over the masked pixels of an H x W x 3 [0,1] image."""
    base = np.clip(np.asarray(image, dtype=np.float64) * 255.0, 0.0, 255.0)
    tint = np.asarray(color, dtype=np.float64)
    selected = np.asarray(mask).astype(bool)
    base[selected] = (1.0 - alpha) * base[selected] + alpha * tint
    return np.round(base).astype(np.uint8)


def fit_network(config: RunConfig, train_set: Dataset, net: Optional[CMTNet] = None) -> CMTNet:
    """Initialize (unless given) and train a network."""
    if net is None:
        net = init_network(config.network, config.train.seed, config.train.pretrained_encoder)
    net, _ = train(net, train_set, config.train)
    return net


def covid_sensitivity(result: EvaluationReport, target: float) -> Optional[float]:
    if result.covid is None or result.covid.at_specificity is None:
        return None
    point = result.covid.at_specificity.get(f"{target:.2f}")
    return None if point is None else point.sensitivity


################################################################################
# Subcommands
################################################################################
def cmd_synth(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    out = args.out or pathlib.Path("synthetic")
    fixture = generate_synthetic(
        n=args.n,
        seed=config.train.seed,
        out_dir=out,
        size=args.size,
        missing_rate=args.missing_rate,
        records_per_patient=args.records_per_patient,
    )
    print(f"Wrote {len(fixture.records)} synthetic samples to {fixture.manifest_path}")
    return 0


def cmd_validate(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    records = _validated_records(config)
    print(f"{len(records)} records valid")
    print(json.dumps(stratum_counts(records), indent=2))
    return 0


def cmd_rasterize(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    records = _validated_records(config)
    out = args.out or pathlib.Path("masks")
    written = rasterize_manifest(records, out, config.data.resolved_image_root(), config.image_size)
    print(f"Wrote {len(written)} lung masks to {out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    out = args.out or pathlib.Path("runs")
    config = resolve_config(args)
    config = with_overrides(config, {"train": {"checkpoint_dir": str(out)}})

    net = None
    if args.checkpoint is not None:
        net = load_checkpoint(args.checkpoint, expected_config=config.network)

    train_set, _ = load_datasets(config)
    net = fit_network(config, train_set, net)
    path = save_checkpoint(net, out / "final.pt")
    print(f"Trained {net.trained_epochs} epochs; checkpoint written to {path}")
    return 0


def _require_checkpoint(args: argparse.Namespace) -> CMTNet:
    if args.checkpoint is None:
        raise ValueError("--checkpoint is required")
    return load_checkpoint(args.checkpoint)


def cmd_eval(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    net = _require_checkpoint(args)
    dataset = eval_dataset(config, net.config.input_size[0])
    document = report(net, dataset, batch_size=config.train.batch_size).to_json()
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(document + "\n", encoding="utf-8")
        print(f"Report written to {args.out}")
    else:
        print(document)
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    if args.checkpoint is None:
        raise ValueError("--checkpoint is required")
    # an explicit --config must describe the archived network
    expected = config.network if args.config is not None else None
    net = load_checkpoint(args.checkpoint, expected_config=expected).to(torch.device(config.train.device))
    out = args.out or pathlib.Path("predictions")
    out.mkdir(parents=True, exist_ok=True)
    size = net.config.input_size[0]

    failures = 0
    score_lines = []
    for path in args.images:
        try:
            image = load_image(path, size)
        except (RuntimeError, OSError) as e:
            logger.error(f"{path}: {e}")
            failures += 1
            continue
        bundle = forward(net, [image], training=False)[0]
        stem = pathlib.Path(path).stem
        Image.fromarray(overlay(image, bundle.lung_mask(), LUNG_COLOR)).save(out / f"{stem}_lung.png")
        Image.fromarray(overlay(image, bundle.disease_mask(), DISEASE_COLOR)).save(out / f"{stem}_disease.png")
        score_lines.append(json.dumps({"image": str(path), **bundle.scores()}))

    (out / "scores.jsonl").write_text("".join(line + "\n" for line in score_lines), encoding="utf-8")
    print(f"Predicted {len(score_lines)} image(s) into {out}")
    if failures:
        print(f"Error: {failures} image(s) could not be read")
        return 2
    return 0


def run_ablation(config: RunConfig, subsets: Sequence[Tuple[int, ...]], train_set: Dataset,
                 test_set: Dataset) -> List[Dict[str, Any]]:
    """Train and evaluate one network per task subset from the same seed."""
    rows = []
    for subset in subsets:
        run = with_overrides(config, {"train": {"task_enable": tasks_to_enable(subset), "checkpoint_dir": None}})
        logger.info(f"Ablation run with tasks {list(subset)}")
        result = report(fit_network(run, train_set), test_set, batch_size=run.train.batch_size)
        rows.append({
            "tasks": list(subset),
            "sensitivity_at_0.90": covid_sensitivity(result, 0.90),
            "sensitivity_at_0.99": covid_sensitivity(result, 0.99),
            "auc": None if result.covid is None else result.covid.auc,
        })
    return rows


def cmd_ablate(args: argparse.Namespace) -> int:
    subsets = parse_subsets(args.subsets)
    config = resolve_config(args)
    train_set, test_set = load_datasets(config)
    document = json.dumps({"seed": config.train.seed, "rows": run_ablation(config, subsets, train_set, test_set)}, indent=2)
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(document + "\n", encoding="utf-8")
    print(document)
    return 0


def run_seed_stability(config: RunConfig, seeds: Sequence[int], train_set: Dataset,
                       test_set: Dataset, target: float = 0.99) -> Dict[str, Any]:
    """Sensitivity at the target specificity per seed, with mean and population std.

    A seed whose training fails is recorded with its error and the summary
    is flagged partial.
    """
    runs = []
    values = []
    for seed in seeds:
        run = with_overrides(config, {"train": {"seed": seed, "checkpoint_dir": None}})
        try:
            value = covid_sensitivity(report(fit_network(run, train_set), test_set,
                                             batch_size=run.train.batch_size), target)
        except RuntimeError as e:
            logger.error(f"Seed {seed} failed: {e}")
            runs.append({"seed": seed, "error": str(e)})
            continue
        runs.append({"seed": seed, "sensitivity": value})
        if value is not None:
            values.append(value)

    return {
        "target_specificity": target,
        "runs": runs,
        "mean": float(np.mean(values)) if values else None,
        "std": float(np.std(values)) if values else None,
        "partial": len(values) != len(seeds),
    }


def cmd_stability(args: argparse.Namespace) -> int:
    seeds = parse_seeds(args.seeds)
    config = resolve_config(args)
    train_set, test_set = load_datasets(config)
    summary = run_seed_stability(config, seeds, train_set, test_set)
    document = json.dumps(summary, indent=2)
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(document + "\n", encoding="utf-8")
    print(document)
    return 2 if summary["partial"] else 0


def cmd_roc_export(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    net = _require_checkpoint(args)
    dataset = eval_dataset(config, net.config.input_size[0])
    predictions = collect_predictions(net, dataset, config.train.batch_size)
    out = args.out or pathlib.Path("roc.csv")
    roc_to_csv(roc(covid_scoreset(predictions, dataset)), out)
    print(f"ROC points written to {out}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "validate": cmd_validate,
    "rasterize": cmd_rasterize,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "ablate": cmd_ablate,
    "stability": cmd_stability,
    "roc-export": cmd_roc_export,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=pathlib.Path, default=None, help="RunConfig TOML file")
    common.add_argument("--seed", type=int, default=None, help="Override train.seed")
    common.add_argument("--out", type=pathlib.Path, default=None, help="Output file or directory")
    common.add_argument("--checkpoint", type=pathlib.Path, default=None, help="Checkpoint archive")
    common.add_argument("--tasks", type=str, default=None, help="Enabled tasks, e.g. 1,2,4")
    common.add_argument("--scale-factor", type=int, default=None, help="Divide every channel width")
    common.add_argument("--manifest", type=pathlib.Path, default=None, help="Override data.manifest")
    common.add_argument("--device", type=str, default=None, help="Override train.device")
    common.add_argument("--epochs", type=int, default=None, help="Override train.epochs")
    common.add_argument("--split", choices=["train", "test"], default=None, help="Split to evaluate")
    common.add_argument("--pretrained", type=str, default=None, help="'imagenet' or an encoder weight file")
    common.add_argument("--log-level", type=str, default=None, help="DEBUG, INFO, WARNING or ERROR")

    parser = argparse.ArgumentParser(description="Multi-task chest radiograph screening")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", parents=[common], help="Generate a synthetic fixture")
    synth.add_argument("--n", type=int, default=30, help="Number of samples")
    synth.add_argument("--size", type=int, default=224, help="Image side length")
    synth.add_argument("--missing-rate", type=float, default=0.0, help="Chance of dropping each annotation")
    synth.add_argument("--records-per-patient", type=int, default=1, help="Samples per patient")

    sub.add_parser("validate", parents=[common], help="Validate a manifest and print stratum counts")
    sub.add_parser("rasterize", parents=[common], help="Write lung masks from boxes")
    sub.add_parser("train", parents=[common], help="Train a network")
    sub.add_parser("eval", parents=[common], help="Write the evaluation report")

    predict = sub.add_parser("predict", parents=[common], help="Overlays and scores for images")
    predict.add_argument("images", nargs="+", type=pathlib.Path, help="Input images")

    ablate = sub.add_parser("ablate", parents=[common], help="Task subset ablation table")
    ablate.add_argument("--subsets", type=str, default=None, help="e.g. '1,4;2,4;1,2,3,4'")

    stability = sub.add_parser("stability", parents=[common], help="Seed stability sweep")
    stability.add_argument("--seeds", type=str, required=True, help="Comma-separated seeds, at least 2")

    sub.add_parser("roc-export", parents=[common], help="Export COVID ROC points as CSV")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv(project_root / ".env")
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level or os.getenv("CMTNET_LOG_LEVEL", "INFO"))

    try:
        return COMMANDS[args.command](args)
    except ValueError as e:
        print(f"Error: {e}")
        return 1
    except (RuntimeError, OSError) as e:
        print(f"Error: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
