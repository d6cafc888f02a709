#!/usr/bin/env python3
"""
Optimization loop, checkpoints and training history.

Defaults reproduce the reference recipe: Adam (lr 5e-5, betas 0.9/0.999,
eps 1e-8), batch size 16, 30 epochs, unit loss weights, no schedule, no
weight decay, no early stopping. Disabling a task through task_enable
forces its switch to 0 for every sample, which is how task ablations are
run.

Checkpoint archive (torch.save of a dict):
    format, version, config (NetworkConfig echo), seed, epoch, state_dict
The state dict is keyed by the network's module names.

History is written as JSON Lines, one completed epoch per line.
"""

from __future__ import annotations

import json
import logging
import math
import pathlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple, Any

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, model_validator

from .datamodel import Dataset, Sample
from .losses import batch_loss
from .network import CMTNet, NetworkConfig, images_to_tensor, to_bundles

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cmtnet-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Raised when training cannot continue."""


class CheckpointError(RuntimeError):
    """Raised for unreadable or incompatible checkpoint archives."""


class TrainConfig(BaseModel):
    """Optimization settings."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    learning_rate: float = 5e-5
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    pretrained_encoder: Optional[str] = None
    task_enable: Tuple[bool, bool, bool, bool] = (True, True, True, True)
    checkpoint_dir: Optional[str] = None
    checkpoint_every: int = 1
    eval_every: int = 0
    max_steps: Optional[int] = None
    seg_reduction: Literal["sum", "mean"] = "sum"
    freeze_encoder_bn: bool = False
    deterministic: bool = False
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    device: str = "cpu"

    @model_validator(mode="after")
    def _check(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if not (self.task_enable[2] or self.task_enable[3]):
            raise ValueError("at least one classification task (3 or 4) must be enabled")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        return self


@dataclass
class StepRecord:
    """Loss bookkeeping for one optimizer step."""

    epoch: int
    step: int
    batch_size: int
    total: float
    z_sums: List[float]
    z_counts: List[int]


@dataclass
class EpochRecord:
    """Per-epoch means; component means are over samples where the task was active."""

    epoch: int
    mean_z: List[float]
    mean_total: float
    steps: int
    eval: Optional[Dict[str, Any]] = None

    def to_json(self) -> Dict[str, Any]:
        payload = {
            "epoch": self.epoch,
            "z1": self.mean_z[0],
            "z2": self.mean_z[1],
            "z3": self.mean_z[2],
            "z4": self.mean_z[3],
            "total": self.mean_total,
            "steps": self.steps,
        }
        if self.eval is not None:
            payload["eval"] = self.eval
        return payload


@dataclass
class TrainHistory:
    epochs: List[EpochRecord] = field(default_factory=list)
    steps: List[StepRecord] = field(default_factory=list)

    def epoch_means_from_steps(self, epoch: int) -> Tuple[List[float], float]:
        """Recompute (mean_z, mean_total) of an epoch from its step records."""
        records = [s for s in self.steps if s.epoch == epoch]
        sums = [sum(s.z_sums[k] for s in records) for k in range(4)]
        counts = [sum(s.z_counts[k] for s in records) for k in range(4)]
        mean_z = [sums[k] / counts[k] if counts[k] else 0.0 for k in range(4)]
        n = sum(s.batch_size for s in records)
        mean_total = sum(s.total * s.batch_size for s in records) / n if n else 0.0
        return mean_z, mean_total

    def write_jsonl(self, path: pathlib.Path) -> pathlib.Path:
        path = pathlib.Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(json.dumps(e.to_json()) + "\n" for e in self.epochs), encoding="utf-8")
        return path


################################################################################
# Checkpoints
################################################################################
def save_checkpoint(net: CMTNet, path: pathlib.Path) -> pathlib.Path:
    """Write the network, its config echo, seed and epoch counter."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    archive = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": net.config.model_dump(mode="json"),
        "seed": net.seed,
        "epoch": int(net.trained_epochs),
        "state_dict": net.state_dict(),
    }
    torch.save(archive, path)
    logger.info(f"Checkpoint saved: {path} (epoch {net.trained_epochs})")
    return path


def load_checkpoint(path: pathlib.Path, expected_config: Optional[NetworkConfig] = None) -> CMTNet:
    """Rebuild a network from an archive written by save_checkpoint().

    Args:
        path: Archive path.
        expected_config: If given, the archived config must equal it.

    Returns:
        CMTNet in eval mode with seed and trained_epochs restored.

    Raises:
        CheckpointError: On unreadable archives or config mismatch.
    """
    path = pathlib.Path(path)
    try:
        archive = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError as e:
        raise CheckpointError(f"Checkpoint not found: {path}") from e
    except Exception as e:
        raise CheckpointError(f"Corrupt checkpoint {path}: {e}") from e

    if not isinstance(archive, dict) or archive.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a network checkpoint")

    try:
        config = NetworkConfig.model_validate(archive["config"])
    except Exception as e:
        raise CheckpointError(f"{path}: invalid config echo: {e}") from e
    if expected_config is not None and config != expected_config:
        raise CheckpointError(f"{path}: checkpoint config {config.model_dump()} does not match {expected_config.model_dump()}")

    state = archive["state_dict"]
    net = CMTNet(config)
    floats = [t for t in state.values() if torch.is_floating_point(t)]
    if floats:
        net = net.to(dtype=floats[0].dtype)
    try:
        net.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"{path}: state dict does not fit config: {e}") from e

    net.seed = archive.get("seed")
    net.trained_epochs = int(archive.get("epoch", 0))
    net.eval()
    logger.info(f"Loaded checkpoint {path} (epoch {net.trained_epochs})")
    return net


################################################################################
# Trainer
################################################################################
class CMTNetTrainer:
    """Single-writer training loop over a Dataset.

    Epoch numbering continues from net.trained_epochs, so a network loaded
    from a checkpoint resumes where it stopped.
    """

    def __init__(self, net: CMTNet, train_set: Dataset, config: TrainConfig,
                 eval_fn: Optional[Callable[[CMTNet], Dict[str, Any]]] = None):
        if len(train_set) < 1:
            raise TrainingError("training set is empty")
        expected = tuple(net.config.input_size[:2])
        if train_set[0].size != expected:
            raise TrainingError(f"samples are {train_set[0].size}, network expects {expected}")

        self.net = net
        self.train_set = train_set
        self.config = config
        self.eval_fn = eval_fn
        self.history = TrainHistory()
        self.global_step = 0
        self.device = torch.device(config.device)

        self.net.to(self.device)
        self.optimizer = torch.optim.Adam(
            self.net.parameters(),
            lr=config.learning_rate,
            betas=config.adam_betas,
            eps=config.adam_eps,
        )

    def _epoch_order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.config.seed, epoch]).permutation(len(self.train_set))

    def _set_train_mode(self) -> None:
        self.net.train()
        if self.config.freeze_encoder_bn:
            for bn in self.net.encoder_batchnorms():
                bn.eval()

    def train_step(self, samples: Sequence[Sample], epoch: int) -> StepRecord:
        """Run one forward/backward/update on a batch.

        Raises:
            TrainingError: If the batch loss is not finite.
        """
        self._set_train_mode()
        images = images_to_tensor([s.image for s in samples], self.net)
        bundles = to_bundles(self.net(images))
        loss = batch_loss(bundles, samples, self.config.task_enable, self.config.seg_reduction)

        total = float(loss.total.detach())
        if not math.isfinite(total):
            raise TrainingError(f"non-finite loss {total} at epoch {epoch} step {self.global_step}")

        self.optimizer.zero_grad(set_to_none=True)
        if loss.requires_grad:
            loss.total.backward()
            self.optimizer.step()

        z_sums = [0.0] * 4
        z_counts = [0] * 4
        for breakdown in loss.breakdowns:
            for k, (active, value) in enumerate(zip(breakdown.active_mask, breakdown.components)):
                if active:
                    z_sums[k] += float(value.detach())
                    z_counts[k] += 1

        self.global_step += 1
        return StepRecord(epoch=epoch, step=self.global_step, batch_size=len(samples),
                          total=total, z_sums=z_sums, z_counts=z_counts)

    def _write_epoch(self, record: EpochRecord) -> None:
        logger.info(
            f"Epoch {record.epoch} | z1 {record.mean_z[0]:.4f} | z2 {record.mean_z[1]:.4f} | "
            f"z3 {record.mean_z[2]:.4f} | z4 {record.mean_z[3]:.4f} | total {record.mean_total:.4f}"
        )
        if self.config.checkpoint_dir is None:
            return
        checkpoint_dir = pathlib.Path(self.config.checkpoint_dir)
        with (checkpoint_dir / "history.jsonl").open("a", encoding="utf-8") as f:
            f.write(json.dumps(record.to_json()) + "\n")
        if record.epoch % self.config.checkpoint_every == 0:
            save_checkpoint(self.net, checkpoint_dir / f"epoch_{record.epoch:04d}.pt")

    def fit(self) -> Tuple[CMTNet, TrainHistory]:
        """Train for config.epochs epochs (or until config.max_steps)."""
        if self.config.deterministic:
            torch.set_num_threads(1)
            torch.use_deterministic_algorithms(True, warn_only=True)
        torch.manual_seed(self.config.seed)

        if self.config.checkpoint_dir is not None:
            pathlib.Path(self.config.checkpoint_dir).mkdir(parents=True, exist_ok=True)

        first_epoch = self.net.trained_epochs + 1
        logger.info(
            f"Training {len(self.train_set)} samples for {self.config.epochs} epochs from epoch {first_epoch} "
            f"(batch {self.config.batch_size}, lr {self.config.learning_rate:g}, tasks {self.config.task_enable})"
        )

        for epoch in range(first_epoch, first_epoch + self.config.epochs):
            order = self._epoch_order(epoch)
            step_records = []
            completed = True
            for start in range(0, len(order), self.config.batch_size):
                if self.config.max_steps is not None and self.global_step >= self.config.max_steps:
                    completed = False
                    break
                batch = [self.train_set[int(i)] for i in order[start:start + self.config.batch_size]]
                record = self.train_step(batch, epoch)
                self.history.steps.append(record)
                step_records.append(record)

            if not completed:
                # partial epochs keep their step records but are not counted as trained
                logger.info(f"Stopped at max_steps {self.config.max_steps} inside epoch {epoch}")
                break

            self.net.trained_epochs = epoch
            mean_z, mean_total = self.history.epoch_means_from_steps(epoch)
            snapshot = None
            if self.eval_fn is not None and self.config.eval_every and epoch % self.config.eval_every == 0:
                snapshot = self.eval_fn(self.net)
            record = EpochRecord(epoch=epoch, mean_z=mean_z, mean_total=mean_total,
                                 steps=len(step_records), eval=snapshot)
            self.history.epochs.append(record)
            self._write_epoch(record)

        self.net.eval()
        return self.net, self.history


def train(net: CMTNet, train_set: Dataset, config: TrainConfig,
          eval_fn: Optional[Callable[[CMTNet], Dict[str, Any]]] = None) -> Tuple[CMTNet, TrainHistory]:
    """Train a network; see CMTNetTrainer."""
    return CMTNetTrainer(net, train_set, config, eval_fn=eval_fn).fit()
