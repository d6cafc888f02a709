#!/usr/bin/env python3
"""
Task losses and the switch-gated total loss.

z1 / z2: pixel-wise binary cross entropy between the foreground channel of
the lung / disease decoder and the ground-truth mask, summed over pixels
(optionally averaged per pixel).
z3: cross entropy of the healthy/unhealthy distribution.
z4: sum of two independent binary cross entropies for the COVID and
other-disease scores.

The per-sample total is T1*z1 + T2*z2 + T3*z3 + T4*z4 with unit weights;
a batch total is the mean of the per-sample totals. Gated-off components
are constant zeros detached from the graph, so no gradient reaches a
branch whose switch is off.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
import torch

from .datamodel import Sample, Switches, effective_switches
from .network import PredictionBundle

logger = logging.getLogger(__name__)

EPSILON = 1e-7

SegReduction = Literal["sum", "mean"]


class LossError(ValueError):
    """Raised for inconsistent loss inputs."""


def _as_tensor(value) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value
    # copy so read-only Sample arrays never back a tensor
    return torch.from_numpy(np.array(value, dtype=np.float64))


def _check_label(name: str, value) -> int:
    if value not in (0, 1):
        raise LossError(f"{name} must be 0 or 1, got {value}")
    return int(value)


def _bernoulli_nll(p: torch.Tensor, target) -> torch.Tensor:
    p = p.clamp(EPSILON, 1.0 - EPSILON)
    return -(target * torch.log(p) + (1 - target) * torch.log(1 - p))


def seg_bce(pred_probs, gt, reduction: SegReduction = "sum") -> torch.Tensor:
    """Pixel-wise binary cross entropy for a segmentation map.

    Args:
        pred_probs: H x W foreground probabilities.
        gt: H x W binary ground truth.
        reduction: "sum" over pixels (default) or per-pixel "mean".

    Returns:
        Scalar tensor.

    Raises:
        LossError: If shapes differ or probabilities leave [0, 1].
    """
    p = _as_tensor(pred_probs)
    g = _as_tensor(gt).to(device=p.device, dtype=p.dtype)
    if p.shape != g.shape:
        raise LossError(f"prediction shape {tuple(p.shape)} != ground truth shape {tuple(g.shape)}")
    if bool((p.detach() < 0).any()) or bool((p.detach() > 1).any()):
        raise LossError("segmentation probabilities must lie in [0, 1]")

    terms = _bernoulli_nll(p, g)
    if reduction == "mean":
        return terms.mean()
    if reduction != "sum":
        raise LossError(f"Unknown reduction: {reduction}")
    return terms.sum()


def health_ce(health_probs, H: int) -> torch.Tensor:
    """Cross entropy of the healthy/unhealthy distribution (index 1 = unhealthy)."""
    H = _check_label("H", H)
    p = _as_tensor(health_probs)
    if p.shape != (2,):
        raise LossError(f"health_probs must be a 2-vector, got {tuple(p.shape)}")
    return -torch.log(p[H].clamp(EPSILON, 1.0 - EPSILON))


def multilabel_bce(c_hat, o_hat, C: int, O: int) -> torch.Tensor:
    """Joint COVID / other-disease loss: BCE(c_hat, C) + BCE(o_hat, O)."""
    C = _check_label("C", C)
    O = _check_label("O", O)
    return _bernoulli_nll(_as_tensor(c_hat), C) + _bernoulli_nll(_as_tensor(o_hat), O)


@dataclass(frozen=True)
class LossBreakdown:
    """Per-sample components; inactive components are zero."""

    z1: torch.Tensor
    z2: torch.Tensor
    z3: torch.Tensor
    z4: torch.Tensor
    total: torch.Tensor
    active_mask: Switches

    @property
    def components(self) -> Tuple[torch.Tensor, ...]:
        return (self.z1, self.z2, self.z3, self.z4)

    def as_floats(self) -> dict:
        return {
            "z1": float(self.z1.detach()),
            "z2": float(self.z2.detach()),
            "z3": float(self.z3.detach()),
            "z4": float(self.z4.detach()),
            "total": float(self.total.detach()),
            "active": list(self.active_mask),
        }


def _mask_target(mask, name: str, probs: torch.Tensor) -> torch.Tensor:
    if mask is None:
        raise LossError(f"{name} switch is on but the {name} mask is absent")
    return torch.from_numpy(np.array(mask, copy=True)).to(device=probs.device, dtype=probs.dtype)


def total_loss(bundle: PredictionBundle, sample: Sample, task_enable: Optional[Sequence[bool]] = None,
               seg_reduction: SegReduction = "sum") -> LossBreakdown:
    """Switch-gated loss for one sample.

    Args:
        bundle: Network outputs for the sample.
        sample: Ground truth and switches.
        task_enable: Optional per-run task flags ANDed into the switches.
        seg_reduction: Pixel reduction for z1 and z2.

    Returns:
        LossBreakdown whose total keeps the autograd graph.

    Raises:
        LossError: If a switch is on while its ground truth is missing, or
            shapes disagree.
    """
    t1, t2, t3, t4 = effective_switches(sample, task_enable)
    zero = bundle.health_probs.detach().new_zeros(())

    z1 = zero
    if t1:
        z1 = seg_bce(bundle.lung_probs[1], _mask_target(sample.lung_mask, "lung", bundle.lung_probs), seg_reduction)

    z2 = zero
    if t2:
        z2 = seg_bce(bundle.disease_probs[1], _mask_target(sample.disease_mask, "disease", bundle.disease_probs), seg_reduction)

    z3 = zero
    if t3:
        if sample.H is None:
            raise LossError("health switch is on but H is absent")
        z3 = health_ce(bundle.health_probs, sample.H)

    z4 = zero
    if t4:
        if sample.C is None or sample.O is None:
            raise LossError("multilabel switch is on but C or O is absent")
        z4 = multilabel_bce(bundle.covid_score, bundle.other_score, sample.C, sample.O)

    total = z1 + z2 + z3 + z4
    return LossBreakdown(z1=z1, z2=z2, z3=z3, z4=z4, total=total, active_mask=(t1, t2, t3, t4))


@dataclass(frozen=True)
class BatchLoss:
    """Mean of per-sample totals plus the per-sample breakdowns."""

    total: torch.Tensor
    breakdowns: Tuple[LossBreakdown, ...]

    @property
    def requires_grad(self) -> bool:
        return bool(self.total.requires_grad)


def batch_loss(bundles: Sequence[PredictionBundle], samples: Sequence[Sample],
               task_enable: Optional[Sequence[bool]] = None,
               seg_reduction: SegReduction = "sum") -> BatchLoss:
    """Average total_loss over a batch.

    Raises:
        LossError: On an empty batch or mismatched lengths.
    """
    if len(bundles) != len(samples):
        raise LossError(f"{len(bundles)} bundles for {len(samples)} samples")
    if not samples:
        raise LossError("empty batch")

    breakdowns: List[LossBreakdown] = [
        total_loss(bundle, sample, task_enable, seg_reduction) for bundle, sample in zip(bundles, samples)
    ]
    total = torch.stack([b.total for b in breakdowns]).mean()
    return BatchLoss(total=total, breakdowns=tuple(breakdowns))
