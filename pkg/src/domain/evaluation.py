#!/usr/bin/env python3
"""
Quantitative evaluation: ROC sweeps, EER, sensitivity at a fixed
specificity, accuracy, segmentation overlap and the test-set report.

Info:
Sweep convention. For a ScoreSet the curve holds one operating point per
distinct score value t (sorted descending) with the rule score >= t means
positive, framed by (+inf: sensitivity 0, specificity 1) and (-inf:
sensitivity 1, specificity 0). Thresholds therefore strictly decrease,
sensitivity never decreases and specificity never increases along the
points.

False-accept rate FAR = 1 - specificity, false-reject rate FRR =
1 - sensitivity. The EER is read at the first operating point where
FAR - FRR reaches zero, or linearly interpolated between the two points
around its first sign change.

Sensitivity at specificity Y uses the operating point with the smallest
specificity still >= Y (no interpolation).
"""

from __future__ import annotations

import csv
import logging
import math
import pathlib
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from .datamodel import Dataset
from .network import CMTNet, forward

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
DEFAULT_TARGETS = (0.90, 0.99)


class MetricError(ValueError):
    """Raised for inputs a metric is undefined on."""


################################################################################
# Score sets and ROC
################################################################################
@dataclass(frozen=True)
class ScoreSet:
    """Scores in [0, 1] paired with 0/1 ground-truth labels."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        labels = np.asarray(self.labels).reshape(-1)
        if scores.shape != labels.shape:
            raise MetricError(f"{scores.size} scores for {labels.size} labels")
        if not np.isin(labels, (0, 1)).all():
            raise MetricError("labels must be 0 or 1")
        if scores.size and (not np.isfinite(scores).all() or scores.min() < 0.0 or scores.max() > 1.0):
            raise MetricError("scores must lie in [0, 1]")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels.astype(np.int64))

    def __len__(self) -> int:
        return int(self.scores.size)

    @property
    def positives(self) -> int:
        return int(self.labels.sum())

    @property
    def negatives(self) -> int:
        return len(self) - self.positives

    def require_both_classes(self) -> None:
        if self.positives == 0 or self.negatives == 0:
            raise MetricError(
                f"threshold metrics need both classes (positives {self.positives}, negatives {self.negatives})"
            )


class RocPoint(NamedTuple):
    threshold: float
    sensitivity: float
    specificity: float


@dataclass(frozen=True)
class RocCurve:
    points: Tuple[RocPoint, ...]

    @property
    def thresholds(self) -> np.ndarray:
        return np.array([p.threshold for p in self.points])

    @property
    def sensitivities(self) -> np.ndarray:
        return np.array([p.sensitivity for p in self.points])

    @property
    def specificities(self) -> np.ndarray:
        return np.array([p.specificity for p in self.points])


class OperatingPoint(NamedTuple):
    threshold: float
    sensitivity: float
    specificity: float
    reached: bool


def roc(scoreset: ScoreSet) -> RocCurve:
    """Sweep thresholds over the distinct scores.

    Raises:
        MetricError: If only one class is present.
    """
    scoreset.require_both_classes()
    scores, labels = scoreset.scores, scoreset.labels
    P, N = scoreset.positives, scoreset.negatives

    thresholds = np.unique(scores)[::-1]
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    cum_pos = np.cumsum(labels[order])
    cum_neg = np.cumsum(1 - labels[order])
    # last index whose score is >= t
    last = np.searchsorted(-sorted_scores, -thresholds, side="right") - 1

    points = [RocPoint(math.inf, 0.0, 1.0)]
    for t, i in zip(thresholds, last):
        points.append(RocPoint(float(t), cum_pos[i] / P, (N - cum_neg[i]) / N))
    points.append(RocPoint(-math.inf, 1.0, 0.0))
    return RocCurve(points=tuple(points))


def auc(curve: RocCurve) -> float:
    """Area under the ROC curve by trapezoidal integration."""
    fpr = 1.0 - curve.specificities
    tpr = curve.sensitivities
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def eer(scoreset: ScoreSet) -> float:
    """Equal error rate along the threshold sweep."""
    curve = roc(scoreset)
    far = 1.0 - curve.specificities
    frr = 1.0 - curve.sensitivities
    diff = far - frr

    for i in range(len(diff)):
        if diff[i] == 0.0:
            return float(far[i])
        if i + 1 < len(diff) and diff[i] < 0.0 < diff[i + 1]:
            lam = diff[i] / (diff[i] - diff[i + 1])
            return float(far[i] + lam * (far[i + 1] - far[i]))
    # unreachable: diff runs from -1 to +1
    raise MetricError("no FAR/FRR crossing found")


def operating_point(scoreset: ScoreSet, target_specificity: float) -> OperatingPoint:
    """Operating point with the smallest specificity still >= the target.

    When no finite threshold reaches the target, the most specific finite
    operating point is returned with reached=False.

    Raises:
        MetricError: If the target is outside (0, 1] or one class is missing.
    """
    if not (0.0 < target_specificity <= 1.0):
        raise MetricError(f"target specificity must lie in (0, 1], got {target_specificity}")
    finite = roc(scoreset).points[1:-1]

    chosen: Optional[RocPoint] = None
    for point in finite:
        if point.specificity >= target_specificity:
            chosen = point
        else:
            break

    if chosen is None:
        point = finite[0]
        logger.warning(
            f"No threshold reaches specificity {target_specificity}; "
            f"using the most specific point ({point.specificity:.4f})"
        )
        return OperatingPoint(point.threshold, point.sensitivity, point.specificity, reached=False)
    return OperatingPoint(chosen.threshold, chosen.sensitivity, chosen.specificity, reached=True)


def sensitivity_at_specificity(scoreset: ScoreSet, target_specificity: float) -> float:
    return operating_point(scoreset, target_specificity).sensitivity


def accuracy(scoreset: ScoreSet, threshold: float = 0.5) -> float:
    """Fraction of samples whose decision score >= threshold matches the label."""
    if len(scoreset) == 0:
        raise MetricError("empty score set")
    predicted = (scoreset.scores >= threshold).astype(np.int64)
    return float((predicted == scoreset.labels).mean())


def seg_overlap(pred_mask, gt_mask) -> Tuple[float, float]:
    """Dice and IoU of two binary masks; both are 1 when both masks are empty.

    Raises:
        MetricError: If the shapes differ.
    """
    a = np.asarray(pred_mask).astype(bool)
    b = np.asarray(gt_mask).astype(bool)
    if a.shape != b.shape:
        raise MetricError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = int(np.logical_and(a, b).sum())
    union = int(np.logical_or(a, b).sum())
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0, 1.0
    return 2.0 * inter / total, inter / union


def roc_to_csv(curve: RocCurve, path: pathlib.Path) -> pathlib.Path:
    """Write (threshold, sensitivity, specificity) rows for external plotting."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["threshold", "sensitivity", "specificity"])
        for point in curve.points:
            writer.writerow([repr(point.threshold), repr(point.sensitivity), repr(point.specificity)])
    return path


################################################################################
# Test-set report
################################################################################
@dataclass(frozen=True)
class SamplePrediction:
    """Scores and mask overlaps for one evaluated sample."""

    sample_id: str
    covid_score: float
    other_score: float
    p_unhealthy: float
    lung_overlap: Optional[Tuple[float, float]] = None
    disease_overlap: Optional[Tuple[float, float]] = None


def collect_predictions(net: CMTNet, dataset: Dataset, batch_size: int = 16) -> List[SamplePrediction]:
    """Run the network (eval mode) over a dataset."""
    predictions: List[SamplePrediction] = []
    for start in range(0, len(dataset), batch_size):
        batch = dataset.samples[start:start + batch_size]
        bundles = forward(net, [s.image for s in batch], training=False)
        for sample, bundle in zip(batch, bundles):
            scores = bundle.scores()
            predictions.append(SamplePrediction(
                sample_id=sample.sample_id,
                covid_score=scores["covid_score"],
                other_score=scores["other_score"],
                p_unhealthy=scores["p_unhealthy"],
                lung_overlap=None if sample.lung_mask is None else seg_overlap(bundle.lung_mask(), sample.lung_mask),
                disease_overlap=None if sample.disease_mask is None else seg_overlap(bundle.disease_mask(), sample.disease_mask),
            ))
    return predictions


def covid_scoreset(predictions: Sequence[SamplePrediction], dataset: Dataset) -> ScoreSet:
    """COVID scores against C over the samples that carry C."""
    pairs = [(p.covid_score, s.C) for p, s in zip(predictions, dataset) if s.C is not None]
    return ScoreSet(scores=np.array([p[0] for p in pairs]), labels=np.array([p[1] for p in pairs], dtype=np.int64))


class OperatingPointReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    threshold: float
    sensitivity: float
    specificity: float
    reached: bool
    accuracy: float


class CovidReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_labelled: int
    n_positive: int
    sensitivity_at_0_5: Optional[float] = None
    accuracy_at_0_5: float
    auc: Optional[float] = None
    eer: Optional[float] = None
    at_specificity: Optional[Dict[str, OperatingPointReport]] = None
    into_unhealthy: Optional[float] = None
    into_healthy: Optional[float] = None


class SegmentationReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_masked: int
    mean_dice: float
    mean_iou: float


class EvaluationReport(BaseModel):
    """Versioned evaluation document; absent metrics are omitted from JSON."""

    model_config = ConfigDict(frozen=True)

    schema_version: int = REPORT_SCHEMA_VERSION
    split: str
    n_samples: int
    covid: Optional[CovidReport] = None
    health_accuracy: Optional[float] = None
    other_disease_accuracy: Optional[float] = None
    lung_segmentation: Optional[SegmentationReport] = None
    disease_segmentation: Optional[SegmentationReport] = None

    def to_json(self) -> str:
        return self.model_dump_json(exclude_none=True, indent=2)


def _segmentation(overlaps: List[Tuple[float, float]]) -> Optional[SegmentationReport]:
    if not overlaps:
        return None
    return SegmentationReport(
        n_masked=len(overlaps),
        mean_dice=float(np.mean([o[0] for o in overlaps])),
        mean_iou=float(np.mean([o[1] for o in overlaps])),
    )


def _covid_report(predictions: Sequence[SamplePrediction], dataset: Dataset,
                  targets: Sequence[float]) -> Optional[CovidReport]:
    scoreset = covid_scoreset(predictions, dataset)
    if len(scoreset) == 0:
        return None

    positives = [p for p, s in zip(predictions, dataset) if s.C == 1]
    into_unhealthy = None
    if positives:
        into_unhealthy = float(np.mean([p.p_unhealthy >= 0.5 for p in positives]))

    fields = dict(
        n_labelled=len(scoreset),
        n_positive=scoreset.positives,
        accuracy_at_0_5=accuracy(scoreset, 0.5),
        into_unhealthy=into_unhealthy,
        into_healthy=None if into_unhealthy is None else 1.0 - into_unhealthy,
    )
    if scoreset.positives:
        fields["sensitivity_at_0_5"] = float((scoreset.scores[scoreset.labels == 1] >= 0.5).mean())

    if scoreset.positives and scoreset.negatives:
        fields["auc"] = auc(roc(scoreset))
        fields["eer"] = eer(scoreset)
        at_specificity = {}
        for target in targets:
            point = operating_point(scoreset, target)
            at_specificity[f"{target:.2f}"] = OperatingPointReport(
                threshold=point.threshold,
                sensitivity=point.sensitivity,
                specificity=point.specificity,
                reached=point.reached,
                accuracy=accuracy(scoreset, point.threshold),
            )
        fields["at_specificity"] = at_specificity
    else:
        logger.warning("COVID labels hold a single class; ROC metrics omitted")
    return CovidReport(**fields)


def report(net: CMTNet, test_set: Dataset, thresholds: Sequence[float] = DEFAULT_TARGETS,
           batch_size: int = 16) -> EvaluationReport:
    """Evaluate a network on a dataset.

    Args:
        net: Trained network.
        test_set: Non-empty dataset.
        thresholds: Target specificities for the sensitivity operating points.
        batch_size: Forward batch size.

    Returns:
        EvaluationReport; segmentation sections exist only when masks do.

    Raises:
        MetricError: If the dataset is empty.
    """
    if len(test_set) == 0:
        raise MetricError("test set is empty")
    predictions = collect_predictions(net, test_set, batch_size)

    health = [(p.p_unhealthy >= 0.5, s.H) for p, s in zip(predictions, test_set) if s.H is not None]
    other = [(p.other_score >= 0.5, s.O) for p, s in zip(predictions, test_set) if s.O is not None]

    result = EvaluationReport(
        split=test_set.split_tag.value,
        n_samples=len(test_set),
        covid=_covid_report(predictions, test_set, thresholds),
        health_accuracy=float(np.mean([int(pred) == label for pred, label in health])) if health else None,
        other_disease_accuracy=float(np.mean([int(pred) == label for pred, label in other])) if other else None,
        lung_segmentation=_segmentation([p.lung_overlap for p in predictions if p.lung_overlap is not None]),
        disease_segmentation=_segmentation([p.disease_overlap for p in predictions if p.disease_overlap is not None]),
    )
    logger.info(f"Evaluated {len(test_set)} {result.split} samples")
    return result
