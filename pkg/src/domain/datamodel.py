#!/usr/bin/env python3
"""
Shared domain types for the multi-task chest radiograph pipeline.

Info:
A manifest is a JSON Lines file: one ManifestRecord per line, UTF-8, field
names exactly as declared on the model. Optional fields that are absent are
omitted from the line rather than written as null.

Each Sample carries a radiograph plus whatever ground truth is available
for it. The four task switches (lung mask, disease mask, healthy/unhealthy
label, COVID + other-disease labels) are derived from that availability and
never from label values.

Label polarity: H=1 means "unhealthy", H=0 means "healthy"; C=1 means
COVID-19 present; O=1 means a non-COVID finding is present.
"""

from __future__ import annotations

import json
import logging
import pathlib
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple, Iterable, Dict, Any

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

logger = logging.getLogger(__name__)

Switches = Tuple[int, int, int, int]
Box = Tuple[float, float, float, float]

TASK_NAMES = ("lung", "disease", "health", "multilabel")


class ManifestReadError(RuntimeError):
    """Raised when a manifest file cannot be read or parsed."""


class SampleError(ValueError):
    """Raised when a Sample would violate its invariants."""


class View(str, Enum):
    """Frontal radiograph acquisition orientation."""

    AP = "AP"
    PA = "PA"


class SplitTag(str, Enum):
    TRAIN = "train"
    TEST = "test"


class ManifestRecord(BaseModel):
    """On-disk description of one radiograph and its annotations.

    Only field types are enforced here; the cross-field invariants are
    reported by validate_manifest() so that a whole manifest can be audited
    in one pass.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    sample_id: str
    patient_id: str
    image_path: str
    view: View
    healthy_label: Optional[int] = None
    covid_label: Optional[int] = None
    other_disease_label: Optional[int] = None
    lung_boxes: Optional[List[Box]] = None
    disease_mask_path: Optional[str] = None
    source_tag: str = ""

    def to_json_line(self) -> str:
        """Serialize to one manifest line, omitting absent optional fields."""
        payload = self.model_dump(mode="json", exclude_none=True)
        return json.dumps(payload, ensure_ascii=False)


@dataclass(frozen=True)
class ValidationIssue:
    """One invariant violation found in a manifest."""

    sample_id: str
    reason: str


def derive_switches(record: ManifestRecord, has_lung_mask: bool, has_disease_mask: bool) -> Switches:
    """Derive the task switches (T1, T2, T3, T4) for a record.

    Args:
        record: A validated manifest record.
        has_lung_mask: Whether a lung mask is available for the record.
        has_disease_mask: Whether a disease mask is available for the record.

    Returns:
        Tuple of four 0/1 ints. Only the presence of annotations matters.
    """
    t1 = int(bool(has_lung_mask))
    t2 = int(bool(has_disease_mask))
    t3 = int(record.healthy_label is not None)
    t4 = int(record.covid_label is not None and record.other_disease_label is not None)
    return (t1, t2, t3, t4)


def _check_binary(value: Optional[int]) -> bool:
    return value is None or value in (0, 1)


def validate_manifest(records: Iterable[ManifestRecord]) -> List[ValidationIssue]:
    """Check every ManifestRecord invariant.

    Args:
        records: Parsed manifest records.

    Returns:
        List of issues; empty iff the manifest is valid.
    """
    issues: List[ValidationIssue] = []
    seen = set()

    for record in records:
        sid = record.sample_id
        if sid in seen:
            issues.append(ValidationIssue(sid, "duplicate id"))
        seen.add(sid)

        if not record.patient_id.strip():
            issues.append(ValidationIssue(sid, "empty patient id"))

        for name in ("healthy_label", "covid_label", "other_disease_label"):
            if not _check_binary(getattr(record, name)):
                issues.append(ValidationIssue(sid, f"{name} not in {{0,1}}"))

        if record.healthy_label == 0 and record.covid_label == 1:
            issues.append(ValidationIssue(sid, "healthy sample labelled covid"))

        if (record.covid_label is None) != (record.other_disease_label is None):
            issues.append(ValidationIssue(sid, "partial multilabel (covid and other must both be present)"))

        for box in record.lung_boxes or []:
            x_min, y_min, x_max, y_max = box
            if min(box) < 0:
                issues.append(ValidationIssue(sid, "negative box coordinate"))
            if x_max <= x_min or y_max <= y_min:
                issues.append(ValidationIssue(sid, "degenerate box"))

    if issues:
        logger.debug(f"Manifest validation found {len(issues)} issue(s)")
    return issues


def read_manifest(path: pathlib.Path) -> List[ManifestRecord]:
    """Parse a JSON Lines manifest.

    Args:
        path: Manifest file path.

    Returns:
        Records in file order.

    Raises:
        ManifestReadError: If the file is unreadable or a line is malformed.
    """
    path = pathlib.Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise ManifestReadError(f"Cannot read manifest {path}: {e}") from e

    records = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            records.append(ManifestRecord.model_validate(json.loads(line)))
        except (json.JSONDecodeError, ValidationError) as e:
            raise ManifestReadError(f"{path}:{line_no}: malformed record: {e}") from e

    logger.info(f"Read {len(records)} records from {path}")
    return records


def write_manifest(records: Iterable[ManifestRecord], path: pathlib.Path) -> pathlib.Path:
    """Write records as a JSON Lines manifest.

    Returns:
        The written path.
    """
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [record.to_json_line() for record in records]
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


def _require_binary_mask(name: str, mask: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    if mask.ndim != 2 or mask.shape != shape:
        raise SampleError(f"{name} shape {mask.shape} does not match image {shape}")
    if not np.isin(mask, (0, 1)).all():
        raise SampleError(f"{name} contains values outside {{0,1}}")
    return _frozen(mask.astype(np.uint8))


@dataclass(frozen=True)
class Sample:
    """One radiograph with its optional ground truth.

    Arrays are read-only once constructed. Build instances with
    Sample.create() so that the switches are derived consistently.
    """

    image: np.ndarray
    lung_mask: Optional[np.ndarray]
    disease_mask: Optional[np.ndarray]
    H: Optional[int]
    C: Optional[int]
    O: Optional[int]
    switches: Switches
    patient_id: str
    sample_id: str = ""
    meta: Dict[str, Any] = field(default_factory=dict, compare=False)

    @classmethod
    def create(
        cls,
        image: np.ndarray,
        patient_id: str,
        lung_mask: Optional[np.ndarray] = None,
        disease_mask: Optional[np.ndarray] = None,
        H: Optional[int] = None,
        C: Optional[int] = None,
        O: Optional[int] = None,
        sample_id: str = "",
        meta: Optional[Dict[str, Any]] = None,
    ) -> "Sample":
        """Validate inputs and build a Sample.

        Args:
            image: H x W x 3 float grid with values in [0, 1].
            patient_id: Non-empty subject identifier.
            lung_mask: Optional H x W {0,1} grid.
            disease_mask: Optional H x W {0,1} grid.
            H, C, O: Optional 0/1 labels.
            sample_id: Identifier carried for error messages and reports.

        Returns:
            A Sample satisfying every invariant.

        Raises:
            SampleError: If any invariant is violated.
        """
        if not patient_id:
            raise SampleError("patient_id must be non-empty")

        image = np.asarray(image, dtype=np.float32)
        if image.ndim != 3 or image.shape[2] != 3:
            raise SampleError(f"image must be H x W x 3, got {image.shape}")
        if image.size and (image.min() < 0.0 or image.max() > 1.0):
            raise SampleError("image values must lie in [0, 1]")
        grid = image.shape[:2]

        if lung_mask is not None:
            lung_mask = _require_binary_mask("lung_mask", np.asarray(lung_mask), grid)
        if disease_mask is not None:
            disease_mask = _require_binary_mask("disease_mask", np.asarray(disease_mask), grid)

        for name, value in (("H", H), ("C", C), ("O", O)):
            if value is not None and value not in (0, 1):
                raise SampleError(f"{name} must be 0 or 1, got {value}")
        if (C is None) != (O is None):
            raise SampleError("C and O must be given together")
        if H == 0 and C == 1:
            raise SampleError("healthy sample cannot be labelled covid")

        switches = (
            int(lung_mask is not None),
            int(disease_mask is not None),
            int(H is not None),
            int(C is not None and O is not None),
        )
        return cls(
            image=_frozen(image),
            lung_mask=lung_mask,
            disease_mask=disease_mask,
            H=None if H is None else int(H),
            C=None if C is None else int(C),
            O=None if O is None else int(O),
            switches=switches,
            patient_id=patient_id,
            sample_id=sample_id,
            meta=dict(meta or {}),
        )

    @property
    def size(self) -> Tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]


def effective_switches(sample: Sample, task_enable: Optional[Iterable[bool]] = None) -> Switches:
    """AND a sample's switches with per-run task enable flags."""
    if task_enable is None:
        return sample.switches
    enable = tuple(bool(flag) for flag in task_enable)
    if len(enable) != 4:
        raise ValueError(f"task_enable must have 4 flags, got {len(enable)}")
    return tuple(int(s and e) for s, e in zip(sample.switches, enable))  # type: ignore[return-value]


@dataclass(frozen=True)
class Dataset:
    """Ordered samples plus the side of the split they came from."""

    samples: Tuple[Sample, ...]
    split_tag: SplitTag = SplitTag.TRAIN

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "split_tag", SplitTag(self.split_tag))

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, index: int) -> Sample:
        return self.samples[index]

    @property
    def patient_ids(self) -> set:
        return {sample.patient_id for sample in self.samples}
