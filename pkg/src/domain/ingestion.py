#!/usr/bin/env python3
"""
Turn manifests and raster files into Datasets.

Covers image loading and normalization, bounding-box to mask rasterization,
the five-way augmentation, the subject-disjoint train/test split and the
per-stratum counts used when curating a manifest.

Image files are 8-bit or 16-bit PNG (grayscale or RGB). Mask files are PNG
with values {0, 255}, read back as {0, 1}.
"""

from __future__ import annotations

import logging
import math
import pathlib
from abc import ABC, abstractmethod
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Dict, Iterable

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from PIL import Image, UnidentifiedImageError
from torchvision.transforms import InterpolationMode

from .datamodel import (
    Box,
    Dataset,
    ManifestRecord,
    Sample,
    SampleError,
    SplitTag,
    View,
)

logger = logging.getLogger(__name__)

DEFAULT_SIZE = 224


class ImageLoadError(RuntimeError):
    """Raised when a raster file cannot be read."""

    def __init__(self, path: pathlib.Path, reason: str):
        super().__init__(f"Cannot load image {path}: {reason}")
        self.path = pathlib.Path(path)


class RasterizationError(ValueError):
    """Raised when boxes cannot be rasterized."""


class SplitError(ValueError):
    """Raised when a manifest cannot be split subject-disjointly."""


class DatasetBuildError(RuntimeError):
    """Raised when a Dataset cannot be assembled from a manifest."""


################################################################################
# Raster I/O
################################################################################
def _read_raster(path: pathlib.Path) -> np.ndarray:
    """Read a raster into an H x W x C float array scaled to [0, 1]."""
    path = pathlib.Path(path)
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode in ("I;16", "I;16B", "I;16L", "I"):
                array = np.asarray(img, dtype=np.float64) / 65535.0
            elif mode in ("L", "RGB"):
                array = np.asarray(img, dtype=np.float64) / 255.0
            else:
                # palette, alpha and bilevel images are flattened to RGB
                array = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    except FileNotFoundError as e:
        raise ImageLoadError(path, "file not found") from e
    except (UnidentifiedImageError, OSError, ValueError) as e:
        raise ImageLoadError(path, str(e)) from e

    if array.ndim == 2:
        array = array[:, :, None]
    return np.clip(array, 0.0, 1.0)


def _resize(array: np.ndarray, size: int, mode: str) -> np.ndarray:
    """Resize an H x W x C array to size x size."""
    if array.shape[0] == size and array.shape[1] == size:
        return array
    tensor = torch.from_numpy(np.ascontiguousarray(array.transpose(2, 0, 1))).unsqueeze(0)
    if mode == "bilinear":
        out = F.interpolate(tensor, size=(size, size), mode="bilinear", align_corners=False)
    else:
        out = F.interpolate(tensor, size=(size, size), mode="nearest")
    return out.squeeze(0).numpy().transpose(1, 2, 0)


def load_image(path: pathlib.Path, size: int = DEFAULT_SIZE) -> np.ndarray:
    """Load a radiograph as a size x size x 3 grid in [0, 1].

    Grayscale sources are replicated to three channels; three-channel sources
    pass through unchanged. Aspect ratio is not preserved.

    Args:
        path: Raster file path.
        size: Output side length.

    Returns:
        float32 array of shape (size, size, 3).

    Raises:
        ImageLoadError: If the file is missing or cannot be decoded.
    """
    array = _read_raster(path)
    array = _resize(array, size, "bilinear")
    if array.shape[2] == 1:
        array = np.repeat(array, 3, axis=2)
    return np.clip(array, 0.0, 1.0).astype(np.float32)


def load_mask(path: pathlib.Path, size: int = DEFAULT_SIZE) -> np.ndarray:
    """Load a {0,255} PNG mask as a size x size {0,1} grid (nearest resize)."""
    array = _read_raster(path)[:, :, :1]
    array = _resize(array, size, "nearest")
    return (array[:, :, 0] >= 0.5).astype(np.uint8)


def save_mask(mask: np.ndarray, path: pathlib.Path) -> pathlib.Path:
    """Write a {0,1} grid as a {0,255} 8-bit PNG."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)
    return path


def source_dims(path: pathlib.Path) -> Tuple[int, int]:
    """Return (W, H) of a raster without decoding its pixels."""
    try:
        with Image.open(path) as img:
            return img.size
    except FileNotFoundError as e:
        raise ImageLoadError(path, "file not found") from e
    except (UnidentifiedImageError, OSError) as e:
        raise ImageLoadError(path, str(e)) from e


################################################################################
# Rasterization
################################################################################
def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def boxes_to_mask(boxes: Sequence[Box], source_dims: Tuple[int, int], size: int = DEFAULT_SIZE) -> np.ndarray:
    """Rasterize axis-aligned boxes into a size x size binary grid.

    Box coordinates are pixel edges in source space. After scaling and
    rounding half up, pixel column c is covered when x0 <= c < x1 (rows
    likewise), so a box spanning the whole source covers the whole grid.

    Args:
        boxes: (x_min, y_min, x_max, y_max) boxes in source pixels.
        source_dims: (W, H) of the source image.
        size: Output side length.

    Returns:
        uint8 grid, union of the boxes.

    Raises:
        RasterizationError: If a box lies outside the source image.
    """
    width, height = source_dims
    mask = np.zeros((size, size), dtype=np.uint8)
    sx = size / float(width)
    sy = size / float(height)

    for box in boxes:
        x_min, y_min, x_max, y_max = box
        if x_min < 0 or y_min < 0 or x_max > width or y_max > height:
            raise RasterizationError(f"box out of bounds: {tuple(box)} for source {width}x{height}")
        c0 = min(max(_round_half_up(x_min * sx), 0), size)
        c1 = min(max(_round_half_up(x_max * sx), 0), size)
        r0 = min(max(_round_half_up(y_min * sy), 0), size)
        r1 = min(max(_round_half_up(y_max * sy), 0), size)
        mask[r0:r1, c0:c1] = 1

    return mask


################################################################################
# Augmentation
################################################################################
class AugmentationOp(ABC):
    """One geometric transform applied jointly to an image and its masks."""

    def __init__(self):
        self._op_type = self.__class__.__name__.replace("Op", "").lower()

    @abstractmethod
    def apply_image(self, image: np.ndarray) -> np.ndarray:
        """Transform an H x W x 3 float image (bilinear, zero fill)."""
        pass

    @abstractmethod
    def apply_mask(self, mask: np.ndarray) -> np.ndarray:
        """Transform an H x W {0,1} mask (nearest neighbour, zero fill)."""
        pass

    def __call__(self, sample: Sample) -> Sample:
        lung = None if sample.lung_mask is None else self.apply_mask(sample.lung_mask)
        disease = None if sample.disease_mask is None else self.apply_mask(sample.disease_mask)
        image = np.clip(self.apply_image(sample.image), 0.0, 1.0)
        return Sample.create(
            image=image,
            patient_id=sample.patient_id,
            lung_mask=lung,
            disease_mask=disease,
            H=sample.H,
            C=sample.C,
            O=sample.O,
            sample_id=f"{sample.sample_id}:{self.describe()}",
            meta={**sample.meta, "augmentation": self.describe()},
        )

    @abstractmethod
    def describe(self) -> str:
        pass


class RotateOp(AugmentationOp):
    """Rotation about the image centre; positive degrees turn clockwise."""

    def __init__(self, degrees: float):
        super().__init__()
        self.degrees = float(degrees)

    def _rotate(self, array: np.ndarray, interpolation: InterpolationMode) -> np.ndarray:
        tensor = torch.from_numpy(np.ascontiguousarray(array.transpose(2, 0, 1)))
        # torchvision turns counter-clockwise for positive angles
        rotated = TF.rotate(tensor, angle=-self.degrees, interpolation=interpolation, fill=0.0)
        return rotated.numpy().transpose(1, 2, 0)

    def apply_image(self, image: np.ndarray) -> np.ndarray:
        return self._rotate(image.astype(np.float32), InterpolationMode.BILINEAR)

    def apply_mask(self, mask: np.ndarray) -> np.ndarray:
        rotated = self._rotate(mask.astype(np.float32)[:, :, None], InterpolationMode.NEAREST)
        return (rotated[:, :, 0] >= 0.5).astype(np.uint8)

    def describe(self) -> str:
        return f"{self._op_type}{self.degrees:+g}"


class TranslateOp(AugmentationOp):
    """Integer pixel shift; +dx moves content right, +dy moves it down."""

    def __init__(self, dx: int, dy: int):
        super().__init__()
        self.dx = int(dx)
        self.dy = int(dy)

    def _shift(self, array: np.ndarray) -> np.ndarray:
        out = np.zeros_like(array)
        h, w = array.shape[:2]
        dx, dy = self.dx, self.dy
        if abs(dx) >= w or abs(dy) >= h:
            return out
        src_rows = slice(max(0, -dy), h - max(0, dy))
        dst_rows = slice(max(0, dy), h - max(0, -dy))
        src_cols = slice(max(0, -dx), w - max(0, dx))
        dst_cols = slice(max(0, dx), w - max(0, -dx))
        out[dst_rows, dst_cols] = array[src_rows, src_cols]
        return out

    def apply_image(self, image: np.ndarray) -> np.ndarray:
        return self._shift(image)

    def apply_mask(self, mask: np.ndarray) -> np.ndarray:
        return self._shift(mask)

    def describe(self) -> str:
        return f"{self._op_type}{self.dx:+d}{self.dy:+d}"


@dataclass(frozen=True)
class AugmentationSpec:
    """The fixed five-way augmentation: two rotations, three translations."""

    ops: Tuple[AugmentationOp, ...] = (
        RotateOp(10.0),
        RotateOp(-10.0),
        TranslateOp(10, 0),
        TranslateOp(0, 10),
        TranslateOp(10, 10),
    )

    def __post_init__(self):
        if len(self.ops) != 5:
            raise ValueError(f"augmentation spec must hold exactly 5 ops, got {len(self.ops)}")


def augment(sample: Sample, spec: Optional[AugmentationSpec] = None) -> List[Sample]:
    """Produce the five augmented variants of a sample.

    Masks are transformed with the image; labels, switches and patient_id
    are carried over unchanged.
    """
    spec = spec or AugmentationSpec()
    return [op(sample) for op in spec.ops]


STRATA = ("all", "covid", "other", "healthy", "unhealthy")


def _in_stratum(sample: Sample, stratum: str) -> bool:
    if stratum == "all":
        return True
    if stratum == "covid":
        return sample.C == 1
    if stratum == "other":
        return sample.O == 1
    if stratum == "healthy":
        return sample.H == 0
    if stratum == "unhealthy":
        return sample.H == 1
    raise ValueError(f"Unknown stratum: {stratum}. Must be one of: {', '.join(STRATA)}")


def augment_dataset(dataset: Dataset, strata: Iterable[str] = ("covid",),
                    spec: Optional[AugmentationSpec] = None) -> Dataset:
    """Keep every sample and append the five variants of flagged strata.

    Args:
        dataset: Training split (augmentation is never applied to test data).
        strata: Strata whose samples are augmented.
        spec: Augmentation ops, default five-way spec.

    Returns:
        New Dataset with originals first, then augmented variants in order.
    """
    strata = tuple(strata)
    unknown = [s for s in strata if s not in STRATA]
    if unknown:
        raise ValueError(f"Unknown stratum: {unknown[0]}. Must be one of: {', '.join(STRATA)}")

    extra: List[Sample] = []
    for sample in dataset:
        if any(_in_stratum(sample, s) for s in strata):
            extra.extend(augment(sample, spec))

    logger.info(f"Augmented {len(extra) // 5} of {len(dataset)} samples (strata: {', '.join(strata) or 'none'})")
    return Dataset(samples=tuple(dataset.samples) + tuple(extra), split_tag=dataset.split_tag)


################################################################################
# Splitting and stratum counts
################################################################################
def split_subject_disjoint(records: Sequence[ManifestRecord], train_fraction: float = 0.8,
                           seed: int = 0) -> Tuple[List[ManifestRecord], List[ManifestRecord]]:
    """Split records so that no patient lands on both sides.

    The train record count is the reachable patient-subset sum closest to
    train_fraction * total (ties go to the smaller count). Among subsets with
    that sum, the one built from the earliest patients of a seeded shuffle is
    taken. Both sides always receive at least one patient.

    Args:
        records: Manifest records, each with a patient_id.
        train_fraction: Target share of records on the train side.
        seed: Shuffle seed.

    Returns:
        (train_records, test_records), each in input order.

    Raises:
        SplitError: If fewer than 2 patients are present or a patient_id is empty.
    """
    if any(not r.patient_id for r in records):
        raise SplitError("every record needs a patient_id")

    per_patient = Counter(r.patient_id for r in records)
    patients = sorted(per_patient)
    if len(patients) < 2:
        raise SplitError(f"cannot split: {len(patients)} patient(s)")

    order = [patients[i] for i in np.random.default_rng(seed).permutation(len(patients))]
    sizes = [per_patient[pid] for pid in order]
    total = len(records)
    target = train_fraction * total

    # reach[i, s]: some subset of the first i shuffled patients holds s records
    reach = np.zeros((len(order) + 1, total + 1), dtype=bool)
    reach[0, 0] = True
    for i, size in enumerate(sizes, start=1):
        reach[i] = reach[i - 1]
        reach[i, size:] |= reach[i - 1, :total + 1 - size]

    # every patient has >= 1 record, so 0 < s < total keeps both sides non-empty
    reachable = [s for s in range(1, total) if reach[-1, s]]
    count = min(reachable, key=lambda s: (abs(s - target), s))

    train_set = set()
    remaining = count
    for i in range(len(order), 0, -1):
        if reach[i - 1, remaining]:
            continue
        train_set.add(order[i - 1])
        remaining -= sizes[i - 1]

    train = [r for r in records if r.patient_id in train_set]
    test = [r for r in records if r.patient_id not in train_set]
    logger.info(f"Split {len(records)} records / {len(patients)} patients into {len(train)} train and {len(test)} test")
    return train, test


def stratum_counts(records: Iterable[ManifestRecord]) -> Dict[str, int]:
    """Count records per mask availability, class and view.

    The library reports the counts; balancing the manifest is left to the
    curator.
    """
    counts = {key: 0 for key in (
        "total", "lung_mask", "disease_mask", "healthy", "unhealthy",
        "covid", "other", "AP", "PA",
    )}
    for r in records:
        counts["total"] += 1
        counts["lung_mask"] += int(r.lung_boxes is not None)
        counts["disease_mask"] += int(r.disease_mask_path is not None)
        counts["healthy"] += int(r.healthy_label == 0)
        counts["unhealthy"] += int(r.healthy_label == 1)
        counts["covid"] += int(r.covid_label == 1)
        counts["other"] += int(r.other_disease_label == 1)
        counts[View(r.view).value] += 1
    return counts


################################################################################
# Dataset assembly
################################################################################
def _resolve(path_str: str, root: Optional[pathlib.Path]) -> pathlib.Path:
    path = pathlib.Path(path_str)
    if not path.is_absolute() and root is not None:
        path = pathlib.Path(root) / path
    return path


def _build_sample(record: ManifestRecord, mask_dir: Optional[pathlib.Path],
                  image_root: Optional[pathlib.Path], size: int) -> Sample:
    try:
        image_path = _resolve(record.image_path, image_root)
        image = load_image(image_path, size)

        lung_mask = None
        if record.lung_boxes is not None:
            lung_mask = boxes_to_mask(record.lung_boxes, source_dims(image_path), size)

        disease_mask = None
        if record.disease_mask_path is not None:
            disease_mask = load_mask(_resolve(record.disease_mask_path, mask_dir), size)

        return Sample.create(
            image=image,
            patient_id=record.patient_id,
            lung_mask=lung_mask,
            disease_mask=disease_mask,
            H=record.healthy_label,
            C=record.covid_label,
            O=record.other_disease_label,
            sample_id=record.sample_id,
            meta={"view": View(record.view).value, "source_tag": record.source_tag},
        )
    except (ImageLoadError, RasterizationError, SampleError) as e:
        raise DatasetBuildError(f"sample {record.sample_id}: {e}") from e


def build_dataset(records: Sequence[ManifestRecord], mask_dir: Optional[pathlib.Path] = None,
                  image_root: Optional[pathlib.Path] = None, size: int = DEFAULT_SIZE,
                  split_tag: SplitTag = SplitTag.TRAIN, workers: int = 1) -> Dataset:
    """Load images and masks for validated records.

    Samples missing optional annotations are kept; their switches handle
    them. A referenced file that cannot be read is a hard error.

    Args:
        records: Validated manifest records.
        mask_dir: Directory that relative disease_mask_path values resolve against.
        image_root: Directory that relative image_path values resolve against.
        size: Output side length for images and masks.
        split_tag: Which side of the split the records belong to.
        workers: Loader threads; output order always follows the records.

    Returns:
        Dataset with one sample per record.

    Raises:
        DatasetBuildError: On an empty record list or any unreadable file.
    """
    if not records:
        raise DatasetBuildError("empty dataset")

    def load(record: ManifestRecord) -> Sample:
        return _build_sample(record, mask_dir, image_root, size)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(load, records))
    else:
        samples = [load(r) for r in records]

    logger.info(f"Built {SplitTag(split_tag).value} dataset of {len(samples)} samples")
    return Dataset(samples=tuple(samples), split_tag=split_tag)


def rasterize_manifest(records: Sequence[ManifestRecord], out_dir: pathlib.Path,
                       image_root: Optional[pathlib.Path] = None,
                       size: int = DEFAULT_SIZE) -> List[pathlib.Path]:
    """Write a lung mask PNG for every record that has lung boxes.

    Returns:
        Paths written, named <sample_id>_lung.png.
    """
    out_dir = pathlib.Path(out_dir)
    written = []
    for record in records:
        if record.lung_boxes is None:
            continue
        image_path = _resolve(record.image_path, image_root)
        mask = boxes_to_mask(record.lung_boxes, source_dims(image_path), size)
        written.append(save_mask(mask, out_dir / f"{record.sample_id}_lung.png"))
    logger.info(f"Rasterized {len(written)} lung masks into {out_dir}")
    return written
