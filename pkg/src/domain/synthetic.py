#!/usr/bin/env python3
"""
Deterministic synthetic radiographs for desk-scale runs and tests.

Each image shows two dark elliptical "lungs" on a brighter body. Unhealthy
samples get bright blob "lesions" inside the lungs: COVID samples carry a
bilateral pair in the lower zones, other-disease samples a single blob in
one lung. Lung annotation boxes are the bounding boxes of the ellipses and
disease masks are the blob supports.

Layout written under the output directory:
    manifest.jsonl
    images/<sample_id>.png
    masks/<sample_id>_lung.png
    masks/<sample_id>_disease.png

Paths inside the manifest are relative to the output directory.
"""

from __future__ import annotations

import logging
import pathlib
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from PIL import Image

from .datamodel import ManifestRecord, View, write_manifest
from .ingestion import boxes_to_mask, save_mask

logger = logging.getLogger(__name__)

HEALTHY, COVID, OTHER = 0, 1, 2
CLASS_LABELS = {
    HEALTHY: (0, 0, 0),
    COVID: (1, 1, 0),
    OTHER: (1, 0, 1),
}


@dataclass(frozen=True)
class SyntheticFixture:
    """Files produced by generate_synthetic()."""

    root: pathlib.Path
    manifest_path: pathlib.Path
    records: Tuple[ManifestRecord, ...]
    image_paths: Tuple[pathlib.Path, ...]
    mask_paths: Tuple[pathlib.Path, ...]


def _ellipse(yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _blob(yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, radius: float) -> np.ndarray:
    return ((yy - cy) ** 2 + (xx - cx) ** 2) <= radius ** 2


def _render(rng: np.random.Generator, size: int, label_class: int):
    """Render one image; returns (image uint8, lung boxes, disease mask)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    jitter = lambda: rng.uniform(-0.02, 0.02) * size

    body = 0.55 + 0.1 * (yy / size)
    image = body.copy()

    lungs = []
    boxes = []
    for side in (0.32, 0.68):
        cy, cx = 0.5 * size + jitter(), side * size + jitter()
        ry, rx = 0.3 * size, 0.13 * size
        lungs.append((cy, cx, ry, rx))
        image[_ellipse(yy, xx, cy, cx, ry, rx)] = 0.2
        boxes.append((
            float(max(0.0, np.floor(cx - rx))),
            float(max(0.0, np.floor(cy - ry))),
            float(min(float(size), np.ceil(cx + rx))),
            float(min(float(size), np.ceil(cy + ry))),
        ))

    disease = np.zeros((size, size), dtype=bool)
    radius = 0.06 * size
    if label_class == COVID:
        # bilateral lower-zone consolidation
        for cy, cx, ry, rx in lungs:
            disease |= _blob(yy, xx, cy + 0.15 * size, cx, radius) & _ellipse(yy, xx, cy, cx, ry, rx)
    elif label_class == OTHER:
        cy, cx, ry, rx = lungs[int(rng.integers(0, 2))]
        dy = rng.uniform(-0.5, 0.1) * ry
        dx = rng.uniform(-0.3, 0.3) * rx
        disease |= _blob(yy, xx, cy + dy, cx + dx, radius) & _ellipse(yy, xx, cy, cx, ry, rx)

    image[disease] = 0.85
    image = image + rng.normal(0.0, 0.02, size=image.shape)
    pixels = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    return pixels, boxes, disease.astype(np.uint8)


def generate_synthetic(n: int, seed: int, out_dir: pathlib.Path, size: int = 224,
                       missing_rate: float = 0.0, records_per_patient: int = 1) -> SyntheticFixture:
    """Write a deterministic synthetic fixture.

    Classes (healthy / COVID / other) are dealt round-robin and then shuffled
    by seed, so any n >= 3 contains all three. With missing_rate > 0 each
    annotation group (lung boxes, disease mask, H, C+O) is dropped
    independently with that probability.

    Args:
        n: Number of samples, at least 1.
        seed: Seed for every random choice.
        out_dir: Output directory.
        size: Side length of the square source images.
        missing_rate: Probability of dropping each annotation group.
        records_per_patient: Consecutive samples sharing one patient_id.

    Returns:
        SyntheticFixture describing the written files.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")

    out_dir = pathlib.Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    classes = rng.permutation([i % 3 for i in range(n)])

    records: List[ManifestRecord] = []
    image_paths: List[pathlib.Path] = []
    mask_paths: List[pathlib.Path] = []

    for i in range(n):
        sample_id = f"syn_{i:04d}"
        label_class = int(classes[i])
        pixels, boxes, disease = _render(rng, size, label_class)
        H, C, O = CLASS_LABELS[label_class]
        view = View.AP if rng.random() < 0.5 else View.PA
        drop = rng.random(4) < missing_rate

        image_rel = f"images/{sample_id}.png"
        Image.fromarray(pixels).save(out_dir / image_rel)
        image_paths.append(out_dir / image_rel)

        lung_rel = f"masks/{sample_id}_lung.png"
        mask_paths.append(save_mask(boxes_to_mask(boxes, (size, size), size), out_dir / lung_rel))
        disease_rel = f"masks/{sample_id}_disease.png"
        mask_paths.append(save_mask(disease, out_dir / disease_rel))

        records.append(ManifestRecord(
            sample_id=sample_id,
            patient_id=f"P{i // max(1, records_per_patient):04d}",
            image_path=image_rel,
            view=view,
            healthy_label=None if drop[2] else H,
            covid_label=None if drop[3] else C,
            other_disease_label=None if drop[3] else O,
            lung_boxes=None if drop[0] else boxes,
            disease_mask_path=None if drop[1] else disease_rel,
            source_tag="synthetic",
        ))

    manifest_path = write_manifest(records, out_dir / "manifest.jsonl")
    logger.info(f"Generated {n} synthetic samples (seed {seed}) in {out_dir}")
    return SyntheticFixture(
        root=out_dir,
        manifest_path=manifest_path,
        records=tuple(records),
        image_paths=tuple(image_paths),
        mask_paths=tuple(mask_paths),
    )
