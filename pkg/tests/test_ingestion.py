#!/usr/bin/env python3
"""
Unit tests for image loading, rasterization, augmentation, splitting and
dataset assembly.
"""

import numpy as np
import pytest
from PIL import Image

from src.domain.datamodel import ManifestRecord, Sample, SplitTag
from src.domain.ingestion import (
    AugmentationSpec,
    DatasetBuildError,
    ImageLoadError,
    RasterizationError,
    RotateOp,
    SplitError,
    TranslateOp,
    augment,
    augment_dataset,
    boxes_to_mask,
    build_dataset,
    load_image,
    load_mask,
    rasterize_manifest,
    save_mask,
    split_subject_disjoint,
    stratum_counts,
)
from src.domain.datamodel import Dataset
from tests.conftest import make_sample


def write_png(path, array):
    Image.fromarray(array).save(path)
    return path


def record(sample_id, patient_id="P1", **kwargs) -> ManifestRecord:
    fields = dict(sample_id=sample_id, patient_id=patient_id, image_path=f"{sample_id}.png", view="PA")
    fields.update(kwargs)
    return ManifestRecord(**fields)


class TestLoadImage:
    """Test cases for load_image."""

    def test_uniform_gray(self, tmp_dir):
        """Test that a constant mid-gray image stays at 0.5 after resizing."""
        path = write_png(tmp_dir / "gray.png", np.full((1024, 1024), 128, dtype=np.uint8))
        image = load_image(path)
        assert image.shape == (224, 224, 3)
        assert image.dtype == np.float32
        assert np.allclose(image, 0.5, atol=1.0 / 255.0)

    def test_aspect_not_preserved(self, tmp_dir):
        """Test that a 512x256 source still becomes 224x224."""
        path = write_png(tmp_dir / "wide.png", np.zeros((256, 512), dtype=np.uint8))
        assert load_image(path).shape == (224, 224, 3)

    def test_rgb_pass_through(self, tmp_dir):
        """Test that three unequal channels survive unchanged."""
        array = np.zeros((224, 224, 3), dtype=np.uint8)
        array[..., 0] = 255
        array[..., 1] = 51
        path = write_png(tmp_dir / "rgb.png", array)
        image = load_image(path)
        assert np.allclose(image[..., 0], 1.0)
        assert np.allclose(image[..., 1], 0.2)
        assert np.allclose(image[..., 2], 0.0)

    def test_grayscale_replicated(self, tmp_dir):
        """Test that grayscale sources fill all three channels equally."""
        rng = np.random.default_rng(0)
        path = write_png(tmp_dir / "noise.png", rng.integers(0, 256, size=(300, 300), dtype=np.uint8))
        image = load_image(path, size=64)
        assert image.shape == (64, 64, 3)
        assert np.array_equal(image[..., 0], image[..., 1])
        assert np.array_equal(image[..., 1], image[..., 2])
        assert image.min() >= 0.0 and image.max() <= 1.0

    def test_sixteen_bit(self, tmp_dir):
        """Test that 16-bit sources are scaled by 65535."""
        path = write_png(tmp_dir / "deep.png", np.full((32, 32), 65535, dtype=np.uint16))
        assert np.allclose(load_image(path, size=32), 1.0)

    def test_missing_file(self, tmp_dir):
        """Test that the error carries the path."""
        with pytest.raises(ImageLoadError) as exc:
            load_image(tmp_dir / "absent.png")
        assert exc.value.path == tmp_dir / "absent.png"

    def test_corrupt_file(self, tmp_dir):
        """Test that undecodable bytes raise ImageLoadError."""
        path = tmp_dir / "broken.png"
        path.write_bytes(b"not an image")
        with pytest.raises(ImageLoadError, match="broken.png"):
            load_image(path)

    def test_mask_round_trip(self, tmp_dir):
        """Test that save_mask writes {0,255} and load_mask reads {0,1}."""
        mask = np.zeros((16, 16), dtype=np.uint8)
        mask[4:8, 2:10] = 1
        path = save_mask(mask, tmp_dir / "m.png")
        assert set(np.unique(np.asarray(Image.open(path)))) == {0, 255}
        assert np.array_equal(load_mask(path, size=16), mask)


class TestBoxesToMask:
    """Test cases for boxes_to_mask."""

    def test_full_cover(self):
        """Test that a box spanning the source covers every pixel."""
        assert boxes_to_mask([(0, 0, 1000, 800)], (1000, 800)).all()

    def test_empty(self):
        """Test that no boxes means no pixels."""
        mask = boxes_to_mask([], (448, 448))
        assert mask.shape == (224, 224)
        assert mask.sum() == 0

    def test_pixel_count(self):
        """Test the quarter box at half scale."""
        mask = boxes_to_mask([(0, 0, 224, 224)], (448, 448))
        assert mask.sum() == 112 * 112
        assert mask[:112, :112].all()
        assert mask[112:, :].sum() == 0 and mask[:, 112:].sum() == 0

    def test_out_of_bounds(self):
        """Test that boxes leaving the source are rejected."""
        with pytest.raises(RasterizationError, match="box out of bounds"):
            boxes_to_mask([(0, 0, 500, 10)], (448, 448))

    def test_monotone(self):
        """Test that adding a box never clears a pixel."""
        rng = np.random.default_rng(3)
        boxes = []
        previous = boxes_to_mask(boxes, (300, 200), 64)
        for _ in range(10):
            x0, x1 = sorted(rng.uniform(0, 300, size=2))
            y0, y1 = sorted(rng.uniform(0, 200, size=2))
            boxes.append((x0, y0, x1, y1))
            current = boxes_to_mask(boxes, (300, 200), 64)
            assert (current >= previous).all()
            previous = current


class TestAugmentation:
    """Test cases for the five-way augmentation."""

    def test_five_outputs(self):
        """Test that every sample yields five variants carrying its labels."""
        sample = make_sample(size=64)
        variants = augment(sample, AugmentationSpec())
        assert len(variants) == 5
        for v in variants:
            assert (v.H, v.C, v.O) == (sample.H, sample.C, sample.O)
            assert v.switches == sample.switches
            assert v.patient_id == sample.patient_id
            assert v.image.shape == sample.image.shape

    def test_zero_mask_stays_zero(self):
        """Test that an empty disease mask stays empty under every op."""
        base = make_sample(size=64)
        sample = Sample.create(image=base.image, patient_id="P", disease_mask=np.zeros((64, 64), dtype=np.uint8))
        assert all(v.disease_mask.sum() == 0 for v in augment(sample))

    def test_translate_single_pixel(self):
        """Test that (+10, 0) moves pixel (x=50, y=50) to (x=60, y=50)."""
        mask = np.zeros((224, 224), dtype=np.uint8)
        mask[50, 50] = 1
        shifted = TranslateOp(10, 0).apply_mask(mask)
        assert shifted[50, 60] == 1
        assert shifted.sum() == 1

    def test_translate_counts(self):
        """Test that shifted masks lose exactly the bits pushed out of frame."""
        rng = np.random.default_rng(11)
        mask = (rng.uniform(size=(40, 40)) < 0.3).astype(np.uint8)
        for dx, dy in [(10, 0), (0, 10), (10, 10), (-7, 3)]:
            shifted = TranslateOp(dx, dy).apply_mask(mask)
            h, w = mask.shape
            kept = mask[max(0, -dy):h - max(0, dy), max(0, -dx):w - max(0, dx)].sum()
            assert shifted.sum() == kept

    def test_rotate_clockwise(self):
        """Test that positive degrees turn content clockwise."""
        mask = np.zeros((65, 65), dtype=np.uint8)
        mask[32, 52] = 1  # right of centre
        rotated = RotateOp(90).apply_mask(mask)
        rows, cols = np.nonzero(rotated)
        # clockwise in image coordinates sends "right" to "below"
        assert rows.mean() > 40 and abs(cols.mean() - 32) <= 1

    def test_rotation_keeps_range(self):
        """Test that rotated images stay in [0, 1] with zero-filled corners."""
        sample = Sample.create(image=np.ones((64, 64, 3)), patient_id="P")
        rotated = augment(sample)[0]
        assert rotated.image.min() >= 0.0 and rotated.image.max() <= 1.0
        assert rotated.image[0, 0, 0] == 0.0

    def test_spec_needs_five_ops(self):
        """Test that AugmentationSpec enforces five ops."""
        with pytest.raises(ValueError, match="exactly 5"):
            AugmentationSpec(ops=(RotateOp(10.0),))

    def test_augment_dataset_strata(self, small_dataset):
        """Test that only flagged strata are augmented and originals kept."""
        augmented = augment_dataset(small_dataset, ("covid",))
        covid = sum(1 for s in small_dataset if s.C == 1)
        assert len(augmented) == len(small_dataset) + 5 * covid
        assert all(a is b for a, b in zip(augmented.samples, small_dataset.samples))
        assert all(s.C == 1 for s in augmented.samples[len(small_dataset):])

    def test_augment_dataset_unknown_stratum(self, small_dataset):
        """Test that unknown strata are rejected."""
        with pytest.raises(ValueError, match="Unknown stratum"):
            augment_dataset(small_dataset, ("nonsense",))


class TestSplit:
    """Test cases for split_subject_disjoint."""

    def test_ten_patients(self):
        """Test the 80/20 split of ten single-record patients."""
        records = [record(f"s{i}", patient_id=f"P{i}") for i in range(10)]
        train, test = split_subject_disjoint(records, 0.8, seed=5)
        assert (len(train), len(test)) == (8, 2)
        assert not ({r.patient_id for r in train} & {r.patient_id for r in test})

    def test_deterministic(self):
        """Test that a fixed seed reproduces the partition."""
        records = [record(f"s{i}", patient_id=f"P{i % 7}") for i in range(20)]
        assert split_subject_disjoint(records, seed=1) == split_subject_disjoint(records, seed=1)

    def test_imbalanced_patients(self):
        """Test that each patient stays whole regardless of size."""
        records = [record(f"a{i}", patient_id="big") for i in range(99)] + [record("b0", patient_id="small")]
        train, test = split_subject_disjoint(records, seed=0)
        assert train and test
        for side in (train, test):
            assert len({r.patient_id for r in side}) == 1

    @pytest.mark.parametrize("seed", range(8))
    def test_closest_reachable_count(self, seed):
        """Test that the train side holds the reachable count nearest the target."""
        sizes = {"A": 3, "B": 6, "C": 4}
        records = [record(f"{pid}{k}", patient_id=pid) for pid, n in sizes.items() for k in range(n)]
        train, test = split_subject_disjoint(records, 0.8, seed=seed)
        assert len(train) == 10
        assert {r.patient_id for r in train} == {"B", "C"}
        assert {r.patient_id for r in test} == {"A"}

    def test_random_manifests_closest(self):
        """Test against an exhaustive search over patient subsets."""
        from itertools import combinations

        rng = np.random.default_rng(7)
        for trial in range(30):
            counts = [int(rng.integers(1, 8)) for _ in range(int(rng.integers(2, 7)))]
            records = [record(f"t{trial}_{p}_{k}", patient_id=f"P{p}") for p, n in enumerate(counts) for k in range(n)]
            target = 0.8 * len(records)
            best = min(
                abs(sum(subset) - target)
                for r in range(1, len(counts))
                for subset in combinations(counts, r)
            )
            train, _ = split_subject_disjoint(records, 0.8, seed=trial)
            assert abs(len(train) - target) == pytest.approx(best)

    def test_single_patient(self):
        """Test that one patient cannot be split."""
        with pytest.raises(SplitError, match="cannot split"):
            split_subject_disjoint([record("a"), record("b")])

    def test_random_manifests(self):
        """Test disjointness and coverage over many random manifests."""
        rng = np.random.default_rng(2024)
        for trial in range(100):
            n_patients = int(rng.integers(2, 15))
            records = []
            for p in range(n_patients):
                for k in range(int(rng.integers(1, 6))):
                    records.append(record(f"t{trial}_p{p}_{k}", patient_id=f"P{p}"))
            train, test = split_subject_disjoint(records, 0.8, seed=trial)
            assert not ({r.patient_id for r in train} & {r.patient_id for r in test})
            ids = sorted(r.sample_id for r in train + test)
            assert ids == sorted(r.sample_id for r in records)
            assert train and test


class TestStratumCounts:
    """Test cases for stratum_counts."""

    def test_counts(self):
        """Test counting per mask availability, class and view."""
        records = [
            record("a", healthy_label=1, covid_label=1, other_disease_label=0, lung_boxes=[(0, 0, 1, 1)]),
            record("b", healthy_label=0, covid_label=0, other_disease_label=0, view="AP"),
            record("c", healthy_label=1, covid_label=0, other_disease_label=1, disease_mask_path="c.png"),
        ]
        counts = stratum_counts(records)
        assert counts == {
            "total": 3, "lung_mask": 1, "disease_mask": 1, "healthy": 1, "unhealthy": 2,
            "covid": 1, "other": 1, "AP": 1, "PA": 2,
        }


class TestBuildDataset:
    """Test cases for build_dataset and rasterize_manifest."""

    def _write_images(self, root, ids, size=48):
        for sid in ids:
            write_png(root / f"{sid}.png", np.full((size, size), 100, dtype=np.uint8))

    def test_presence_propagation(self, tmp_dir):
        """Test that only the record with boxes gets T1=1."""
        self._write_images(tmp_dir, ["a", "b", "c"])
        records = [
            record("a", lung_boxes=[(0, 0, 24, 24)], healthy_label=0),
            record("b", patient_id="P2"),
            record("c", patient_id="P3", healthy_label=1, covid_label=1, other_disease_label=0),
        ]
        dataset = build_dataset(records, image_root=tmp_dir, size=32, split_tag=SplitTag.TEST)
        assert len(dataset) == 3
        assert [s.switches[0] for s in dataset] == [1, 0, 0]
        assert dataset.split_tag is SplitTag.TEST
        assert dataset[0].lung_mask.sum() == 16 * 16
        assert dataset[2].switches == (0, 0, 1, 1)

    def test_missing_disease_mask_is_fatal(self, tmp_dir):
        """Test that a referenced but missing mask names the sample."""
        self._write_images(tmp_dir, ["a"])
        records = [record("a", disease_mask_path="nowhere.png")]
        with pytest.raises(DatasetBuildError, match="sample a"):
            build_dataset(records, mask_dir=tmp_dir, image_root=tmp_dir, size=32)

    def test_empty(self):
        """Test that an empty record list is rejected."""
        with pytest.raises(DatasetBuildError, match="empty dataset"):
            build_dataset([])

    def test_parallel_order(self, tmp_dir):
        """Test that threaded loading keeps record order."""
        ids = [f"s{i}" for i in range(8)]
        self._write_images(tmp_dir, ids)
        records = [record(sid, patient_id=sid) for sid in ids]
        dataset = build_dataset(records, image_root=tmp_dir, size=16, workers=4)
        assert [s.sample_id for s in dataset] == ids

    def test_rasterize_manifest(self, tmp_dir):
        """Test that one mask file is written per boxed record."""
        self._write_images(tmp_dir, ["a", "b"])
        records = [record("a", lung_boxes=[(0, 0, 48, 48)]), record("b")]
        written = rasterize_manifest(records, tmp_dir / "masks", image_root=tmp_dir, size=16)
        assert [p.name for p in written] == ["a_lung.png"]
        assert load_mask(written[0], size=16).all()
