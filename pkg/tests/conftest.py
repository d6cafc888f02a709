#!/usr/bin/env python3
"""
Pytest configuration and fixtures.
"""

import sys
import pathlib
import tempfile

import numpy as np
import pytest

# Add parent directory to path so we can import the modules
sys.path.insert(0, str(pathlib.Path(__file__).parent.parent))

from src.domain.datamodel import Dataset, Sample
from src.domain.network import NetworkConfig


def tiny_config(size: int = 32, scale_factor: int = 16, **kwargs) -> NetworkConfig:
    """A desk-scale network config (widths 4..32 at scale 16)."""
    return NetworkConfig(input_size=(size, size, 3), scale_factor=scale_factor, **kwargs)


def make_sample(size: int = 32, seed: int = 0, lung: bool = True, disease: bool = True,
                H=1, C=1, O=0, patient_id: str = "P0", sample_id: str = "s0") -> Sample:
    """A random sample with optional masks and labels."""
    rng = np.random.default_rng(seed)
    image = rng.uniform(0.0, 1.0, size=(size, size, 3))
    lung_mask = (rng.uniform(size=(size, size)) < 0.4).astype(np.uint8) if lung else None
    disease_mask = (rng.uniform(size=(size, size)) < 0.1).astype(np.uint8) if disease else None
    return Sample.create(
        image=image,
        patient_id=patient_id,
        lung_mask=lung_mask,
        disease_mask=disease_mask,
        H=H,
        C=C,
        O=O,
        sample_id=sample_id,
    )


@pytest.fixture
def tmp_dir():
    with tempfile.TemporaryDirectory() as tmp:
        yield pathlib.Path(tmp)


@pytest.fixture
def small_dataset():
    """Six labelled 32x32 samples across three classes."""
    labels = [(0, 0, 0), (1, 1, 0), (1, 0, 1)] * 2
    samples = [
        make_sample(seed=i, H=h, C=c, O=o, patient_id=f"P{i}", sample_id=f"s{i}")
        for i, (h, c, o) in enumerate(labels)
    ]
    return Dataset(samples=tuple(samples))
