import numpy as np
import pytest

from mccseg.data_pipeline import DatasetDescriptor, RasterPair, write_manifest
from mccseg.taxonomy import CANONICAL


def make_pair(h, w, seed=0, classes=5, id="p", split="train"):
    rng = np.random.default_rng(seed)
    image = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
    labels = rng.integers(0, classes, (h, w), dtype=np.uint8)
    return RasterPair(image, labels, 1.0, 1.0, split, id)


@pytest.fixture
def pair_factory():
    return make_pair


@pytest.fixture
def toy_manifest(tmp_path):
    """Canonical-taxonomy manifest of four 32x32 train pairs and two test pairs."""
    pairs = [make_pair(32, 32, seed=i, id=f"tr{i}") for i in range(4)]
    pairs += [make_pair(32, 32, seed=10 + i, id=f"te{i}", split="test") for i in range(2)]
    desc = DatasetDescriptor("toy", 16, CANONICAL, "rules-a", 2.5, 2.5, pairs)
    return write_manifest(tmp_path / "toy.json", desc)
