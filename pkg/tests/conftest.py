import numpy as np
import pytest

from protocase import data as D
from protocase import network as N

MICRO_CHANNELS = (4, 4, 8, 8, 8)


def micro_config(image_size=(16, 16), prototypes_per_type=2, pool_fraction=0.125) -> N.ModelConfig:
    return N.ModelConfig(image_size=image_size, layers=N.conv_layers(MICRO_CHANNELS),
                         prototypes_per_type=prototypes_per_type, pool_fraction=pool_fraction)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset():
    """8 samples per type, full 64x64 images."""
    return D.generate(D.GenConfig(n_per_type=8, seed=3, fine_fraction=0.25))


@pytest.fixture(scope="session")
def tiny_train(tiny_dataset):
    return tiny_dataset.split("train")


def shrink(sample: D.Sample, f: int = 4) -> D.Sample:
    """Block-average an image (and max-pool its masks) down by ``f`` for fast training tests."""
    def pool(a, op):
        h, w = a.shape
        return op(a.reshape(h // f, f, w // f, f), axis=(1, 3))
    fine = None if sample.fine_mask is None else pool(sample.fine_mask, np.min)
    return D.Sample(sample.id, pool(sample.image, np.mean), sample.margin_label, sample.malignancy_label,
                    pool(sample.lesion_mask, np.min), fine)


@pytest.fixture(scope="session")
def micro_train(tiny_train):
    """The tiny training split at 16x16, for the micro model."""
    return [shrink(s) for s in tiny_train]


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
