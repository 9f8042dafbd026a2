import numpy as np
import pytest

from core.schemas import LabelVolume, Volume
from src.config import ArchConfig


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-resolution reference model runs (deselect with -m 'not slow')")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    """Small but structurally complete network: three levels, a wide level, 16x32x32 input."""
    return ArchConfig(levels=3, widths=(8, 16, 16), wide_levels=(2,), input_shape=(16, 32, 32))


def make_phantom(shape=(32, 32, 32), radius=9.0, z_margin=4, cavity=False):
    """-1000 HU air with a solid 0 HU cylinder along z; returns (volume, cylinder mask)."""
    d, h, w = shape
    yy, xx = np.mgrid[:h, :w]
    disk = (yy - (h - 1) / 2.0) ** 2 + (xx - (w - 1) / 2.0) ** 2 <= radius ** 2
    mask = np.zeros(shape, dtype=bool)
    mask[z_margin:d - z_margin] = disk
    data = np.where(mask, 0.0, -1000.0).astype(np.float32)
    if cavity:
        cz, cy, cx = d // 2, h // 2, w // 2
        data[cz - 2:cz + 2, cy - 2:cy + 2, cx - 2:cx + 2] = -1000.0
    return Volume(data=data, spacing=(2.0, 1.5, 1.5)), mask


@pytest.fixture
def phantom():
    return make_phantom()


def organ_labels(shape, rng, classes=5):
    return LabelVolume(data=rng.integers(0, classes, size=shape).astype(np.uint8), class_count=classes)
