import numpy as np
import pytest

from core.errors import LabelRangeError, ShapeMismatchError
from core.schemas import LabelVolume
from src.postprocess import argmax_channels, remap_labels, upsample_nearest


def test_argmax_picks_largest(rng):
    logits = rng.normal(size=(6, 3, 4, 5)).astype(np.float32)
    lv = argmax_channels(logits, spacing=(2.0, 1.0, 1.0))
    np.testing.assert_array_equal(lv.data, logits.argmax(axis=0))
    assert lv.class_count == 6 and lv.spacing == (2.0, 1.0, 1.0)


def test_argmax_ties_go_to_lowest_channel():
    logits = np.zeros((6, 2, 2, 2), np.float32)
    logits[3] = 1.0
    logits[5] = 1.0
    assert argmax_channels(logits).labels() == {3}
    assert argmax_channels(np.zeros((6, 2, 2, 2), np.float32)).labels() == {0}


def test_argmax_rejects_bad_logits():
    with pytest.raises(ShapeMismatchError):
        argmax_channels(np.zeros((6, 2, 2), np.float32))
    with pytest.raises(ShapeMismatchError):
        argmax_channels(np.zeros((1, 2, 2, 2), np.float32))


def test_upsample_restores_original_shape(rng):
    lv = LabelVolume(data=rng.integers(0, 6, size=(4, 8, 8)), class_count=6, spacing=(3.0, 2.0, 2.0))
    out = upsample_nearest(lv, (7, 19, 13), spacing=(1.5, 0.9, 1.1), origin=(1.0, 2.0, 3.0))
    assert out.shape == (7, 19, 13)
    assert out.spacing == (1.5, 0.9, 1.1) and out.origin == (1.0, 2.0, 3.0)
    assert out.labels() <= lv.labels()


def test_upsample_doubling_repeats_voxels(rng):
    data = rng.integers(0, 6, size=(2, 3, 4))
    out = upsample_nearest(LabelVolume(data=data, class_count=6), (4, 6, 8))
    expected = data.repeat(2, axis=0).repeat(2, axis=1).repeat(2, axis=2)
    np.testing.assert_array_equal(out.data, expected)
    np.testing.assert_allclose(out.spacing, (0.5, 0.5, 0.5))


def test_upsample_bad_target():
    lv = LabelVolume(data=np.zeros((2, 2, 2), np.uint8))
    with pytest.raises(ShapeMismatchError):
        upsample_nearest(lv, (2, 2))
    with pytest.raises(ShapeMismatchError):
        upsample_nearest(lv, (2, 0, 2))


def test_remap_labels():
    data = np.arange(6, dtype=np.uint8).reshape(1, 1, 6)
    out = remap_labels(LabelVolume(data=data, class_count=6))
    np.testing.assert_array_equal(out.data.ravel(), [0, 0, 1, 2, 3, 4])
    assert out.class_count == 5


def test_remap_rejects_out_of_range():
    with pytest.raises(LabelRangeError):
        remap_labels(LabelVolume(data=np.full((2, 2, 2), 6, np.uint8)))
