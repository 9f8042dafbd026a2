import numpy as np
import pytest

from core.errors import LabelRangeError, ShapeMismatchError
from core.schemas import LabelVolume, Volume
from src.config import AIR_HU
from src.training import (
    LossSpec,
    augment_rotate_inplane,
    augment_rotate_inplane_labels,
    augment_scale,
    augment_scale_labels,
    augment_shift,
    augment_shift_labels,
    one_hot,
    soft_dice_grad,
    softmax_channels,
    weighted_soft_dice_loss,
)

K = 6
SHAPE = (4, 4, 4)


def _case(rng):
    labels = LabelVolume(data=rng.integers(0, K, size=SHAPE), class_count=K)
    probs = softmax_channels(rng.normal(size=(K,) + SHAPE))
    return probs, one_hot(labels, K)


# ══════════════════════════════════════════════════════════════════════════════
#  LOSS
# ══════════════════════════════════════════════════════════════════════════════

def test_one_hot():
    lv = LabelVolume(data=np.array([0, 2, 5], np.uint8).reshape(1, 1, 3), class_count=K)
    oh = one_hot(lv, K)
    assert oh.shape == (K, 1, 1, 3)
    np.testing.assert_array_equal(oh.sum(axis=0), 1.0)
    assert oh[2, 0, 0, 1] == 1.0 and oh[5, 0, 0, 2] == 1.0
    with pytest.raises(LabelRangeError):
        one_hot(lv, 4)


def test_softmax_is_stable():
    logits = np.array([1000.0, 1000.0, -1000.0]).reshape(3, 1, 1, 1)
    p = softmax_channels(logits)
    np.testing.assert_allclose(p.ravel(), [0.5, 0.5, 0.0])
    assert np.isfinite(p).all()


def test_perfect_prediction_has_zero_loss(rng):
    _, onehot = _case(rng)
    for denominator in ("squared", "linear"):
        spec = LossSpec.uniform(K, denominator=denominator)
        assert weighted_soft_dice_loss(onehot, onehot, spec) < 1e-6


def test_absent_class_contributes_perfect_dice():
    onehot = np.zeros((2, 2, 2, 2))
    onehot[0] = 1.0
    spec = LossSpec.uniform(2)
    assert weighted_soft_dice_loss(onehot, onehot, spec) < 1e-6


def test_loss_in_unit_interval(rng):
    for _ in range(10):
        probs, onehot = _case(rng)
        loss = weighted_soft_dice_loss(probs, onehot, LossSpec.uniform(K))
        assert 0.0 <= loss <= 1.0


def test_weight_scale_invariance(rng):
    probs, onehot = _case(rng)
    weights = tuple(rng.uniform(0.1, 2.0, size=K).tolist())
    a = weighted_soft_dice_loss(probs, onehot, LossSpec(weights=weights))
    b = weighted_soft_dice_loss(probs, onehot, LossSpec(weights=tuple(3.0 * w for w in weights)))
    assert a == pytest.approx(b, rel=1e-12)


@pytest.mark.parametrize("denominator", ["squared", "linear"])
def test_gradient_matches_finite_differences(rng, denominator):
    h = 1e-3
    for _ in range(20):
        probs, onehot = _case(rng)
        spec = LossSpec(weights=tuple(rng.uniform(0.5, 2.0, size=K).tolist()), denominator=denominator)
        grad = soft_dice_grad(probs, onehot, spec)
        for flat in rng.choice(probs.size, size=5, replace=False):
            idx = np.unravel_index(flat, probs.shape)
            up, down = probs.copy(), probs.copy()
            up[idx] += h
            down[idx] -= h
            numeric = (weighted_soft_dice_loss(up, onehot, spec) - weighted_soft_dice_loss(down, onehot, spec)) / (2 * h)
            scale = max(abs(numeric), abs(grad[idx]), 1e-8)
            assert abs(numeric - grad[idx]) / scale < 1e-4


def test_inverse_frequency_weights():
    data = np.zeros((1, 1, 10), np.uint8)
    data[0, 0, :2] = 1
    oh = one_hot(LabelVolume(data=data, class_count=3), 3)
    spec = LossSpec.inverse_frequency(oh)
    assert spec.weights[2] == 0.0
    assert spec.weights[1] == pytest.approx(4 * spec.weights[0])
    assert sum(spec.weights) == pytest.approx(3.0)


def test_invalid_loss_inputs(rng):
    probs, onehot = _case(rng)
    with pytest.raises(ValueError):
        LossSpec(weights=(0.0,) * K)
    with pytest.raises(ValueError):
        LossSpec(weights=(1.0, -1.0))
    with pytest.raises(ShapeMismatchError):
        weighted_soft_dice_loss(probs[:, :2], onehot, LossSpec.uniform(K))
    with pytest.raises(ShapeMismatchError):
        weighted_soft_dice_loss(probs, onehot, LossSpec.uniform(K - 1))
    with pytest.raises(LabelRangeError):
        weighted_soft_dice_loss(probs, onehot * 2, LossSpec.uniform(K))


# ══════════════════════════════════════════════════════════════════════════════
#  AUGMENTATION
# ══════════════════════════════════════════════════════════════════════════════

def _blob(shape=(4, 33, 33), sigma=6.0):
    _, yy, xx = np.mgrid[:shape[0], :shape[1], :shape[2]]
    cy, cx = (shape[1] - 1) / 2.0, (shape[2] - 1) / 2.0
    return Volume(data=np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2)))


def test_identity_augmentations(rng):
    v = Volume(data=rng.normal(size=(5, 6, 7)))
    np.testing.assert_array_equal(augment_shift(v, 0, 0, 0).data, v.data)
    np.testing.assert_allclose(augment_rotate_inplane(v, 0.0).data, v.data, atol=1e-6)
    np.testing.assert_allclose(augment_scale(v, 1.0).data, v.data, atol=1e-6)
    lv = LabelVolume(data=rng.integers(0, K, size=(5, 6, 7)), class_count=K)
    np.testing.assert_array_equal(augment_rotate_inplane_labels(lv, 0.0).data, lv.data)
    np.testing.assert_array_equal(augment_scale_labels(lv, 1.0).data, lv.data)


def test_shift_fills_with_air(rng):
    v = Volume(data=rng.normal(size=(4, 5, 6)))
    out = augment_shift(v, 1, -2, 0)
    np.testing.assert_array_equal(out.data[1:, :3, :], v.data[:-1, 2:, :])
    assert (out.data[0] == AIR_HU).all()
    assert (out.data[:, 3:] == AIR_HU).all()


def test_shift_round_trip_interior(rng):
    v = Volume(data=rng.normal(size=(6, 6, 6)))
    back = augment_shift(augment_shift(v, 2, 1, -1), -2, -1, 1)
    np.testing.assert_array_equal(back.data[:4, :5, 1:], v.data[:4, :5, 1:])


def test_shift_labels_fill_zero(rng):
    lv = LabelVolume(data=rng.integers(1, K, size=(3, 3, 3)), class_count=K)
    out = augment_shift_labels(lv, 0, 0, 1)
    assert not out.data[:, :, 0].any()
    np.testing.assert_array_equal(out.data[:, :, 1:], lv.data[:, :, :-1])


def test_shift_too_far():
    with pytest.raises(ValueError):
        augment_shift(Volume(data=np.zeros((2, 2, 2))), 3, 0, 0)


@pytest.mark.parametrize("theta", [10.0, -10.0])
def test_rotating_a_centred_blob(theta):
    v = _blob()
    out = augment_rotate_inplane(v, theta)
    inner = (slice(None), slice(8, 25), slice(8, 25))
    assert np.abs(out.data - v.data)[inner].max() < 0.05


def test_rotation_round_trip():
    v = _blob()
    back = augment_rotate_inplane(augment_rotate_inplane(v, 10.0), -10.0)
    inner = (slice(None), slice(8, 25), slice(8, 25))
    assert np.abs(back.data - v.data)[inner].max() < 0.05


def test_rotation_keeps_geometry(rng):
    v = Volume(data=rng.normal(size=(3, 8, 9)), spacing=(2.0, 0.7, 0.7))
    out = augment_rotate_inplane(v, 7.0)
    assert out.shape == v.shape and out.spacing == v.spacing


def test_label_augmentations_never_invent_labels(rng):
    lv = LabelVolume(data=rng.integers(1, 4, size=(4, 10, 10)), class_count=K)
    for out in (augment_rotate_inplane_labels(lv, 17.0), augment_scale_labels(lv, 1.3),
                augment_scale_labels(lv, 0.8)):
        assert out.labels() <= lv.labels() | {0}


def test_scale_keeps_centre():
    data = np.zeros((5, 5, 5))
    data[2, 2, 2] = 100.0
    out = augment_scale(Volume(data=data), 2.0)
    assert out.data[2, 2, 2] == pytest.approx(100.0)


def test_invalid_augment_parameters():
    v = Volume(data=np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        augment_rotate_inplane(v, 200.0)
    with pytest.raises(ValueError):
        augment_scale(v, 0.0)
