"""
Training-protocol math: weighted soft Dice loss with its analytic gradient,
and the shift / in-plane rotation / scale augmentations.

No optimiser or training loop lives here.
"""

import logging
from typing import Literal, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import ndimage

from core.errors import LabelRangeError, ShapeMismatchError
from core.schemas import LabelVolume, Volume

from .config import AIR_HU

logger = logging.getLogger(__name__)

LABEL_FILL = 0


# ══════════════════════════════════════════════════════════════════════════════
#  LOSS
# ══════════════════════════════════════════════════════════════════════════════

class LossSpec(BaseModel):
    """Class weights and smoothing of the weighted multi-class soft Dice loss."""

    model_config = ConfigDict(frozen=True)

    weights: Tuple[float, ...] = Field(description="Per-class weights w_c >= 0, not all zero")
    eps: float = Field(default=1e-5, gt=0, description="Smoothing added to numerator and denominator")
    denominator: Literal["squared", "linear"] = Field(
        default="squared", description="sum p^2 + sum g^2, or sum p + sum g")

    @model_validator(mode="after")
    def _validate(self) -> "LossSpec":
        if not self.weights or min(self.weights) < 0 or sum(self.weights) <= 0:
            raise ValueError(f"class weights must be >= 0 and not all zero, got {self.weights}")
        return self

    @classmethod
    def uniform(cls, k: int, **kwargs) -> "LossSpec":
        return cls(weights=(1.0,) * k, **kwargs)

    @classmethod
    def inverse_frequency(cls, onehot: np.ndarray, **kwargs) -> "LossSpec":
        """Weights proportional to 1 / class frequency, absent classes 0, summing to K."""
        counts = onehot.reshape(onehot.shape[0], -1).sum(axis=1).astype(np.float64)
        inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
        weights = inv * onehot.shape[0] / inv.sum()
        return cls(weights=tuple(weights.tolist()), **kwargs)


def one_hot(lv: LabelVolume, k: int) -> np.ndarray:
    if int(lv.data.max()) >= k:
        raise LabelRangeError(f"label {int(lv.data.max())} outside 0..{k - 1}")
    return (np.arange(k)[:, None, None, None] == lv.data[None]).astype(np.float64)


def softmax_channels(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over axis 0, in float64."""
    if logits.ndim < 2 or logits.shape[0] < 2:
        raise ShapeMismatchError(f"softmax needs K >= 2 channels, got {logits.shape}")
    z = logits.astype(np.float64)
    z = np.exp(z - z.max(axis=0, keepdims=True))
    return z / z.sum(axis=0, keepdims=True)


def _check(probs: np.ndarray, onehot: np.ndarray, spec: LossSpec) -> None:
    if probs.shape != onehot.shape:
        raise ShapeMismatchError(f"probs {probs.shape} and one-hot {onehot.shape} differ")
    if len(spec.weights) != probs.shape[0]:
        raise ShapeMismatchError(f"{len(spec.weights)} class weights for {probs.shape[0]} channels")
    if not np.all((onehot == 0) | (onehot == 1)) or not np.all(onehot.sum(axis=0) == 1):
        raise LabelRangeError("targets are not a valid one-hot encoding")


def _terms(probs: np.ndarray, onehot: np.ndarray, spec: LossSpec):
    p = probs.reshape(probs.shape[0], -1).astype(np.float64)
    g = onehot.reshape(onehot.shape[0], -1).astype(np.float64)
    inter = (p * g).sum(axis=1)
    if spec.denominator == "squared":
        denom = (p * p).sum(axis=1) + (g * g).sum(axis=1) + spec.eps
    else:
        denom = p.sum(axis=1) + g.sum(axis=1) + spec.eps
    return p, g, inter, denom


def weighted_soft_dice_loss(probs: np.ndarray, onehot: np.ndarray, spec: LossSpec) -> float:
    """1 - sum_c w_c d_c / sum_c w_c with d_c = (2 sum pg + eps) / (denominator + eps)."""
    _check(probs, onehot, spec)
    _, _, inter, denom = _terms(probs, onehot, spec)
    w = np.asarray(spec.weights, dtype=np.float64)
    dice = (2.0 * inter + spec.eps) / denom
    return float(1.0 - (w * dice).sum() / w.sum())


def soft_dice_grad(probs: np.ndarray, onehot: np.ndarray, spec: LossSpec) -> np.ndarray:
    """Analytic d loss / d probs, same shape as ``probs``."""
    _check(probs, onehot, spec)
    p, g, inter, denom = _terms(probs, onehot, spec)
    w = np.asarray(spec.weights, dtype=np.float64)
    num = 2.0 * inter + spec.eps
    d_denom = 2.0 * p if spec.denominator == "squared" else np.ones_like(p)
    grad = -(w / w.sum())[:, None] * (2.0 * g * denom[:, None] - num[:, None] * d_denom) / (denom ** 2)[:, None]
    return grad.reshape(probs.shape)


# ══════════════════════════════════════════════════════════════════════════════
#  AUGMENTATION
# ══════════════════════════════════════════════════════════════════════════════

def _shift(data: np.ndarray, offsets, fill) -> np.ndarray:
    for axis, (d, n) in enumerate(zip(offsets, data.shape)):
        if abs(d) > n:
            raise ValueError(f"shift {d} exceeds extent {n} on axis {axis}")
    out = np.full_like(data, fill)
    src, dst = [], []
    for d, n in zip(offsets, data.shape):
        src.append(slice(max(0, -d), n - max(0, d)))
        dst.append(slice(max(0, d), n - max(0, -d)))
    out[tuple(dst)] = data[tuple(src)]
    return out


def _centre_transform(data: np.ndarray, matrix: np.ndarray, order: int, fill) -> np.ndarray:
    """Sample data at matrix @ (o - c) + c for every output voxel o."""
    centre = (np.asarray(data.shape, dtype=np.float64) - 1.0) / 2.0
    offset = centre - matrix @ centre
    return ndimage.affine_transform(data, matrix, offset=offset, order=order, mode="constant",
                                    cval=fill, prefilter=False)


def _rotation(theta: float) -> np.ndarray:
    if not -180.0 <= theta <= 180.0:
        raise ValueError(f"rotation {theta} outside [-180, 180] degrees")
    # output -> input mapping is the inverse rotation
    t = np.deg2rad(theta)
    c, s = np.cos(t), np.sin(t)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]])


def _scaling(s: float) -> np.ndarray:
    if not 0.0 < s <= 4.0:
        raise ValueError(f"scale {s} outside (0, 4]")
    return np.diag([1.0 / s] * 3)


def augment_shift(v: Volume, dz: int, dy: int, dx: int) -> Volume:
    """Integer translation; vacated voxels become air."""
    return v.with_data(_shift(v.data, (dz, dy, dx), AIR_HU))


def augment_rotate_inplane(v: Volume, theta: float) -> Volume:
    """Rotate by ``theta`` degrees in the (y, x) plane about its centre, trilinear sampling."""
    return v.with_data(_centre_transform(v.data, _rotation(theta), 1, AIR_HU).astype(np.float32))


def augment_scale(v: Volume, s: float) -> Volume:
    """Zoom about the volume centre by factor ``s``, trilinear sampling."""
    return v.with_data(_centre_transform(v.data, _scaling(s), 1, AIR_HU).astype(np.float32))


def augment_shift_labels(lv: LabelVolume, dz: int, dy: int, dx: int) -> LabelVolume:
    return lv.with_data(_shift(lv.data, (dz, dy, dx), LABEL_FILL))


def augment_rotate_inplane_labels(lv: LabelVolume, theta: float) -> LabelVolume:
    return lv.with_data(_centre_transform(lv.data, _rotation(theta), 0, LABEL_FILL))


def augment_scale_labels(lv: LabelVolume, s: float) -> LabelVolume:
    return lv.with_data(_centre_transform(lv.data, _scaling(s), 0, LABEL_FILL))
