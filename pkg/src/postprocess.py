"""Network logits -> final segmentation in the original scan geometry."""

import logging
from typing import Sequence

import numpy as np

from core.errors import LabelRangeError, ShapeMismatchError
from core.schemas import LabelVolume

from .preprocess import TARGET_CLASSES, nearest_indices

logger = logging.getLogger(__name__)

OUTPUT_CLASSES = 5  # 0 bg, 1 liver, 2 kidney, 3 spleen, 4 pancreas


def argmax_channels(logits: np.ndarray, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> LabelVolume:
    """Per-voxel index of the largest channel; ties go to the lowest index."""
    if logits.ndim != 4 or logits.shape[0] < 2:
        raise ShapeMismatchError(f"logits must be (K >= 2, D, H, W), got {logits.shape}")
    # np.argmax returns the first maximum
    labels = np.argmax(logits, axis=0).astype(np.uint8)
    return LabelVolume(data=labels, class_count=logits.shape[0], spacing=spacing, origin=origin)


def upsample_nearest(lv: LabelVolume, target_shape: Sequence[int], spacing=None, origin=None) -> LabelVolume:
    """Nearest-centre resize to ``target_shape``; geometry defaults to the rescaled grid."""
    target = tuple(int(n) for n in target_shape)
    if len(target) != 3 or min(target) < 1:
        raise ShapeMismatchError(f"target shape must be three extents >= 1, got {target}")
    index = np.ix_(*(nearest_indices(n, m) for n, m in zip(lv.shape, target)))
    if spacing is None:
        spacing = tuple(s * n / m for s, n, m in zip(lv.spacing, lv.shape, target))
    if origin is None:
        origin = tuple(o + s * (0.5 * n / m - 0.5) for o, s, n, m in zip(lv.origin, lv.spacing, lv.shape, target))
    return lv.with_data(lv.data[index], spacing=spacing, origin=origin)


def remap_labels(lv: LabelVolume) -> LabelVolume:
    """Merge air and body into background and shift organs down: {0,1} -> 0, k -> k-1."""
    top = int(lv.data.max())
    if top >= TARGET_CLASSES:
        raise LabelRangeError(f"label {top} outside 0..{TARGET_CLASSES - 1}")
    out = np.where(lv.data <= 1, 0, lv.data.astype(np.int16) - 1).astype(np.uint8)
    return lv.with_data(out, class_count=OUTPUT_CLASSES)
