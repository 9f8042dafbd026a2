"""
╔══════════════════════════════════════════════════════════════════════════════╗
║                              PREPROCESSING                                    ║
║                                                                               ║
║  CT -> two windowed channels at the network resolution;                       ║
║  gold labels -> six-class targets with background split into air and body.    ║
╚══════════════════════════════════════════════════════════════════════════════╝
"""

import logging
import warnings
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from core.errors import LabelRangeError, ShapeMismatchError
from core.schemas import LabelVolume, Volume

from .config import AIR, BODY, BODY_THRESHOLD_HU, INPUT_WINDOWS, WindowSpec

logger = logging.getLogger(__name__)

Shape3 = Tuple[int, int, int]

TARGET_SHAPE: Shape3 = (96, 192, 192)
SOURCE_CLASSES = 5  # 0 bg, 1 liver, 2 kidney, 3 spleen, 4 pancreas
TARGET_CLASSES = 6
ANTIALIAS_TRUNCATE = 4.0
CROSS = ndimage.generate_binary_structure(3, 1)


class ResampleWarning(UserWarning):
    """A size-1 axis was stretched; every output sample along it is that one value."""


def _check_shape(target_shape: Sequence[int]) -> Shape3:
    shape = tuple(int(n) for n in target_shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ShapeMismatchError(f"target shape must be three extents >= 1, got {tuple(target_shape)}")
    return shape


def _resampled_geometry(v, target: Shape3):
    ratio = np.asarray(v.shape, dtype=np.float64) / np.asarray(target, dtype=np.float64)
    spacing = np.asarray(v.spacing) * ratio
    origin = np.asarray(v.origin) + np.asarray(v.spacing) * (0.5 * ratio - 0.5)
    return tuple(spacing.tolist()), tuple(origin.tolist())


# ══════════════════════════════════════════════════════════════════════════════
#  WINDOWING
# ══════════════════════════════════════════════════════════════════════════════

def window_normalize(v, w: WindowSpec) -> np.ndarray:
    """clamp((x - (L - W/2)) / W, 0, 1) as float32."""
    x = v.data if isinstance(v, Volume) else np.asarray(v, dtype=np.float32)
    out = (x.astype(np.float64) - w.lower) / w.width
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def make_input_channels(v: Volume, expected_shape: Sequence[int] = TARGET_SHAPE,
                        windows: Sequence[WindowSpec] = INPUT_WINDOWS) -> np.ndarray:
    """Stack one windowed channel per window, channel 0 = W400/L50, channel 1 = W100/L60."""
    if v.shape != tuple(expected_shape):
        raise ShapeMismatchError(f"volume {v.shape} must be resampled to {tuple(expected_shape)} first")
    return np.stack([window_normalize(v, w) for w in windows])


# ══════════════════════════════════════════════════════════════════════════════
#  RESAMPLING
# ══════════════════════════════════════════════════════════════════════════════

def nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    """
    Source index for each output voxel: the input voxel whose centre is
    nearest the back-projected output centre, ties to the lower index.

    Exact integer form of ceil((i + 0.5) * n_in / n_out - 1).
    """
    i = np.arange(n_out, dtype=np.int64)
    num = (2 * i + 1) * n_in - 2 * n_out
    den = 2 * n_out
    return np.clip(-((-num) // den), 0, n_in - 1)


def resample_image(v: Volume, target_shape: Sequence[int], order: int = 3) -> Volume:
    """
    Resample to ``target_shape`` with prefiltered B-spline interpolation.

    In-plane axes shrunk by a factor f > 1 are blurred first with a Gaussian
    of sigma f/2 voxels. Sampling is centre aligned and clamps to the edge.
    Axes of length 1 are replicated, which emits a ResampleWarning.
    """
    target = _check_shape(target_shape)
    data = v.data.astype(np.float64)
    for axis in (1, 2):
        factor = v.shape[axis] / target[axis]
        if factor > 1:
            data = ndimage.gaussian_filter1d(data, sigma=factor / 2.0, axis=axis, mode="nearest",
                                             truncate=ANTIALIAS_TRUNCATE)

    stretched = [a for a in range(3) if v.shape[a] == 1 and target[a] > 1]
    if stretched:
        message = f"axes {stretched} have a single sample; values are replicated along them"
        logger.warning(message)
        warnings.warn(message, ResampleWarning, stacklevel=2)

    live = [a for a in range(3) if v.shape[a] > 1]
    if live:
        reduced = data.reshape([v.shape[a] for a in live])
        scale = np.array([v.shape[a] / target[a] for a in live])
        out = ndimage.affine_transform(
            reduced, scale, offset=0.5 * scale - 0.5,
            output_shape=tuple(target[a] for a in live),
            order=order, mode="nearest", prefilter=True,
        )
        full = out.reshape([target[a] if a in live else 1 for a in range(3)])
    else:
        full = data.reshape(1, 1, 1)
    resampled = np.ascontiguousarray(np.broadcast_to(full, target), dtype=np.float32)

    spacing, origin = _resampled_geometry(v, target)
    logger.debug("resampled %s -> %s", v.shape, target)
    return Volume(data=resampled, spacing=spacing, origin=origin)


def resample_labels_nearest(lv: LabelVolume, target_shape: Sequence[int]) -> LabelVolume:
    """Nearest-centre resampling; never creates labels absent from the input."""
    target = _check_shape(target_shape)
    index = np.ix_(*(nearest_indices(n, m) for n, m in zip(lv.shape, target)))
    spacing, origin = _resampled_geometry(lv, target)
    return lv.with_data(lv.data[index], spacing=spacing, origin=origin)


# ══════════════════════════════════════════════════════════════════════════════
#  BODY MASK / TARGETS
# ══════════════════════════════════════════════════════════════════════════════

def compute_body_mask(v: Volume, threshold: float = BODY_THRESHOLD_HU) -> np.ndarray:
    """x > -200 HU, closed with the 6-connected cross, then 3D hole filling."""
    mask = v.data > threshold
    # pad so closing does not erode objects touching the border
    padded = np.pad(mask, 1, mode="constant", constant_values=False)
    closed = ndimage.binary_closing(padded, structure=CROSS)[1:-1, 1:-1, 1:-1]
    return ndimage.binary_fill_holes(closed, structure=CROSS)


def split_background(lv: LabelVolume, body: np.ndarray) -> LabelVolume:
    """Organs shift up by one; background becomes 1 inside the body and 0 outside."""
    body = np.asarray(body, dtype=bool)
    if body.shape != lv.shape:
        raise ShapeMismatchError(f"body mask {body.shape} does not match labels {lv.shape}")
    top = int(lv.data.max())
    if top >= SOURCE_CLASSES:
        raise LabelRangeError(f"label {top} outside 0..{SOURCE_CLASSES - 1}")
    out = np.where(lv.data > 0, lv.data + 1, np.where(body, BODY, AIR)).astype(np.uint8)
    return lv.with_data(out, class_count=TARGET_CLASSES)


def prepare_case(ct: Volume, labels: Optional[LabelVolume] = None,
                 target_shape: Sequence[int] = TARGET_SHAPE) -> Tuple[np.ndarray, Optional[LabelVolume], Dict]:
    """
    Full preprocessing of one scan.

    Returns:
        (input tensor (2, D, H, W), six-class targets or None, metadata for
        restoring the original geometry)
    """
    target = _check_shape(target_shape)
    if labels is not None and not ct.same_geometry(labels):
        raise ShapeMismatchError(f"labels {labels.shape} do not match CT {ct.shape}")
    resampled = resample_image(ct, target)
    x = make_input_channels(resampled, target)
    targets = None
    if labels is not None:
        body = compute_body_mask(ct)
        split = split_background(labels, body)
        targets = resample_labels_nearest(split, target)
    meta = {
        "original_shape": ct.shape,
        "original_spacing": ct.spacing,
        "original_origin": ct.origin,
        "target_shape": target,
        "target_spacing": resampled.spacing,
    }
    return x, targets, meta
