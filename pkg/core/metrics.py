"""
Segmentation overlap metrics: Dice similarity and normalised surface distance.

Surfaces are 6-connected boundary voxels: a voxel of the mask with at least
one face neighbour outside it. Anything beyond the volume border counts as
outside, so mask voxels on the border are surface voxels. Distances are
Euclidean between voxel centres in millimetres.

Empty conventions: both masks empty -> 1.0, exactly one empty -> 0.0.
"""

import logging
from typing import Iterable, List, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy import ndimage

from .errors import ShapeMismatchError
from .schemas import LabelVolume

logger = logging.getLogger(__name__)

CROSS = ndimage.generate_binary_structure(3, 1)


def _check_pair(pred: LabelVolume, gold: LabelVolume) -> None:
    if not pred.same_geometry(gold):
        raise ShapeMismatchError(
            f"prediction {pred.shape}@{pred.spacing} and gold {gold.shape}@{gold.spacing} differ in geometry")


def surface_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=CROSS, border_value=0)


def surface_points(lv: LabelVolume, k: int) -> np.ndarray:
    """(N, 3) boundary voxel centres of class ``k`` in mm, (z, y, x) order."""
    idx = np.argwhere(surface_mask(lv.data == k))
    return idx * np.asarray(lv.spacing) + np.asarray(lv.origin)


def dsc(pred: LabelVolume, gold: LabelVolume, k: int) -> float:
    _check_pair(pred, gold)
    p = pred.data == k
    g = gold.data == k
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / total


def _within(surface: np.ndarray, other: np.ndarray, spacing, tolerance: float) -> int:
    # distance from every voxel to the nearest voxel of ``other``'s surface
    dist = ndimage.distance_transform_edt(~other, sampling=spacing)
    return int((dist[surface] <= tolerance).sum())


def nsd(pred: LabelVolume, gold: LabelVolume, k: int, tolerance: float = 1.0) -> float:
    """Fraction of both surfaces lying within ``tolerance`` mm of the other surface."""
    if tolerance <= 0:
        raise ValueError(f"NSD tolerance must be > 0 mm, got {tolerance}")
    _check_pair(pred, gold)
    sp = surface_mask(pred.data == k)
    sg = surface_mask(gold.data == k)
    n_pred, n_gold = int(sp.sum()), int(sg.sum())
    if n_pred == 0 and n_gold == 0:
        return 1.0
    if n_pred == 0 or n_gold == 0:
        return 0.0
    spacing = tuple(pred.spacing)
    hits = _within(sp, sg, spacing, tolerance) + _within(sg, sp, spacing, tolerance)
    return hits / (n_pred + n_gold)


class ClassScore(BaseModel):
    label: int
    dsc: float = Field(ge=0.0, le=1.0)
    nsd: float = Field(ge=0.0, le=1.0)


def score_classes(pred: LabelVolume, gold: LabelVolume, classes: Iterable[int],
                  tolerance: float = 1.0) -> List[ClassScore]:
    scores = [ClassScore(label=k, dsc=dsc(pred, gold, k), nsd=nsd(pred, gold, k, tolerance)) for k in classes]
    for s in scores:
        logger.debug("class %d: dsc %.4f nsd %.4f", s.label, s.dsc, s.nsd)
    return scores


def mean_scores(scores: List[ClassScore]) -> Tuple[float, float]:
    if not scores:
        return float("nan"), float("nan")
    return (float(np.mean([s.dsc for s in scores])), float(np.mean([s.nsd for s in scores])))


class ClassSummary(BaseModel):
    """One class across several cases; std is the population deviation."""

    label: int
    cases: int
    dsc_mean: float
    dsc_median: float
    dsc_std: float
    nsd_mean: float
    nsd_median: float
    nsd_std: float


def summarize_cases(per_case: List[List[ClassScore]]) -> List[ClassSummary]:
    if not per_case:
        raise ValueError("no cases to summarize")
    labels = [s.label for s in per_case[0]]
    if any([s.label for s in case] != labels for case in per_case):
        raise ValueError("cases were scored on different classes")
    summaries = []
    for i, label in enumerate(labels):
        d = np.array([case[i].dsc for case in per_case])
        n = np.array([case[i].nsd for case in per_case])
        summaries.append(ClassSummary(
            label=label, cases=len(per_case),
            dsc_mean=float(d.mean()), dsc_median=float(np.median(d)), dsc_std=float(d.std()),
            nsd_mean=float(n.mean()), nsd_median=float(np.median(n)), nsd_std=float(n.std()),
        ))
    return summaries
