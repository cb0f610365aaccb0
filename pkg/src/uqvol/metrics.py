"""Per-class DICE and 95th-percentile Hausdorff distance."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .volume import LabelVolume

_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


@dataclass
class ClassScoreReport:
    metric: str
    per_class: dict[int, Optional[float]]
    mean: Optional[float]
    included_classes: list[int]
    flags: dict[int, str] = field(default_factory=dict)

    def rows(self, class_names=None):
        for c in self.included_classes:
            name = class_names[c] if class_names else str(c)
            yield c, name, self.per_class[c], self.flags.get(c, "")


def _check_pair(pred: LabelVolume, gt: LabelVolume) -> None:
    if pred.meta != gt.meta:
        raise ValueError("prediction and ground truth do not share grid metadata")


def dice_score(pred: LabelVolume, gt: LabelVolume, class_id: int) -> float:
    """2|A & B| / (|A| + |B|); 1.0 when both masks are empty."""
    _check_pair(pred, gt)
    if not 0 <= class_id < pred.meta.n_classes:
        raise ValueError(f"class id {class_id} out of range")
    a = pred.voxels == class_id
    b = gt.voxels == class_id
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one six-connected neighbour outside the mask.

    Neighbours beyond the grid edge count as outside.
    """
    mask = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(mask, structure=_SIX_CONNECTED, border_value=0)
    return mask & ~inner


def surface_distances(a: np.ndarray, b: np.ndarray, spacing) -> np.ndarray:
    """Pooled distances (mm) from each boundary voxel of one mask to the other's boundary."""
    ba, bb = boundary(a), boundary(b)
    both = ba | bb
    # every nearest neighbour lies inside the joint bounding box of both boundaries
    idx = np.argwhere(both)
    lo, hi = idx.min(axis=0), idx.max(axis=0) + 1
    sl = tuple(slice(int(x), int(y)) for x, y in zip(lo, hi))
    ba, bb = ba[sl], bb[sl]
    d_to_b = ndimage.distance_transform_edt(~bb, sampling=spacing)
    d_to_a = ndimage.distance_transform_edt(~ba, sampling=spacing)
    return np.concatenate([d_to_b[ba], d_to_a[bb]])


def hd95(pred: LabelVolume, gt: LabelVolume, class_id: int, percentile: float = 95.0):
    """95th percentile of pooled symmetric boundary distances in mm.

    Returns ``None`` when either mask is empty.
    """
    _check_pair(pred, gt)
    a = pred.voxels == class_id
    b = gt.voxels == class_id
    if not a.any() or not b.any():
        return None
    d = surface_distances(a, b, pred.meta.spacing)
    return float(np.percentile(d, percentile))


def score_report(
    pred: LabelVolume, gt: LabelVolume, metric: str = "dice", include_background: bool = False
) -> ClassScoreReport:
    """Apply ``metric`` per class and average over the classes where it is defined."""
    _check_pair(pred, gt)
    if metric not in ("dice", "hd95"):
        raise ValueError(f"unknown metric {metric!r}")
    start = 0 if include_background else 1
    classes = list(range(start, pred.meta.n_classes))
    per_class: dict[int, Optional[float]] = {}
    flags: dict[int, str] = {}
    for c in classes:
        in_pred = bool((pred.voxels == c).any())
        in_gt = bool((gt.voxels == c).any())
        if not in_pred and not in_gt:
            flags[c] = "empty_both"
        elif not in_pred:
            flags[c] = "empty_pred"
        elif not in_gt:
            flags[c] = "empty_gt"
        try:
            per_class[c] = dice_score(pred, gt, c) if metric == "dice" else hd95(pred, gt, c)
        except Exception as exc:  # recorded per class, never aborts the report
            per_class[c] = None
            flags[c] = f"error:{exc}"
    defined = [v for v in per_class.values() if v is not None]
    mean = float(np.mean(defined)) if defined else None
    return ClassScoreReport(metric, per_class, mean, classes, flags)
