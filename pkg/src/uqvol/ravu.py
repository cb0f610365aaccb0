"""Region-based accuracy-vs-uncertainty analysis.

Mismatch voxels (``pred != gt``) are opened with a box structuring element.
Errors that survive the opening are *inaccurate*; errors removed by it are
*near-accurate* and are pooled with the accurate voxels when computing
``p(u | a, ~a)``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .report import fmt
from .volume import GridMeta, LabelVolume, ScalarMap

EXCLUDED, ACCURATE, NEAR_ACCURATE, INACCURATE = 0, 1, 2, 3
REGION_NAMES = ("excluded", "accurate", "near_accurate", "inaccurate")


@dataclass(frozen=True)
class RegionMask:
    meta: GridMeta
    region: np.ndarray
    roi: str = "whole"
    opening_filter: tuple[int, int, int] = (3, 3, 1)

    def count(self, tag: int) -> int:
        return int((self.region == tag).sum())

    def as_label_volume(self) -> LabelVolume:
        return LabelVolume(self.meta.with_(class_names=REGION_NAMES), self.region)


def parse_roi(roi) -> tuple[str, int]:
    """Accept ``"whole"``, ``"band:<r>"`` or a ``("band", r)`` tuple."""
    if isinstance(roi, tuple):
        return roi[0], int(roi[1])
    if roi in (None, "whole", "whole-volume"):
        return "whole", 0
    if isinstance(roi, str) and roi.startswith("band:"):
        r = int(roi.split(":", 1)[1])
        if r < 0:
            raise ValueError("band radius must be >= 0")
        return "band", r
    raise ValueError(f"unknown ROI {roi!r}")


def opening(mask: np.ndarray, filter_dims=(3, 3, 1)) -> np.ndarray:
    """Binary erosion then dilation with a box element; outside the grid is background."""
    structure = np.ones(tuple(int(f) for f in filter_dims), dtype=bool)
    eroded = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    return ndimage.binary_dilation(eroded, structure=structure, border_value=0)


def region_partition(
    pred: LabelVolume, gt: LabelVolume, opening_filter=(3, 3, 1), roi="whole"
) -> RegionMask:
    if pred.meta != gt.meta:
        raise ValueError("prediction and ground truth do not share grid metadata")
    opening_filter = tuple(int(f) for f in opening_filter)
    if len(opening_filter) != 3 or any(f < 1 or f % 2 == 0 for f in opening_filter):
        raise ValueError(f"opening filter dims must be odd and >= 1, got {opening_filter}")
    roi_kind, radius = parse_roi(roi)

    mismatch = pred.voxels != gt.voxels
    opened = opening(mismatch, opening_filter) & mismatch
    region = np.full(pred.meta.dims, ACCURATE, dtype=np.uint8)
    region[mismatch & ~opened] = NEAR_ACCURATE
    region[opened] = INACCURATE
    if roi_kind == "band":
        fg = (gt.voxels > 0) | (pred.voxels > 0)
        # chebyshev dilation, separable as a box maximum filter
        band = ndimage.maximum_filter(fg, size=2 * radius + 1, mode="constant", cval=0)
        region[~band] = EXCLUDED
    label = "whole" if roi_kind == "whole" else f"band:{radius}"
    return RegionMask(pred.meta, region, label, opening_filter)


@dataclass
class RAvUCurve:
    thresholds: np.ndarray
    n_ac: np.ndarray
    n_au: np.ndarray
    n_ic: np.ndarray
    n_iu: np.ndarray
    flags: list[str] = field(default_factory=list)

    @property
    def p_u_given_i(self) -> np.ndarray:
        return _ratio(self.n_iu, self.n_iu + self.n_ic)

    @property
    def p_u_given_a(self) -> np.ndarray:
        return _ratio(self.n_au, self.n_au + self.n_ac)

    @property
    def n_total(self) -> np.ndarray:
        return self.n_ac + self.n_au + self.n_ic + self.n_iu

    def __add__(self, other: "RAvUCurve") -> "RAvUCurve":
        if not np.array_equal(self.thresholds, other.thresholds):
            raise ValueError("curves use different threshold grids")
        curve = RAvUCurve(
            self.thresholds,
            self.n_ac + other.n_ac,
            self.n_au + other.n_au,
            self.n_ic + other.n_ic,
            self.n_iu + other.n_iu,
        )
        curve.flags = _undefined_flags(curve)
        return curve


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.full(num.shape, np.nan)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


def _undefined_flags(curve: RAvUCurve) -> list[str]:
    flags = []
    if (curve.n_iu + curve.n_ic)[0] == 0:
        flags.append("p_u_i_undefined")
    if (curve.n_au + curve.n_ac)[0] == 0:
        flags.append("p_u_a_undefined")
    return flags


def threshold_grid(thresholds, n_classes: int) -> np.ndarray:
    """Resolve an explicit list, ``"auto:<n>[,<tmax>]"`` or ``("auto", n, tmax)``."""
    if isinstance(thresholds, str):
        if not thresholds.startswith("auto"):
            return threshold_grid([float(t) for t in thresholds.split(",")], n_classes)
        parts = thresholds.split(":", 1)[1].split(",") if ":" in thresholds else []
        n = int(parts[0]) if parts else 50
        t_max = float(parts[1]) if len(parts) > 1 else math.log(n_classes)
        thresholds = ("auto", n, t_max)
    if isinstance(thresholds, tuple) and thresholds and thresholds[0] == "auto":
        n = int(thresholds[1])
        t_max = thresholds[2] if len(thresholds) > 2 and thresholds[2] is not None else None
        t_max = math.log(n_classes) if t_max is None else float(t_max)
        if n < 1:
            raise ValueError("auto threshold count must be >= 1")
        return np.linspace(0.0, t_max, n)
    grid = np.asarray(thresholds, dtype=np.float64)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("thresholds must be a non-empty list")
    if np.any(grid < 0) or np.any(np.diff(grid) < 0):
        raise ValueError("thresholds must be non-negative and ascending")
    return grid


def _count_above(values: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    s = np.sort(values)
    return (s.size - np.searchsorted(s, thresholds, side="right")).astype(np.int64)


def ravu_curve(entropy: ScalarMap, regions: RegionMask, thresholds=("auto", 50, None)) -> RAvUCurve:
    """Sweep thresholds; a voxel is uncertain when its entropy is strictly above ``t``."""
    if entropy.meta.dims != regions.meta.dims:
        raise ValueError("entropy map and region mask have different grids")
    grid = threshold_grid(thresholds, entropy.meta.n_classes)
    h = entropy.values.astype(np.float64)
    inacc = h[regions.region == INACCURATE]
    acc = h[(regions.region == ACCURATE) | (regions.region == NEAR_ACCURATE)]
    n_iu = _count_above(inacc, grid)
    n_au = _count_above(acc, grid)
    curve = RAvUCurve(grid, acc.size - n_au, n_au, inacc.size - n_iu, n_iu)
    curve.flags = _undefined_flags(curve)
    return curve


def pool_curves(curves) -> RAvUCurve:
    """Voxel-pooled curve: counts summed over patients."""
    curves = list(curves)
    total = curves[0]
    for c in curves[1:]:
        total = total + c
    return total


def ravu_report(curves: dict) -> str:
    """Wide CSV: a threshold column then ``<model>.p_u_i`` / ``<model>.p_u_a`` per model."""
    names = list(curves)
    if not names:
        raise ValueError("no curves given")
    grid = curves[names[0]].thresholds
    for n in names[1:]:
        if not np.array_equal(curves[n].thresholds, grid):
            raise ValueError(f"curve {n!r} uses a different threshold grid")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["threshold"]
    for n in names:
        header += [f"{n}.p_u_i", f"{n}.p_u_a"]
    w.writerow(header)
    series = {n: (curves[n].p_u_given_i, curves[n].p_u_given_a) for n in names}
    for k, t in enumerate(grid):
        row = [fmt(t)]
        for n in names:
            row += [fmt(series[n][0][k]), fmt(series[n][1][k])]
        w.writerow(row)
    return buf.getvalue()


def curve_rows(curve: RAvUCurve):
    """Long-format rows with counts, for per-patient emission."""
    pi, pa = curve.p_u_given_i, curve.p_u_given_a
    for k, t in enumerate(curve.thresholds):
        yield (
            fmt(t),
            int(curve.n_ac[k]),
            int(curve.n_au[k]),
            int(curve.n_ic[k]),
            int(curve.n_iu[k]),
            fmt(pi[k]),
            fmt(pa[k]),
        )
