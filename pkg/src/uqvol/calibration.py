"""Binned reliability tables and expected calibration error per class."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .volume import LabelVolume, ProbVolume

SELECTIONS = ("predicted-class", "class-channel-all")


@dataclass(frozen=True)
class Bin:
    lo: float
    hi: float
    count: int
    mean_conf: Optional[float]
    accuracy: Optional[float]


@dataclass
class ReliabilityTable:
    class_id: int
    bins: list[Bin]
    ece_weighted: Optional[float]
    ece_paper: Optional[float]
    voxel_selection: str
    flags: list[str] = field(default_factory=list)

    @property
    def n_selected(self) -> int:
        return sum(b.count for b in self.bins)


def bin_table(confidence, correct, n_bins: int = 10):
    """Bin confidences into ``n_bins`` equal-width bins on [0, 1].

    Bins are ``[b/B, (b+1)/B)`` with the last one closed at 1. Returns the list
    of bins and the two ECE variants: count-weighted absolute gaps, and the
    unweighted mean of absolute gaps over non-empty bins. Both are ``None``
    when nothing was binned.
    """
    if n_bins < 1:
        raise ValueError("need at least one bin")
    conf = np.asarray(confidence, dtype=np.float64).ravel()
    hit = np.asarray(correct, dtype=bool).ravel()
    if conf.shape != hit.shape:
        raise ValueError("confidence and correctness must have the same length")
    idx = np.clip(np.floor(conf * n_bins).astype(np.int64), 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    hits = np.bincount(idx, weights=hit.astype(np.float64), minlength=n_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    bins = []
    gaps = []
    for b in range(n_bins):
        n = int(counts[b])
        if n:
            mc, acc = conf_sum[b] / n, hits[b] / n
            gaps.append((n, abs(acc - mc)))
            bins.append(Bin(b / n_bins, (b + 1) / n_bins, n, float(mc), float(acc)))
        else:
            bins.append(Bin(b / n_bins, (b + 1) / n_bins, 0, None, None))
    total = int(counts.sum())
    if total == 0:
        return bins, None, None
    weighted = sum(n * g for n, g in gaps) / total
    paper = sum(g for _, g in gaps) / len(gaps)
    return bins, float(weighted), float(paper)


def reliability(
    mean_prob: ProbVolume,
    pred: LabelVolume,
    gt: LabelVolume,
    class_id: int,
    n_bins: int = 10,
    selection: str = "predicted-class",
) -> ReliabilityTable:
    if not (mean_prob.meta == pred.meta == gt.meta):
        raise ValueError("mean_prob, pred and gt must share grid metadata")
    if selection not in SELECTIONS:
        raise ValueError(f"unknown selection {selection!r}")
    prob = mean_prob.channels[class_id]
    target = gt.voxels == class_id
    if selection == "predicted-class":
        sel = pred.voxels == class_id
        conf, correct = prob[sel], target[sel]
    else:
        conf, correct = prob, target
    bins, weighted, paper = bin_table(conf, correct, n_bins)
    flags = [] if weighted is not None else ["no_selected_voxels"]
    return ReliabilityTable(class_id, bins, weighted, paper, selection, flags)


@dataclass
class EceReport:
    tables: dict[int, ReliabilityTable]
    mean_weighted: Optional[float]
    mean_paper: Optional[float]
    n_bins: int
    selection: str

    @property
    def undefined_classes(self) -> list[int]:
        return [c for c, t in self.tables.items() if t.ece_weighted is None]


def ece_report(
    mean_prob: ProbVolume,
    pred: LabelVolume,
    gt: LabelVolume,
    n_bins: int = 10,
    selection: str = "predicted-class",
    include_background: bool = False,
) -> EceReport:
    start = 0 if include_background else 1
    tables = {
        c: reliability(mean_prob, pred, gt, c, n_bins, selection)
        for c in range(start, mean_prob.meta.n_classes)
    }
    w = [t.ece_weighted for t in tables.values() if t.ece_weighted is not None]
    p = [t.ece_paper for t in tables.values() if t.ece_paper is not None]
    return EceReport(
        tables,
        float(np.mean(w)) if w else None,
        float(np.mean(p)) if p else None,
        n_bins,
        selection,
    )
