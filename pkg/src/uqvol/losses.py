"""Training objectives evaluated on fixed tensors, with analytic gradients.

``prob`` and ``gt`` have shape ``(C, ...)``: one probability map and one
binary ground-truth map per class. All accumulation is in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .volume import LabelVolume

EPS_PROB = 1e-7


@dataclass(frozen=True)
class LossEval:
    value: float
    gradient: np.ndarray


@dataclass(frozen=True)
class ClassWeights:
    class_ids: tuple[int, ...]
    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if w.shape != (len(self.class_ids),):
            raise ValueError("one weight per class id is required")
        if not np.all(w > 0):
            raise ValueError("class weights must be positive")
        object.__setattr__(self, "w", w)

    @classmethod
    def uniform(cls, n_classes: int) -> "ClassWeights":
        return cls(tuple(range(n_classes)), np.ones(n_classes))


def class_weights(gt_volumes: list[LabelVolume], class_ids=None) -> ClassWeights:
    """Inverse mean voxel count per class, scaled so foreground weights average 1.

    ``class_ids`` defaults to every foreground class. Background (id 0) may be
    included; it is then scaled by the same factor but excluded from the mean.
    """
    if not gt_volumes:
        raise ValueError("need at least one ground-truth volume")
    n_classes = gt_volumes[0].meta.n_classes
    if class_ids is None:
        class_ids = tuple(range(1, n_classes))
    class_ids = tuple(int(c) for c in class_ids)
    counts = np.zeros(n_classes, dtype=np.float64)
    for vol in gt_volumes:
        counts += np.bincount(vol.voxels.ravel(), minlength=n_classes)[:n_classes]
    mean_counts = counts / len(gt_volumes)
    for c in class_ids:
        if mean_counts[c] == 0:
            name = gt_volumes[0].meta.class_names[c]
            raise ValueError(f"class {c} ({name}) is absent from every volume")
    raw = np.array([1.0 / mean_counts[c] for c in class_ids])
    fg = [k for k, c in enumerate(class_ids) if c != 0] or list(range(len(class_ids)))
    return ClassWeights(class_ids, raw / raw[fg].mean())


def _prepare(prob, gt, weights: Optional[ClassWeights]):
    p = np.asarray(prob, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    if p.size == 0 or y.size == 0:
        raise ValueError("empty tensors")
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {y.shape}")
    n_classes = p.shape[0]
    w = np.ones(n_classes) if weights is None else np.asarray(weights.w, dtype=np.float64)
    if w.shape != (n_classes,):
        raise ValueError(f"{w.size} weights for {n_classes} classes")
    return p.reshape(n_classes, -1), y.reshape(n_classes, -1), w


def soft_dice_loss(prob, gt, weights: Optional[ClassWeights] = None, smooth: float = 1e-5) -> LossEval:
    """``1 - mean_c w_c * (2 sum(P Y) + s) / (sum P + sum Y + s)``."""
    p, y, w = _prepare(prob, gt, weights)
    n_classes = p.shape[0]
    num = 2.0 * (p * y).sum(axis=1) + smooth
    den = p.sum(axis=1) + y.sum(axis=1) + smooth
    if np.any(den == 0):
        raise ValueError("degenerate DICE denominator; use smooth > 0")
    dice = num / den
    value = 1.0 - (w * dice).sum() / n_classes
    # d dice / d P_i = (2 Y_i den - num) / den^2
    grad = -(w / n_classes)[:, None] * (2.0 * y * den[:, None] - num[:, None]) / (den**2)[:, None]
    return LossEval(float(value), grad.reshape(np.shape(prob)))


def _ce(prob, gt, weights, background: bool, eps: float) -> LossEval:
    p, y, w = _prepare(prob, gt, weights)
    n_classes = p.shape[0]
    pc = np.clip(p, eps, 1.0 - eps)
    inside = (p > eps) & (p < 1.0 - eps)
    fg = y == 1
    terms = np.where(fg, np.log(pc), 0.0)
    dterms = np.where(fg, 1.0 / pc, 0.0)
    if background:
        bg = y == 0
        terms = terms + np.where(bg, np.log1p(-pc), 0.0)
        dterms = dterms - np.where(bg, 1.0 / (1.0 - pc), 0.0)
    value = -(w * terms.sum(axis=1)).sum() / n_classes
    grad = -(w / n_classes)[:, None] * dterms * inside
    return LossEval(float(value), grad.reshape(np.shape(prob)))


def modified_ce_loss(prob, gt, weights: Optional[ClassWeights] = None, eps: float = EPS_PROB) -> LossEval:
    """Negated weighted foreground + background log-likelihood, averaged over classes."""
    return _ce(prob, gt, weights, True, eps)


def basic_ce_loss(prob, gt, weights: Optional[ClassWeights] = None, eps: float = EPS_PROB) -> LossEval:
    """Foreground-only variant of :func:`modified_ce_loss`."""
    return _ce(prob, gt, weights, False, eps)


LOSSES: dict[str, Callable[..., LossEval]] = {
    "dice": soft_dice_loss,
    "ce": modified_ce_loss,
    "ce-basic": basic_ce_loss,
}


def finite_difference_check(
    loss_fn: Callable[..., LossEval], prob, gt, weights=None, h: float = 1e-4, indices=None
) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``indices`` restricts the check to a subset of flat element indices.
    The relative error of one element is ``|g - fd| / max(|g|, |fd|, 1e-12)``.
    """
    p = np.array(prob, dtype=np.float64)
    analytic = loss_fn(p, gt, weights).gradient.ravel()
    flat = p.ravel()
    if indices is None:
        indices = range(flat.size)
    worst = 0.0
    for k in indices:
        orig = flat[k]
        flat[k] = orig + h
        up = loss_fn(p, gt, weights).value
        flat[k] = orig - h
        down = loss_fn(p, gt, weights).value
        flat[k] = orig
        fd = (up - down) / (2.0 * h)
        g = analytic[k]
        worst = max(worst, abs(g - fd) / max(abs(g), abs(fd), 1e-12))
    return float(worst)


def one_hot(labels: np.ndarray, class_ids) -> np.ndarray:
    return np.stack([(labels == c) for c in class_ids]).astype(np.float64)
