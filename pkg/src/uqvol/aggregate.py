"""Monte-Carlo aggregation: mean probabilities, argmax prediction and entropy."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .volume import LabelVolume, McStack, ProbVolume, ScalarMap


@dataclass(frozen=True)
class AggregateResult:
    mean_prob: ProbVolume
    prediction: LabelVolume
    entropy: ScalarMap


def mean_probability(stack: McStack) -> ProbVolume:
    """Average the stack's samples, accumulating in float64 in sample order."""
    acc = None
    for sample in stack:
        if acc is None:
            acc = sample.channels.astype(np.float64)
        else:
            acc += sample.channels
    acc /= stack.M
    # samples were validated individually; the mean is a convex combination
    return ProbVolume(stack.meta, acc.astype(np.float32), validate=False)


def argmax_prediction(mean_prob: ProbVolume) -> LabelVolume:
    # np.argmax returns the first maximum, i.e. the lowest class id on ties
    return LabelVolume(mean_prob.meta, np.argmax(mean_prob.channels, axis=0).astype(np.uint8))


def entropy_values(probs: np.ndarray, axis: int = 0) -> np.ndarray:
    """Natural-log Shannon entropy along ``axis`` with ``0 ln 0 = 0`` (float64)."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=axis)


def _to_f32_bounded(h: np.ndarray, upper: float) -> np.ndarray:
    h = np.clip(h, 0.0, upper)
    out = h.astype(np.float32)
    # float32 rounding may land just above ln C; step back so the bound holds exactly
    over = out.astype(np.float64) > upper
    if over.any():
        out[over] = np.nextafter(np.float32(upper), np.float32(0))
    return out


def entropy_map(mean_prob: ProbVolume) -> ScalarMap:
    """Per-voxel predictive entropy of the averaged class probabilities."""
    meta = mean_prob.meta
    h = entropy_values(mean_prob.channels, axis=0)
    return ScalarMap(meta, _to_f32_bounded(h, math.log(meta.n_classes)))


def aggregate(stack: McStack) -> AggregateResult:
    mean_prob = mean_probability(stack)
    return AggregateResult(
        mean_prob=mean_prob,
        prediction=argmax_prediction(mean_prob),
        entropy=entropy_map(mean_prob),
    )


def binary_entropy(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return entropy_values(np.stack([p, 1.0 - p]), axis=0)


def toy_entropy_curve(
    p_grid,
    epsilon: float = 0.0,
    pattern: str = "uniform-jitter",
    M: int = 30,
    seed: int = 0,
) -> list[tuple[float, float]]:
    """Binary entropy of the MC-averaged foreground probability for a single voxel.

    ``uniform-jitter`` draws ``M`` probabilities uniformly from ``p +/- eps``,
    where the half-width is shrunk to ``min(eps, p, 1 - p)`` so the interval
    stays inside [0, 1] and centred on ``p``. ``alternating`` uses the
    sequence ``p, 1 - p, p, ...`` of length ``M``.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    grid = np.clip(np.asarray(p_grid, dtype=np.float64), 0.0, 1.0)
    if pattern == "uniform-jitter":
        rng = np.random.Generator(np.random.Philox(seed))
        half = np.minimum(epsilon, np.minimum(grid, 1.0 - grid))
        u = rng.uniform(-1.0, 1.0, size=(grid.size, M))
        means = (grid[:, None] + half[:, None] * u).mean(axis=1)
    elif pattern == "alternating":
        seq = np.where(np.arange(M) % 2 == 0, grid[:, None], 1.0 - grid[:, None])
        means = seq.mean(axis=1)
    else:
        raise ValueError(f"unknown pattern {pattern!r}")
    return list(zip(grid.tolist(), binary_entropy(means).tolist()))
