"""Paired Wilcoxon signed-rank test with an exact null distribution."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


@dataclass(frozen=True)
class PairedSample:
    labels: tuple
    a: tuple[float, ...]
    b: tuple[float, ...]

    def __post_init__(self):
        a = tuple(float(x) for x in self.a)
        b = tuple(float(x) for x in self.b)
        if len(a) != len(b) or len(a) < 1:
            raise ValueError("paired samples need equal, non-zero lengths")
        if not all(math.isfinite(x) for x in a + b):
            raise ValueError("paired samples must be finite")
        labels = tuple(self.labels) if self.labels is not None else tuple(range(len(a)))
        if len(labels) != len(a):
            raise ValueError("one label per pair is required")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "labels", labels)


@dataclass(frozen=True)
class WilcoxonResult:
    W: float
    n_eff: int
    p_two_sided: float
    mode: str
    flags: tuple[str, ...] = field(default_factory=tuple)


def signed_ranks(d) -> tuple[np.ndarray, np.ndarray]:
    """Average ranks of ``|d|`` and the signs, after discarding zero differences."""
    d = np.asarray(d, dtype=np.float64)
    d = d[d != 0]
    return rankdata(np.abs(d)), np.sign(d)


def exact_cdf(ranks, w: float) -> float:
    """P(T+ <= w) under the null, enumerating sign assignments by DP over rank sums.

    Ranks may be half-integers (ties), so sums are tracked in units of 1/2.
    """
    doubled = np.rint(2.0 * np.asarray(ranks)).astype(np.int64)
    total = int(doubled.sum())
    # int64 holds every count exactly up to n = 62
    counts = np.zeros(total + 1, dtype=np.int64 if len(doubled) <= 62 else object)
    counts[0] = 1
    for r in doubled:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    limit = math.floor(2.0 * w + 1e-9)
    hits = sum(int(c) for c in counts[: limit + 1]) if limit >= 0 else 0
    return hits / 2 ** len(doubled)


def wilcoxon_signed_rank(sample: PairedSample, mode: str = "exact", zero_policy: str = "discard") -> WilcoxonResult:
    """Two-sided signed-rank test; ``W`` is the smaller of the signed rank sums."""
    if zero_policy != "discard":
        raise ValueError("only the 'discard' zero policy is supported")
    if mode not in ("exact", "normal-approx"):
        raise ValueError(f"unknown mode {mode!r}")
    d = np.subtract(sample.a, sample.b)
    ranks, signs = signed_ranks(d)
    n = len(ranks)
    if n == 0:
        return WilcoxonResult(0.0, 0, 1.0, mode, ("all_differences_zero",))
    w_plus = float(ranks[signs > 0].sum())
    w_minus = float(ranks[signs < 0].sum())
    w = min(w_plus, w_minus)
    ties = len(np.unique(ranks)) < n
    flags = ["ties"] if ties else []
    if mode == "exact":
        if n > 25 and not ties:
            warnings.warn(f"exact Wilcoxon with n={n} enumerates a large distribution", stacklevel=2)
        p = 2.0 * exact_cdf(ranks, w)
    else:
        if n < 10:
            flags.append("small_n_for_normal_approx")
        _, tie_counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_counts**3 - tie_counts).sum() / 48.0
        z = (w - n * (n + 1) / 4.0) / math.sqrt(var) if var > 0 else 0.0
        p = 2.0 * 0.5 * math.erfc(-z / math.sqrt(2.0))
    return WilcoxonResult(w, n, min(1.0, p), mode, tuple(flags))
