"""Synthetic label volumes and MC stacks with controlled calibration and uncertainty.

Spec documents are plain dicts (JSON)::

    {
      "dims": [64, 64, 16], "spacing": [0.8, 0.8, 2.5], "n_classes": 3,
      "shapes": [{"class_id": 1, "geometry": "ellipsoid",
                  "center": [32, 32, 8], "radii": [10, 12, 4]}],
      "errors": [{"kind": "blob_fp", "class_id": 1,
                  "magnitude_voxels": [5, 5, 1], "location": [10, 10, 8]}],
      "calib": {"mode": "overconfident", "delta": 0.1,
                "confidence": {"dist": "uniform", "low": 0.6, "high": 1.0}},
      "unc": {"on_errors": "high", "on_correct": "low", "jitter": 0.05, "M": 30},
      "seed": 7
    }

Voxel generation, in order:

1. ``gt`` rasterizes the shapes; later shapes overwrite earlier ones.
2. The error list perturbs ``gt`` into a geometric prediction. ``blob_fp``
   paints a box of ``class_id`` over voxels of other classes, ``blob_fn``
   clears ``class_id`` inside a box, ``boundary_shift`` translates the
   ``class_id`` mask by ``magnitude_voxels`` along ``direction``.
3. Every voxel draws an emitted confidence ``q`` from ``calib.confidence``
   (``constant``, ``uniform``, ``beta``, or ``boundary``: uniform on
   ``[low, high]`` within ``width`` voxels of a ground-truth label edge and
   ``far`` elsewhere; clamped to ``[1/C + 0.01, 1]`` so that the emitted class stays the
   argmax). Correctness is drawn as Bernoulli(``q``) when calibrated,
   Bernoulli(``q - delta``) when overconfident and Bernoulli(``q + delta``)
   when underconfident; ``calib.apply_to = "band"`` confines the
   miscalibration to the boundary band. Geometrically correct voxels that
   draw "incorrect" are relabelled: to the label across the nearest edge
   inside the boundary band, to a random other class elsewhere.
4. ``unc`` = ``high`` for a group replaces its confidence with a low value
   and spreads the remaining mass evenly over all other classes; ``low``
   puts the remaining mass on one runner-up class (the true class for
   errors). ``on_errors`` applies to geometric errors, ``on_correct`` to
   everything else.
5. The stack holds ``M`` samples. Samples come in antithetic pairs
   ``q + u`` / ``q - u`` with ``u`` uniform in ``+/- min(jitter, q, 1 - q)``,
   the other classes rescaled to keep each sample normalised, so the stack
   mean reproduces the intended probabilities.

Random streams come from numpy's Philox counter-based generator seeded
through ``SeedSequence``; identical spec and seed give identical output.
"""

from __future__ import annotations

import copy
import json
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import GridMeta, LabelVolume, McStack, ProbVolume

CONF_MARGIN = 0.01
HIGH_UNC_SPAN = 0.4


class SynthError(ValueError):
    """Raised for infeasible synthetic specs."""


DEFAULT_CALIB = {"mode": "calibrated", "delta": 0.0, "confidence": {"dist": "constant", "value": 1.0}}
DEFAULT_UNC = {"on_errors": "low", "on_correct": "low", "jitter": 0.0, "M": 1}


@dataclass(frozen=True)
class SynthSpec:
    doc: dict

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthSpec":
        doc = copy.deepcopy(doc)
        dims = tuple(int(d) for d in doc["dims"])
        if len(dims) != 3 or min(dims) < 1:
            raise SynthError(f"bad dims {dims}")
        if "class_names" in doc:
            names = list(doc["class_names"])
        else:
            n = int(doc.get("n_classes", 2))
            names = ["background"] + [f"class_{c}" for c in range(1, n)]
        doc["class_names"] = names
        doc.setdefault("spacing", [1.0, 1.0, 1.0])
        doc.setdefault("origin", [0.0, 0.0, 0.0])
        doc.setdefault("shapes", [])
        doc.setdefault("errors", [])
        doc["calib"] = {**DEFAULT_CALIB, **doc.get("calib", {})}
        doc["unc"] = {**DEFAULT_UNC, **doc.get("unc", {})}
        doc.setdefault("seed", 0)
        spec = cls(doc)
        spec.validate()
        return spec

    @classmethod
    def from_json(cls, path) -> "SynthSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    @property
    def meta(self) -> GridMeta:
        d = self.doc
        return GridMeta(d["dims"], d["spacing"], d["origin"], d["class_names"])

    @property
    def n_classes(self) -> int:
        return len(self.doc["class_names"])

    def validate(self) -> None:
        d = self.doc
        meta = self.meta
        C = meta.n_classes
        if C < 2:
            raise SynthError("need at least two classes")
        for s in d["shapes"]:
            if not 0 <= int(s["class_id"]) < C:
                raise SynthError(f"shape class id {s['class_id']} out of range")
            if s.get("geometry", "box") not in ("box", "ellipsoid"):
                raise SynthError(f"unknown geometry {s.get('geometry')!r}")
            c, r = np.asarray(s["center"], float), np.asarray(s["radii"], float)
            if s.get("geometry", "box") == "ellipsoid" and np.any(r <= 0):
                raise SynthError("ellipsoid radii must be > 0")
            if np.any(r < 0) or np.any(c - r < 0) or np.any(c + r > np.asarray(meta.dims) - 1):
                raise SynthError(f"shape {s} does not fit inside dims {meta.dims}")
        for e in d["errors"]:
            if e.get("kind") not in ("blob_fp", "blob_fn", "boundary_shift"):
                raise SynthError(f"unknown error kind {e.get('kind')!r}")
            if not 0 <= int(e.get("class_id", 1)) < C:
                raise SynthError(f"error class id {e.get('class_id')} out of range")
        cal = d["calib"]
        if cal["mode"] not in ("calibrated", "overconfident", "underconfident"):
            raise SynthError(f"unknown calibration mode {cal['mode']!r}")
        if cal.get("apply_to", "all") not in ("all", "band"):
            raise SynthError("calib.apply_to must be 'all' or 'band'")
        if not 0.0 <= float(cal["delta"]) < 0.5:
            raise SynthError("delta must lie in [0, 0.5)")
        unc = d["unc"]
        if not 0.0 <= float(unc["jitter"]) <= 0.5:
            raise SynthError("jitter must lie in [0, 0.5]")
        if int(unc["M"]) < 1:
            raise SynthError("M must be >= 1")
        for key in ("on_errors", "on_correct"):
            if unc[key] not in ("high", "low"):
                raise SynthError(f"unc.{key} must be 'high' or 'low'")


def _rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def _seed_entropy(seed) -> list[int]:
    return [int(s) for s in seed] if isinstance(seed, (list, tuple)) else [int(seed)]


def boundary_band(labels: np.ndarray, width: int):
    """Voxels within ``width`` (chebyshev) of a change of label, and the label across it."""
    size = 2 * int(width) + 1
    hi = ndimage.maximum_filter(labels, size=size, mode="nearest")
    lo = ndimage.minimum_filter(labels, size=size, mode="nearest")
    return hi != lo, np.where(labels == hi, lo, hi)


def draw_confidence(dist: dict, n: int, rng: np.random.Generator, band=None) -> np.ndarray:
    """Emitted confidences. ``boundary`` needs ``band``, a flat mask of boundary voxels."""
    kind = dist.get("dist", "constant")
    if kind == "boundary":
        if band is None:
            raise SynthError("the boundary confidence distribution needs a label grid")
        lo, hi = float(dist.get("low", 0.6)), float(dist.get("high", 1.0))
        near = rng.uniform(lo, hi, n)
        return np.where(band, near, float(dist.get("far", 1.0)))
    if kind == "constant":
        return np.full(n, float(dist.get("value", 1.0)))
    if kind == "uniform":
        lo, hi = float(dist.get("low", 0.0)), float(dist.get("high", 1.0))
        if not 0.0 <= lo <= hi <= 1.0:
            raise SynthError(f"bad uniform confidence bounds {lo}, {hi}")
        return rng.uniform(lo, hi, n)
    if kind == "beta":
        return rng.beta(float(dist["a"]), float(dist["b"]), n)
    raise SynthError(f"unknown confidence distribution {kind!r}")


def accuracy_target(conf: np.ndarray, calib: dict, band=None) -> np.ndarray:
    """P(correct | confidence). With ``apply_to = "band"`` voxels outside ``band`` stay calibrated."""
    mode, delta = calib.get("mode", "calibrated"), float(calib.get("delta", 0.0))
    shift = {"overconfident": -delta, "underconfident": delta}.get(mode, 0.0)
    if calib.get("apply_to", "all") == "band" and band is not None:
        shift = np.where(band, shift, 0.0)
    return np.clip(conf + shift, 0.0, 1.0)


def generate_voxel_pool(n: int, confidence_dist: dict, calib_mode, seed=0):
    """Grid-free ``(confidence, correct)`` pairs for calibration tests."""
    if n < 1:
        raise ValueError("n must be >= 1")
    calib = {"mode": calib_mode} if isinstance(calib_mode, str) else dict(calib_mode)
    rng = _rng(_seed_entropy(seed))
    conf = draw_confidence(confidence_dist, n, rng)
    correct = rng.random(n) < accuracy_target(conf, calib)
    return conf, correct


def rasterize(spec: SynthSpec) -> np.ndarray:
    dims = spec.meta.dims
    grid = np.indices(dims, dtype=np.float64)
    out = np.zeros(dims, dtype=np.uint8)
    for s in spec.doc["shapes"]:
        c = np.asarray(s["center"], float).reshape(3, 1, 1, 1)
        r = np.asarray(s["radii"], float).reshape(3, 1, 1, 1)
        if s.get("geometry", "box") == "box":
            inside = np.all(np.abs(grid - c) <= r, axis=0)
        else:
            inside = (((grid - c) / r) ** 2).sum(axis=0) <= 1.0
        out[inside] = int(s["class_id"])
    return out


def _box(dims, location, size) -> tuple[slice, ...]:
    if isinstance(size, (int, float)):
        size = [int(size)] * 3
    size = [int(s) for s in size]
    if location is None:
        raise SynthError("blob errors need a location")
    lo = [int(l) - s // 2 for l, s in zip(location, size)]
    hi = [a + s for a, s in zip(lo, size)]
    if any(a < 0 for a in lo) or any(b > d for b, d in zip(hi, dims)) or min(size) < 1:
        raise SynthError(f"error blob at {location} size {size} falls outside grid {dims}")
    return tuple(slice(a, b) for a, b in zip(lo, hi))


def apply_errors(gt: np.ndarray, errors: list[dict]) -> np.ndarray:
    pred = gt.copy()
    for e in errors:
        k = int(e.get("class_id", 1))
        kind = e["kind"]
        if kind == "blob_fp":
            sl = _box(gt.shape, e.get("location"), e.get("magnitude_voxels", 1))
            region = pred[sl]
            region[gt[sl] != k] = k
        elif kind == "blob_fn":
            sl = _box(gt.shape, e.get("location"), e.get("magnitude_voxels", 1))
            region = pred[sl]
            region[gt[sl] == k] = 0
        else:
            shift = int(e.get("magnitude_voxels", 1))
            direction = np.asarray(e.get("direction", [1, 0, 0]), dtype=np.int64)
            mask = pred == k
            moved = np.zeros_like(mask)
            src, dst = [], []
            for ax in range(3):
                o = int(direction[ax]) * shift
                n = gt.shape[ax]
                if abs(o) >= n:
                    src = None
                    break
                src.append(slice(max(0, -o), n - max(0, o)))
                dst.append(slice(max(0, o), n - max(0, -o)))
            if src is not None:
                moved[tuple(dst)] = mask[tuple(src)]
            pred[mask] = 0
            pred[moved] = k
    return pred


class SynthSamples(Sequence):
    """Lazily generated stack members; sample ``m`` is rebuilt on each access."""

    def __init__(self, meta: GridMeta, base: np.ndarray, label: np.ndarray, half: np.ndarray, M: int, seed):
        self.meta = meta
        self._base = base
        self._label = label
        self._q = np.take_along_axis(base, label[None], axis=0)[0]
        self._half = half
        self._M = M
        self._pair_seeds = np.random.SeedSequence(_seed_entropy(seed) + [1]).spawn((M + 1) // 2)

    def __len__(self):
        return self._M

    def __getitem__(self, m: int) -> ProbVolume:
        if not 0 <= m < self._M:
            raise IndexError(m)
        base, q = self._base, self._q
        if m == self._M - 1 and self._M % 2 == 1:
            u = np.zeros_like(q)
        else:
            gen = np.random.Generator(np.random.Philox(self._pair_seeds[m // 2]))
            u = gen.uniform(-1.0, 1.0, q.size) * self._half
            if m % 2 == 1:
                u = -u
        qm = q + u
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(q < 1.0, (1.0 - qm) / (1.0 - q), 1.0)
        probs = base * scale[None]
        np.put_along_axis(probs, self._label[None], qm[None], axis=0)
        probs = np.clip(probs, 0.0, 1.0)
        return ProbVolume(self.meta, probs.reshape((-1,) + self.meta.dims).astype(np.float32))


def _base_probabilities(label, runner_up, q, high_spread, C):
    n = label.size
    base = np.zeros((C, n), dtype=np.float64)
    rest = 1.0 - q
    if C == 2:
        base[runner_up, np.arange(n)] = rest
    else:
        # low spread: runner-up takes as much as it can while staying below q
        r_share = np.where(high_spread, rest / (C - 1), np.minimum(rest, 0.999 * q))
        other = np.where(high_spread, rest / (C - 1), (rest - r_share) / (C - 2))
        base[:] = other[None]
        base[runner_up, np.arange(n)] = r_share
    base[label, np.arange(n)] = q
    return base


def generate(spec: SynthSpec):
    """Build ``(gt, stack, pred_truth)`` from a spec."""
    if isinstance(spec, dict):
        spec = SynthSpec.from_dict(spec)
    d = spec.doc
    meta = spec.meta
    C = meta.n_classes
    gt = rasterize(spec)
    geom = apply_errors(gt, d["errors"])

    g = gt.ravel()
    pred = geom.ravel().copy()
    n = g.size
    rng = _rng(_seed_entropy(d["seed"]))
    q_min = 1.0 / C + CONF_MARGIN

    band, across = boundary_band(gt, d["calib"]["confidence"].get("width", 1))
    band, across = band.ravel(), across.ravel()
    q = np.clip(draw_confidence(d["calib"]["confidence"], n, rng, band), q_min, 1.0)
    coin = rng.random(n)
    flip_offset = rng.integers(1, C, n)
    low_conf = rng.uniform(q_min, q_min + (1.0 - q_min) * HIGH_UNC_SPAN, n)

    geom_err = pred != g
    flipped = ~geom_err & (coin >= accuracy_target(q, d["calib"], band))
    # boundary voxels flip to the label across the edge, others to a random class
    relabel = np.where(band, across, (g.astype(np.int64) + flip_offset) % C).astype(np.uint8)
    pred[flipped] = relabel[flipped]

    unc = d["unc"]
    high = np.zeros(n, dtype=bool)
    if unc["on_errors"] == "high":
        high |= geom_err
    if unc["on_correct"] == "high":
        high |= ~geom_err
    q = np.where(high, low_conf, q)

    wrong = pred != g
    runner_up = np.where(wrong, g, np.where(pred == 0, 1, 0)).astype(np.int64)
    base = _base_probabilities(pred.astype(np.int64), runner_up, q, high, C)

    jitter = float(unc["jitter"])
    half = np.minimum(jitter, np.minimum(q, 1.0 - q))
    samples = SynthSamples(meta, base, pred.astype(np.int64), half, int(unc["M"]), d["seed"])
    stack = McStack(meta, samples)
    return LabelVolume(meta, gt), stack, LabelVolume(meta, pred.reshape(meta.dims))
