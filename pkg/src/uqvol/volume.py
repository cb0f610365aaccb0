"""Voxel-grid data model, the on-disk bundle format and CT preprocessing.

Arrays are held as numpy arrays indexed ``[i, j, k]`` (x, y, z). On disk the
payload is written with x varying fastest (Fortran order), i.e. the flat
index of voxel ``(i, j, k)`` is ``i + nx * (j + ny * k)``.

Bundle layout::

    <bundle>/meta.json
    <bundle>/data.bin          label (u8) or scalar (f32) payload
    <bundle>/ch_<c>.bin        one f32 payload per class for prob bundles
    <bundle>/<member>/...      member prob bundles for stacks
"""

from __future__ import annotations

import json
import math
import os
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

PROB_SUM_TOL = 1e-3
FORMAT_VERSION = 1


class BundleError(ValueError):
    """Raised for malformed bundles or volumes that violate their invariants."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def _voxel_index(flat_or_tuple) -> tuple[int, int, int]:
    return tuple(int(v) for v in flat_or_tuple)


@dataclass(frozen=True)
class GridMeta:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    class_names: tuple[str, ...] = ("background", "foreground")

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "class_names", tuple(str(c) for c in self.class_names))
        if len(self.dims) != 3 or len(self.spacing) != 3 or len(self.origin) != 3:
            raise BundleError("dims, spacing and origin must have three entries")
        if any(d < 1 for d in self.dims):
            raise BundleError(f"dims must be >= 1, got {self.dims}")
        if not all(math.isfinite(s) and s > 0 for s in self.spacing):
            raise BundleError(f"spacing must be finite and > 0, got {self.spacing}")
        if not all(math.isfinite(o) for o in self.origin):
            raise BundleError(f"origin must be finite, got {self.origin}")
        if not self.class_names:
            raise BundleError("class_names must be non-empty")
        if len(set(self.class_names)) != len(self.class_names):
            raise BundleError(f"class_names must be unique, got {self.class_names}")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def with_(self, **changes) -> "GridMeta":
        values = dict(
            dims=self.dims, spacing=self.spacing, origin=self.origin, class_names=self.class_names
        )
        values.update(changes)
        return GridMeta(**values)

    def to_json(self) -> dict:
        return {
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "origin": list(self.origin),
            "class_names": list(self.class_names),
        }


@dataclass(frozen=True)
class LabelVolume:
    meta: GridMeta
    voxels: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.shape != self.meta.dims:
            raise BundleError(f"label voxels shape {v.shape} != dims {self.meta.dims}")
        if v.dtype != np.uint8:
            if v.size and (v.min() < 0 or v.max() > 255 or not np.all(v == np.round(v))):
                raise BundleError("label voxels must be integers in [0, 255]")
            v = v.astype(np.uint8)
        bad = np.argwhere(v >= self.meta.n_classes)
        if len(bad):
            idx = _voxel_index(bad[0])
            raise BundleError(
                f"label {int(v[idx])} at voxel {idx} exceeds class count {self.meta.n_classes}"
            )
        object.__setattr__(self, "voxels", _freeze(v))

    kind = "label"


@dataclass(frozen=True)
class ProbVolume:
    """Per-class probability maps, ``channels`` has shape ``(C, nx, ny, nz)``."""

    meta: GridMeta
    channels: np.ndarray
    validate: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        ch = np.asarray(self.channels, dtype=np.float32)
        expected = (self.meta.n_classes,) + self.meta.dims
        if ch.shape != expected:
            raise BundleError(f"prob channels shape {ch.shape} != {expected}")
        if self.validate:
            _check_prob(ch)
        object.__setattr__(self, "channels", _freeze(ch))

    kind = "prob"


def _check_prob(ch: np.ndarray) -> None:
    bad = ~((ch >= 0.0) & (ch <= 1.0))
    if bad.any():
        loc = np.argwhere(bad)[0]
        raise BundleError(
            f"probability {float(ch[tuple(loc)])!r} outside [0, 1] "
            f"at voxel {_voxel_index(loc[1:])} channel {int(loc[0])}"
        )
    sums = ch.sum(axis=0, dtype=np.float64)
    bad = np.abs(sums - 1.0) > PROB_SUM_TOL
    if bad.any():
        loc = _voxel_index(np.argwhere(bad)[0])
        raise BundleError(f"channel sum {float(sums[loc]):.6g} != 1 at voxel {loc}")


@dataclass(frozen=True)
class ScalarMap:
    meta: GridMeta
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.shape != self.meta.dims:
            raise BundleError(f"scalar values shape {v.shape} != dims {self.meta.dims}")
        bad = ~np.isfinite(v)
        if bad.any():
            raise BundleError(f"non-finite value at voxel {_voxel_index(np.argwhere(bad)[0])}")
        object.__setattr__(self, "values", _freeze(v))

    kind = "scalar"


class McStack:
    """M Monte-Carlo probability samples over one grid.

    ``samples`` may be any sequence of :class:`ProbVolume`, including a lazy
    one that loads or generates members on access; consumers iterate it once
    in index order.
    """

    kind = "stack"

    def __init__(self, meta: GridMeta, samples: Sequence[ProbVolume], member_names=None):
        if len(samples) < 1:
            raise BundleError("a stack needs at least one sample")
        if isinstance(samples, list):
            for m, s in enumerate(samples):
                if s.meta != meta:
                    raise BundleError(f"stack sample {m} has mismatching meta")
        self.meta = meta
        self.samples = samples
        if member_names is None:
            member_names = [f"sample_{m:03d}" for m in range(len(samples))]
        self.member_names = list(member_names)

    @property
    def M(self) -> int:
        return len(self.samples)

    def __iter__(self):
        for m in range(len(self.samples)):
            s = self.samples[m]
            if s.meta != self.meta:
                raise BundleError(f"stack sample {m} has mismatching meta")
            yield s


Volume = Union[LabelVolume, ProbVolume, ScalarMap, McStack]


# --------------------------------------------------------------------- I/O


def _to_bytes(arr: np.ndarray, dtype: str) -> bytes:
    return np.ascontiguousarray(arr.astype(dtype, copy=False).ravel(order="F")).tobytes()


def _from_file(path: Path, dtype: str, dims) -> np.ndarray:
    if not path.is_file():
        raise BundleError(f"missing payload file {path}")
    raw = path.read_bytes()
    itemsize = np.dtype(dtype).itemsize
    n = dims[0] * dims[1] * dims[2]
    if len(raw) != n * itemsize:
        raise BundleError(
            f"payload {path.name} has {len(raw)} bytes, expected {n * itemsize} for dims {tuple(dims)}"
        )
    return np.frombuffer(raw, dtype=dtype).reshape(tuple(dims), order="F").copy()


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _write_meta(path: Path, meta: GridMeta, kind: str, dtype: str, **extra) -> None:
    doc = {"format": FORMAT_VERSION, "kind": kind, "dtype": dtype}
    doc.update(meta.to_json())
    doc.update(extra)
    _atomic_write(path / "meta.json", (json.dumps(doc, indent=2) + "\n").encode("utf-8"))


def write_bundle(volume: Volume, path) -> None:
    """Write ``volume`` as a bundle directory at ``path``."""
    path = Path(path)
    if isinstance(volume, ScalarMap):
        if not np.all(np.isfinite(volume.values)):
            raise BundleError("refusing to write a scalar map with non-finite values")
    path.mkdir(parents=True, exist_ok=True)
    if isinstance(volume, LabelVolume):
        _atomic_write(path / "data.bin", _to_bytes(volume.voxels, "<u1"))
        _write_meta(path, volume.meta, "label", "u8")
    elif isinstance(volume, ScalarMap):
        _atomic_write(path / "data.bin", _to_bytes(volume.values, "<f4"))
        _write_meta(path, volume.meta, "scalar", "f32")
    elif isinstance(volume, ProbVolume):
        for c in range(volume.meta.n_classes):
            _atomic_write(path / f"ch_{c}.bin", _to_bytes(volume.channels[c], "<f4"))
        _write_meta(path, volume.meta, "prob", "f32")
    elif isinstance(volume, McStack):
        for name, sample in zip(volume.member_names, volume):
            write_bundle(sample, path / name)
        _write_meta(
            path, volume.meta, "stack", "f32", M=volume.M, members=list(volume.member_names)
        )
    else:
        raise TypeError(f"cannot write {type(volume).__name__}")


def _read_meta(path: Path) -> tuple[dict, GridMeta]:
    meta_path = path / "meta.json"
    if not meta_path.is_file():
        raise BundleError(f"missing header {meta_path}")
    try:
        doc = json.loads(meta_path.read_text(encoding="utf-8"))
        meta = GridMeta(
            dims=doc["dims"],
            spacing=doc["spacing"],
            origin=doc.get("origin", (0.0, 0.0, 0.0)),
            class_names=doc["class_names"],
        )
        kind, dtype = doc["kind"], doc["dtype"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise BundleError(f"corrupt header {meta_path}: {exc}") from exc
    expected = {"label": "u8", "scalar": "f32", "prob": "f32", "stack": "f32"}
    if kind not in expected:
        raise BundleError(f"unknown bundle kind {kind!r} in {meta_path}")
    if dtype != expected[kind]:
        raise BundleError(f"dtype {dtype!r} does not match kind {kind!r} in {meta_path}")
    return doc, meta


class _LazyMembers(Sequence):
    def __init__(self, root: Path, names: list[str], meta: GridMeta):
        self._root = root
        self._names = names
        self._meta = meta

    def __len__(self):
        return len(self._names)

    def __getitem__(self, m):
        vol = read_bundle(self._root / self._names[m])
        if not isinstance(vol, ProbVolume):
            raise BundleError(f"stack member {self._names[m]} is not a prob bundle")
        if vol.meta != self._meta:
            raise BundleError(f"stack member {self._names[m]} has mismatching meta")
        return vol


def read_bundle(path, lazy: bool = True) -> Volume:
    """Read a bundle directory, validating the invariants of its volume type.

    Stack members are validated when they are loaded; with ``lazy=False``
    every member is read and checked immediately.
    """
    path = Path(path)
    doc, meta = _read_meta(path)
    kind = doc["kind"]
    if kind == "label":
        return LabelVolume(meta, _from_file(path / "data.bin", "<u1", meta.dims))
    if kind == "scalar":
        return ScalarMap(meta, _from_file(path / "data.bin", "<f4", meta.dims))
    if kind == "prob":
        channels = np.stack(
            [_from_file(path / f"ch_{c}.bin", "<f4", meta.dims) for c in range(meta.n_classes)]
        )
        return ProbVolume(meta, channels)
    members = doc.get("members")
    if not isinstance(members, list) or not members:
        raise BundleError(f"stack header {path / 'meta.json'} lists no members")
    if doc.get("M", len(members)) != len(members):
        raise BundleError(f"stack header M={doc.get('M')} but {len(members)} members listed")
    samples = _LazyMembers(path, members, meta)
    if not lazy:
        samples = [samples[m] for m in range(len(members))]
    return McStack(meta, samples, member_names=members)


# ---------------------------------------------------------- preprocessing


def clip_hu(ct: ScalarMap, lo: float = -125.0, hi: float = 225.0) -> ScalarMap:
    """Clamp Hounsfield units into ``[lo, hi]``."""
    if not lo < hi:
        raise ValueError(f"need lo < hi, got {lo}, {hi}")
    return ScalarMap(ct.meta, np.clip(ct.values, np.float32(lo), np.float32(hi)))


def _map_voxels(vol: Volume, fn, meta: GridMeta) -> Volume:
    if isinstance(vol, LabelVolume):
        return LabelVolume(meta, fn(vol.voxels))
    if isinstance(vol, ScalarMap):
        return ScalarMap(meta, fn(vol.values))
    if isinstance(vol, ProbVolume):
        return ProbVolume(meta, np.stack([fn(ch) for ch in vol.channels]))
    if isinstance(vol, McStack):
        return McStack(meta, [_map_voxels(s, fn, meta) for s in vol], vol.member_names)
    raise TypeError(f"unsupported volume {type(vol).__name__}")


def crop_box(vol: Volume, lo, hi) -> Volume:
    """Copy the half-open voxel box ``[lo, hi)`` after clamping it to the grid."""
    dims = vol.meta.dims
    lo = [max(0, int(a)) for a in lo]
    hi = [min(d, int(b)) for d, b in zip(dims, hi)]
    if any(b <= a for a, b in zip(lo, hi)):
        raise ValueError(f"crop box {lo}..{hi} does not intersect grid {dims}")
    origin = tuple(o + a * s for o, a, s in zip(vol.meta.origin, lo, vol.meta.spacing))
    meta = vol.meta.with_(dims=tuple(b - a for a, b in zip(lo, hi)), origin=origin)
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    return _map_voxels(vol, lambda a: a[sl].copy(), meta)


def crop(vol: Volume, center_voxel, size) -> Volume:
    """Crop a box of ``size`` voxels centred on ``center_voxel``, clamped to the grid.

    The box starts at ``center - size // 2``, so for even sizes the centre
    voxel sits just above the middle.
    """
    if any(int(s) < 1 for s in size):
        raise ValueError(f"crop size must be >= 1, got {size}")
    lo = [int(c) - int(s) // 2 for c, s in zip(center_voxel, size)]
    hi = [a + int(s) for a, s in zip(lo, size)]
    return crop_box(vol, lo, hi)


def _resample_axis(a: np.ndarray, axis: int, n_out: int, ratio: float, mode: str) -> np.ndarray:
    n_in = a.shape[axis]
    # source index of each output voxel centre
    u = (np.arange(n_out, dtype=np.float64) + 0.5) * ratio - 0.5
    if mode == "nearest":
        idx = np.clip(np.floor(u + 0.5).astype(np.int64), 0, n_in - 1)
        return np.take(a, idx, axis=axis)
    u = np.clip(u, 0.0, n_in - 1)
    i0 = np.floor(u).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = u - i0
    shape = [1] * a.ndim
    shape[axis] = n_out
    w = w.reshape(shape)
    return np.take(a, i0, axis=axis) * (1.0 - w) + np.take(a, i1, axis=axis) * w


def resample(vol: Volume, new_spacing, mode: str = "trilinear") -> Volume:
    """Resample onto a grid with ``new_spacing`` sharing the same origin corner.

    Output dims are ``ceil(dims * spacing / new_spacing)``; samples outside the
    source grid clamp to the edge voxel. Trilinear interpolation is applied
    separably, which is identical to the tensor-product trilinear weights.
    """
    if mode not in ("nearest", "trilinear"):
        raise ValueError(f"unknown resampling mode {mode!r}")
    new_spacing = tuple(float(s) for s in new_spacing)
    if len(new_spacing) != 3 or not all(s > 0 for s in new_spacing):
        raise ValueError(f"new spacing must be three positive values, got {new_spacing}")
    if isinstance(vol, LabelVolume) and mode != "nearest":
        raise ValueError("label volumes can only be resampled with mode='nearest'")
    meta = vol.meta
    ratios = [ns / s for ns, s in zip(new_spacing, meta.spacing)]
    # round before ceil so that exact multiples are not bumped by float noise
    new_dims = tuple(
        max(1, math.ceil(round(d * s / ns, 9)))
        for d, s, ns in zip(meta.dims, meta.spacing, new_spacing)
    )
    out_meta = meta.with_(dims=new_dims, spacing=new_spacing)

    def fn(a):
        src_dtype = a.dtype
        work = a if mode == "nearest" else a.astype(np.float64)
        for axis in range(3):
            work = _resample_axis(work, axis, new_dims[axis], ratios[axis], mode)
        return work.astype(src_dtype)

    if isinstance(vol, ProbVolume) and mode == "trilinear":
        return ProbVolume(out_meta, np.stack([fn(ch) for ch in vol.channels]))
    return _map_voxels(vol, fn, out_meta)
