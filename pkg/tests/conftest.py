import numpy as np
import pytest

from uqvol.volume import GridMeta, LabelVolume, ProbVolume, ScalarMap


def make_meta(dims, n_classes=2, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    names = ["background"] + [f"organ_{c}" for c in range(1, n_classes)]
    return GridMeta(tuple(dims), tuple(spacing), tuple(origin), tuple(names))


def labels(arr, n_classes=2, spacing=(1.0, 1.0, 1.0)):
    arr = np.asarray(arr, dtype=np.uint8)
    return LabelVolume(make_meta(arr.shape, n_classes, spacing), arr)


def random_prob(rng, dims, n_classes):
    raw = rng.random((n_classes,) + tuple(dims))
    return ProbVolume(make_meta(dims, n_classes), (raw / raw.sum(axis=0)).astype(np.float32))


def scalar(arr, n_classes=2):
    arr = np.asarray(arr, dtype=np.float32)
    return ScalarMap(make_meta(arr.shape, n_classes), arr)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
