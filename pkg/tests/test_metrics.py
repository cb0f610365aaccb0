import math

import numpy as np
import pytest
from conftest import labels, make_meta
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from oracles import hd_pooled

from uqvol.metrics import boundary, dice_score, hd95, score_report
from uqvol.volume import LabelVolume

SP = (0.8, 0.8, 2.5)


def pair(a, b, n_classes=2, spacing=SP):
    return labels(a, n_classes, spacing), labels(b, n_classes, spacing)


def test_dice_examples():
    a = np.zeros((4, 4, 1), int)
    a[0:2, 0:2] = 1
    assert dice_score(*pair(a, a), 1) == 1.0
    b = np.zeros((4, 4, 1), int)
    b[2:4, 2:4] = 1
    assert dice_score(*pair(a, b), 1) == 0.0
    c = np.zeros((4, 4, 1), int)
    c[1:3, 0:2] = 1
    assert dice_score(*pair(a, c), 1) == 0.5


def test_dice_empty_masks():
    z = np.zeros((3, 3, 1), int)
    assert dice_score(*pair(z, z), 1) == 1.0
    one = z.copy()
    one[1, 1, 0] = 1
    assert dice_score(*pair(one, z), 1) == 0.0


def test_meta_mismatch_raises():
    a = labels(np.zeros((2, 2, 1)))
    b = labels(np.zeros((2, 2, 1)), spacing=(1.0, 1.0, 2.0))
    with pytest.raises(ValueError):
        dice_score(a, b, 1)
    with pytest.raises(ValueError):
        hd95(a, b, 1)


def test_hd95_examples():
    a = np.zeros((8, 3, 2), int)
    assert hd95(*pair(a, a), 1) is None
    a[2:5, 1, 0] = 1
    assert hd95(*pair(a, a), 1) == 0.0
    p, g = np.zeros((8, 3, 2), int), np.zeros((8, 3, 2), int)
    p[1, 1, 1] = 1
    g[4, 1, 1] = 1
    assert hd95(*pair(p, g), 1) == pytest.approx(2.4, abs=1e-12)
    assert hd95(*pair(p, np.zeros_like(p)), 1) is None


def test_boundary_counts_grid_edge_as_outside():
    m = np.ones((3, 3, 3), bool)
    b = boundary(m)
    assert not b[1, 1, 1] and b.sum() == 26


def test_hd95_matches_bruteforce_on_random_masks():
    rng = np.random.default_rng(3)
    for _ in range(60):
        a = rng.random((8, 8, 4)) < rng.uniform(0.05, 0.5)
        b = rng.random((8, 8, 4)) < rng.uniform(0.05, 0.5)
        if not a.any() or not b.any():
            continue
        got = hd95(*pair(a.astype(int), b.astype(int)), 1)
        assert got == pytest.approx(hd_pooled(a, b, SP), abs=1e-9)


small_mask = hnp.arrays(bool, (6, 5, 3), elements=st.booleans())


@given(small_mask, small_mask)
@settings(max_examples=60, deadline=None)
def test_hd95_symmetric_and_below_hausdorff(a, b):
    if not a.any() or not b.any():
        return
    x, y = pair(a.astype(int), b.astype(int))
    h = hd95(x, y, 1)
    assert h == pytest.approx(hd95(y, x, 1), abs=1e-12)
    assert h <= hd95(x, y, 1, percentile=100) + 1e-12
    assert dice_score(x, y, 1) == dice_score(y, x, 1)


@given(small_mask, small_mask, st.tuples(st.integers(0, 3), st.integers(0, 3), st.integers(0, 2)))
@settings(max_examples=60, deadline=None)
def test_hd95_translation_invariant(a, b, shift):
    if not a.any() or not b.any():
        return
    # both placements stay clear of the grid edge, so boundaries are unaffected by it
    big = (6 + 8, 5 + 8, 3 + 6)

    def place(offset):
        A, B = np.zeros(big, int), np.zeros(big, int)
        sl = tuple(slice(o, o + n) for o, n in zip(offset, a.shape))
        A[sl], B[sl] = a, b
        return pair(A, B)

    moved = [1 + s for s in shift]
    assert hd95(*place(moved), 1) == pytest.approx(hd95(*place((1, 1, 1)), 1), abs=1e-9)


@given(st.tuples(*[st.integers(0, 5)] * 3), st.tuples(*[st.integers(0, 5)] * 3))
def test_single_voxel_hd95_is_euclidean(p, q):
    a, b = np.zeros((6, 6, 6), int), np.zeros((6, 6, 6), int)
    a[p] = 1
    b[q] = 1
    expected = math.sqrt(sum(((x - y) * s) ** 2 for x, y, s in zip(p, q, SP)))
    assert hd95(*pair(a, b), 1) == pytest.approx(expected, abs=1e-9)


def test_dice_spatial_permutation_invariant(rng):
    a = rng.integers(0, 3, (5, 4, 3))
    b = rng.integers(0, 3, (5, 4, 3))
    perm = rng.permutation(a.size)
    pa = a.ravel()[perm].reshape(a.shape)
    pb = b.ravel()[perm].reshape(b.shape)
    for c in range(3):
        assert dice_score(*pair(a, b, 3), c) == dice_score(*pair(pa, pb, 3), c)


def test_score_report_identity_and_flags():
    gt = np.zeros((4, 4, 2), int)
    gt[0:2, 0:2, :] = 1
    gt[2:4, 2:4, :] = 2
    rep = score_report(*pair(gt, gt, 4), "dice")
    assert rep.included_classes == [1, 2, 3]
    assert rep.per_class == {1: 1.0, 2: 1.0, 3: 1.0}
    assert rep.mean == 1.0
    assert rep.flags == {3: "empty_both"}

    hd = score_report(*pair(gt, gt, 4), "hd95")
    assert hd.per_class[3] is None and hd.flags[3] == "empty_both"
    assert hd.mean == 0.0


def test_score_report_hand_counts():
    gt = np.zeros((4, 4, 1), int)
    pred = np.zeros((4, 4, 1), int)
    gt[0:2, 0:2] = 1  # 4 voxels
    pred[0:2, 0:1] = 1  # 2 voxels, both inside
    gt[2:4, 2:4] = 2  # 4 voxels
    pred[3:4, 2:4] = 2  # 2 inside
    pred[0, 3] = 2  # 1 outside
    rep = score_report(*pair(pred, gt, 3), "dice")
    assert rep.per_class[1] == pytest.approx(2 * 2 / 6)
    assert rep.per_class[2] == pytest.approx(2 * 2 / 7)
    assert rep.mean == pytest.approx((4 / 6 + 4 / 7) / 2)
    full = score_report(*pair(pred, gt, 3), "dice", include_background=True)
    assert full.included_classes == [0, 1, 2]
    assert full.per_class[0] == pytest.approx(2 * 7 / (11 + 8))


def test_score_report_mean_over_defined_only():
    gt = np.zeros((6, 6, 1), int)
    gt[0, 0] = 1
    pred = gt.copy()
    gt[4, 4] = 2  # class 2 missing from the prediction
    rep = score_report(*pair(pred, gt, 3), "hd95")
    assert rep.per_class[2] is None and rep.flags[2] == "empty_pred"
    assert rep.mean == 0.0


def test_unknown_metric():
    a = LabelVolume(make_meta((1, 1, 1)), np.zeros((1, 1, 1), np.uint8))
    with pytest.raises(ValueError):
        score_report(a, a, "assd")
