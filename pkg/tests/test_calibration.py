import numpy as np
import pytest
from conftest import labels, make_meta
from hypothesis import given
from hypothesis import strategies as st
from oracles import ece_loop

from uqvol.calibration import bin_table, ece_report, reliability
from uqvol.volume import ProbVolume


def binary_volume(conf, gt, pred=None):
    """Two-class volume of shape (N,1,1) whose channel 1 carries ``conf``."""
    conf = np.asarray(conf, np.float32)
    n = conf.size
    meta = make_meta((n, 1, 1), 2)
    ch = np.stack([1 - conf, conf]).reshape(2, n, 1, 1).astype(np.float32)
    pred = np.ones(n, int) if pred is None else np.asarray(pred)
    return ProbVolume(meta, ch), labels(pred.reshape(n, 1, 1)), labels(np.asarray(gt).reshape(n, 1, 1))


def test_perfect_confidence_and_accuracy():
    t = reliability(*binary_volume(np.ones(20), np.ones(20, int)), 1)
    assert t.ece_weighted == 0.0 and t.ece_paper == 0.0
    assert t.bins[-1].count == 20


def test_seventy_percent_example():
    gt = np.array([1] * 70 + [0] * 30)
    t = reliability(*binary_volume(np.full(100, 0.7), gt), 1)
    filled = [b for b in t.bins if b.count]
    assert len(filled) == 1
    assert filled[0].accuracy == pytest.approx(0.70)
    assert filled[0].mean_conf == pytest.approx(0.70, abs=1e-6)
    assert t.ece_weighted == pytest.approx(0.0, abs=1e-6)


def test_hand_example():
    conf = np.array([0.95] * 50 + [0.55] * 50)
    gt = np.array([1] * 50 + [0] * 50)
    t = reliability(*binary_volume(conf, gt), 1)
    assert t.ece_weighted == pytest.approx(0.30, abs=1e-6)
    assert t.ece_paper == pytest.approx((0.05 + 0.55) / 2, abs=1e-6)
    rep = ece_report(*binary_volume(conf, gt))
    assert rep.tables[1].ece_weighted == pytest.approx(0.30, abs=1e-6)
    assert rep.mean_weighted == pytest.approx(0.30, abs=1e-6)


def test_no_selected_voxels_flagged():
    t = reliability(*binary_volume(np.full(5, 0.2), np.zeros(5, int), pred=np.zeros(5, int)), 1)
    assert t.ece_weighted is None and t.ece_paper is None
    assert t.flags == ["no_selected_voxels"] and t.n_selected == 0
    assert all(b.count == 0 for b in t.bins)


def test_class_channel_all_selection():
    conf = np.array([0.05, 0.15, 0.95, 0.85])
    gt = np.array([0, 0, 1, 1])
    pred = np.array([0, 0, 0, 0])
    t = reliability(*binary_volume(conf, gt, pred), 1, selection="class-channel-all")
    assert t.n_selected == 4
    assert t.ece_weighted == pytest.approx(np.mean([0.05, 0.15, 0.05, 0.15]), abs=1e-6)
    with pytest.raises(ValueError):
        reliability(*binary_volume(conf, gt, pred), 1, selection="everything")


def test_bin_edges():
    bins, _, _ = bin_table([0.0, 0.1, 0.5, 0.9999, 1.0], [1, 1, 1, 1, 1], 10)
    assert [b.count for b in bins] == [1, 1, 0, 0, 0, 1, 0, 0, 0, 2]
    assert bins[0].lo == 0.0 and bins[-1].hi == 1.0
    for b in bins:
        if b.count:
            assert b.lo <= b.mean_conf <= b.hi


def test_one_hot_perfect_prediction_report(rng):
    gt = rng.integers(0, 4, (6, 5, 3))
    onehot = np.eye(4, dtype=np.float32)[gt].transpose(3, 0, 1, 2)
    mp = ProbVolume(make_meta(gt.shape, 4), onehot)
    rep = ece_report(mp, labels(gt, 4), labels(gt, 4))
    assert set(rep.tables) == {1, 2, 3}
    assert all(t.ece_weighted == 0.0 and t.ece_paper == 0.0 for t in rep.tables.values())


def test_matches_loop_oracle(rng):
    conf = rng.random(2000)
    correct = rng.random(2000) < conf
    _, w, _ = bin_table(conf, correct, 10)
    assert w == pytest.approx(ece_loop(conf.tolist(), correct.tolist(), 10), abs=1e-12)


def test_uniform_random_against_sampling_oracle():
    rng = np.random.default_rng(11)
    n = 200_000
    conf = rng.random(n)
    gt = (rng.random(n) < 0.5).astype(int)
    t = reliability(*binary_volume(conf, gt, np.zeros(n, int)), 1, selection="class-channel-all")
    # accuracy 1/2 in every bin, mean confidence at each bin centre
    oracle = np.mean([abs(0.5 - (b + 0.5) / 10) for b in range(10)])
    assert abs(t.ece_weighted - oracle) < 0.02


def test_calibrated_bernoulli_converges():
    rng = np.random.default_rng(5)
    conf = rng.random(10**6)
    correct = rng.random(10**6) < conf
    _, w, _ = bin_table(conf, correct, 10)
    assert w <= 0.02


@pytest.mark.parametrize("delta", [0.0, 0.05, 0.1, 0.2])
def test_constant_shift(delta):
    rng = np.random.default_rng(9)
    conf = rng.uniform(0, 1 - delta, 10**6)
    correct = rng.random(10**6) < conf
    _, w, _ = bin_table(np.clip(conf + delta, 0, 1), correct, 10)
    assert abs(w - delta) <= 0.02


@given(
    st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=1, max_size=200),
    st.integers(1, 20),
)
def test_ece_in_unit_interval(pairs, n_bins):
    conf, ok = zip(*pairs)
    _, w, p = bin_table(conf, ok, n_bins)
    assert 0 <= w <= 1 and 0 <= p <= 1


def test_split_bin_with_identical_stats_leaves_weighted_ece():
    # identical (accuracy, mean_conf) in the two halves of bin [0.6, 0.8)
    conf = np.array([0.62, 0.68, 0.72, 0.78])
    ok = np.array([1, 0, 1, 0], bool)
    _, w5, _ = bin_table(conf, ok, 5)
    _, w10, _ = bin_table(conf, ok, 10)
    assert w5 == pytest.approx(w10, abs=1e-12)
