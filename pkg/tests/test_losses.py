import math

import numpy as np
import pytest
from conftest import labels
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import ce_value, central_fd, soft_dice_value

from uqvol.losses import (
    EPS_PROB,
    LOSSES,
    ClassWeights,
    basic_ce_loss,
    class_weights,
    finite_difference_check,
    modified_ce_loss,
    one_hot,
    soft_dice_loss,
)


def random_instance(rng, C=3, shape=(3, 3, 1)):
    lab = rng.integers(0, C, shape)
    y = one_hot(lab, range(C))
    p = rng.uniform(0.05, 0.95, (C,) + shape)
    w = ClassWeights(tuple(range(C)), rng.uniform(0.5, 2.0, C))
    return p, y, w


def test_class_weight_examples():
    eq = labels(np.array([1, 1, 2, 2]).reshape(4, 1, 1), 3)
    np.testing.assert_allclose(class_weights([eq]).w, [1.0, 1.0])
    vol = np.array([1] * 100 + [2] * 300).reshape(400, 1, 1)
    np.testing.assert_allclose(class_weights([labels(vol, 3)]).w, [1.5, 0.5])
    three = np.repeat([1, 2, 3], 10).reshape(30, 1, 1)
    np.testing.assert_allclose(class_weights([labels(three, 4)]).w, [1, 1, 1])


def test_class_weights_average_over_volumes_and_missing_class():
    a = labels(np.array([1, 1, 1, 2]).reshape(4, 1, 1), 3)
    b = labels(np.array([1, 2, 2, 2]).reshape(4, 1, 1), 3)
    np.testing.assert_allclose(class_weights([a, b]).w, [1.0, 1.0])
    missing = labels(np.array([0, 1]).reshape(2, 1, 1), 3)
    with pytest.raises(ValueError, match="class 2"):
        class_weights([missing])
    with pytest.raises(ValueError):
        class_weights([])


def test_class_weights_with_background():
    vol = labels(np.array([0] * 6 + [1] * 2 + [2] * 4).reshape(12, 1, 1), 3)
    cw = class_weights([vol], class_ids=(0, 1, 2))
    raw = np.array([1 / 6, 1 / 2, 1 / 4])
    np.testing.assert_allclose(cw.w, raw / raw[1:].mean())
    with pytest.raises(ValueError):
        ClassWeights((0, 1), np.array([1.0, 0.0]))


def test_dice_examples():
    y = one_hot(np.array([[[0], [1]], [[1], [0]]]), range(2))
    assert soft_dice_loss(y, y, smooth=0).value == pytest.approx(0.0, abs=1e-15)
    assert soft_dice_loss(1 - y, y, smooth=0).value == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        soft_dice_loss(np.zeros((2, 0)), np.zeros((2, 0)))


def test_dice_matches_scalar_oracle_and_fd(rng):
    p, y, w = random_instance(rng, C=2)
    ev = soft_dice_loss(p, y, w)
    assert ev.value == pytest.approx(soft_dice_value(p, y, w.w, 1e-5), abs=1e-12)
    fd = central_fd(lambda x: soft_dice_value(x, y, w.w, 1e-5), p)
    np.testing.assert_allclose(ev.gradient, fd, rtol=1e-4, atol=1e-10)


def test_dice_gradient_at_perfect_prediction(rng):
    y = one_hot(rng.integers(0, 3, (4, 3, 2)), range(3))
    assert y.sum(axis=(1, 2, 3)).min() > 0
    assert finite_difference_check(soft_dice_loss, y, y, None) < 1e-4


def test_ce_examples():
    y = np.array([[1.0]])
    assert modified_ce_loss(np.array([[0.5]]), y).value == pytest.approx(math.log(2), abs=1e-12)
    assert basic_ce_loss(np.array([[1 - EPS_PROB]]), y).value == pytest.approx(0.0, abs=1e-6)
    ys = one_hot(np.arange(12).reshape(3, 2, 2) % 4, range(4))
    perfect = modified_ce_loss(ys, ys).value
    assert perfect == pytest.approx(-ys[0].size * math.log(1 - EPS_PROB), rel=1e-6)
    assert perfect < 1e-4


@pytest.mark.parametrize("name", ["ce", "ce-basic"])
def test_ce_matches_oracle_and_fd(rng, name):
    p, y, w = random_instance(rng, C=3, shape=(2, 3, 2))
    ev = LOSSES[name](p, y, w)
    bg = name == "ce"
    assert ev.value == pytest.approx(ce_value(p, y, w.w, EPS_PROB, bg), rel=1e-12)
    fd = central_fd(lambda x: ce_value(x, y, w.w, EPS_PROB, bg), p)
    np.testing.assert_allclose(ev.gradient, fd, rtol=1e-4, atol=1e-10)


def test_basic_is_modified_minus_background(rng):
    p, y, w = random_instance(rng)
    pc = np.clip(p, EPS_PROB, 1 - EPS_PROB)
    bg_term = -(w.w * np.where(y == 0, np.log(1 - pc), 0).reshape(3, -1).sum(axis=1)).sum() / 3
    assert basic_ce_loss(p, y, w).value == pytest.approx(modified_ce_loss(p, y, w).value - bg_term, rel=1e-12)


def test_gradient_zero_where_clamped():
    p = np.array([[0.0, 1.0, 0.5]])
    y = np.array([[1.0, 0.0, 1.0]])
    g = modified_ce_loss(p, y).gradient
    assert g[0, 0] == 0 and g[0, 1] == 0 and g[0, 2] != 0
    assert np.all(np.isfinite(modified_ce_loss(p, y).value))


@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10))
@settings(max_examples=40, deadline=None)
def test_weight_scaling_is_linear(seed, k):
    rng = np.random.default_rng(seed)
    p, y, w = random_instance(rng)
    scaled = ClassWeights(w.class_ids, w.w * k)
    for fn in (modified_ce_loss, basic_ce_loss):
        a, b = fn(p, y, w), fn(p, y, scaled)
        assert b.value == pytest.approx(k * a.value, rel=1e-12)
        np.testing.assert_allclose(b.gradient, k * a.gradient, rtol=1e-12)
    # the DICE loss is 1 minus a weighted term, so the weighted term scales
    a, b = soft_dice_loss(p, y, w), soft_dice_loss(p, y, scaled)
    assert 1 - b.value == pytest.approx(k * (1 - a.value), rel=1e-12)
    np.testing.assert_allclose(b.gradient, k * a.gradient, rtol=1e-12)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_modified_dominates_basic_and_nonnegative(seed):
    rng = np.random.default_rng(seed)
    p, y, w = random_instance(rng)
    p = np.where(rng.random(p.shape) < 0.2, rng.choice([0.0, 1.0], p.shape), p)
    m, b = modified_ce_loss(p, y, w).value, basic_ce_loss(p, y, w).value
    assert m >= b >= 0


def test_fd_check_helper_detects_wrong_gradient(rng):
    p, y, w = random_instance(rng)

    def broken(prob, gt, weights):
        ev = soft_dice_loss(prob, gt, weights)
        return type(ev)(ev.value, ev.gradient * 1.01)

    assert finite_difference_check(soft_dice_loss, p, y, w) < 1e-4
    assert finite_difference_check(broken, p, y, w) > 1e-3
