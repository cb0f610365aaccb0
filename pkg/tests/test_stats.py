import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import wilcoxon_bruteforce

from uqvol.stats import PairedSample, exact_cdf, signed_ranks, wilcoxon_signed_rank


def sample(a, b):
    return PairedSample(None, a, b)


def test_identical_scores_give_p_one():
    r = wilcoxon_signed_rank(sample([0.7, 0.8, 0.9], [0.7, 0.8, 0.9]))
    assert r.p_two_sided == 1.0 and r.n_eff == 0
    assert "all_differences_zero" in r.flags


def test_all_positive_five():
    r = wilcoxon_signed_rank(sample([2, 3, 4, 5, 6], [1, 1, 1, 1, 1]))
    assert r.W == 0 and r.n_eff == 5
    assert r.p_two_sided == 0.0625


def test_matches_bruteforce_tie_free():
    rng = np.random.default_rng(8)
    for n in range(1, 13):
        d = rng.permutation(np.arange(1, n + 1)) * rng.choice([-1, 1], n) + rng.normal(0, 0.01, n)
        r = wilcoxon_signed_rank(sample(d, np.zeros(n)))
        w, p = wilcoxon_bruteforce(d.tolist())
        assert r.W == w
        assert abs(r.p_two_sided - p) <= 1e-12


def test_matches_bruteforce_with_ties_and_zeros():
    rng = np.random.default_rng(9)
    for _ in range(40):
        n = int(rng.integers(2, 12))
        d = rng.integers(-3, 4, n).astype(float)
        if not d.any():
            continue
        r = wilcoxon_signed_rank(sample(d, np.zeros(n)))
        w, p = wilcoxon_bruteforce(d.tolist())
        assert r.W == pytest.approx(w) and abs(r.p_two_sided - p) <= 1e-12
        assert r.n_eff == int(np.count_nonzero(d))
        assert "ties" in r.flags or len(set(np.abs(d[d != 0]))) == r.n_eff


# two-sided alpha = 0.05 critical values of the signed-rank statistic
CRITICAL_05 = {6: 0, 7: 2, 8: 3, 9: 5, 10: 8}


@pytest.mark.parametrize("n, crit", sorted(CRITICAL_05.items()))
def test_published_critical_values(n, crit):
    ranks = np.arange(1, n + 1, dtype=float)
    assert 2 * exact_cdf(ranks, crit) <= 0.05
    assert 2 * exact_cdf(ranks, crit + 1) > 0.05


def test_signed_ranks_average_ties():
    ranks, signs = signed_ranks([0.0, -1.0, 1.0, 2.0])
    assert ranks.tolist() == [1.5, 1.5, 3.0]
    assert signs.tolist() == [-1.0, 1.0, 1.0]


def test_normal_approximation_close_to_exact():
    rng = np.random.default_rng(4)
    d = rng.normal(0.3, 1.0, 20)
    exact = wilcoxon_signed_rank(sample(d, np.zeros(20)))
    approx = wilcoxon_signed_rank(sample(d, np.zeros(20)), mode="normal-approx")
    assert approx.W == exact.W
    assert abs(approx.p_two_sided - exact.p_two_sided) < 0.02


def test_large_exact_warns():
    d = np.arange(1, 31, dtype=float) * np.where(np.arange(30) % 3 == 0, -1, 1)
    with pytest.warns(UserWarning):
        r = wilcoxon_signed_rank(sample(d, np.zeros(30)))
    assert 0 < r.p_two_sided <= 1


def test_invalid_inputs():
    with pytest.raises(ValueError):
        PairedSample(None, [1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        PairedSample(None, [float("nan")], [1.0])
    with pytest.raises(ValueError):
        wilcoxon_signed_rank(sample([1.0], [0.0]), mode="permutation")
    with pytest.raises(ValueError):
        wilcoxon_signed_rank(sample([1.0], [0.0]), zero_policy="pratt")


finite = st.floats(-100, 100, allow_nan=False)


@given(st.lists(st.tuples(finite, finite), min_size=1, max_size=12))
@settings(max_examples=150, deadline=None)
def test_p_range_and_swap_symmetry(pairs):
    a, b = zip(*pairs)
    r = wilcoxon_signed_rank(sample(a, b))
    s = wilcoxon_signed_rank(sample(b, a))
    assert 0 < r.p_two_sided <= 1
    assert r.p_two_sided == s.p_two_sided and r.W == s.W


@given(st.lists(st.integers(1, 1000), min_size=1, max_size=10, unique=True), st.randoms(use_true_random=False))
@settings(max_examples=100, deadline=None)
def test_rank_based_invariance(mags, r):
    signs = [r.choice([-1, 1]) for _ in mags]
    d = np.array(mags, dtype=float) * signs
    base = wilcoxon_signed_rank(sample(d, np.zeros(len(d))))
    # integer magnitudes keep the transform exact, so no ties are introduced
    warped = np.sign(d) * (np.abs(d) ** 2 + 7)
    other = wilcoxon_signed_rank(sample(warped, np.zeros(len(d))))
    assert base.p_two_sided == other.p_two_sided
