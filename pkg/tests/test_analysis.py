import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vflmid import analysis as an
from vflmid.errors import DomainError


def loop_mi(table):
    t = np.asarray(table, float)
    n = t.sum()
    rows = t.sum(axis=1)
    cols = t.sum(axis=0)
    mi = 0.0
    for i in range(t.shape[0]):
        for j in range(t.shape[1]):
            if t[i, j] > 0:
                mi += t[i, j] / n * math.log(t[i, j] * n / (rows[i] * cols[j]))
    return mi


# ---------------------------------------------------------------- MI

def test_mi_matches_cell_loop():
    rng = np.random.default_rng(0)
    for _ in range(100):
        t = rng.integers(0, 20, size=(rng.integers(1, 6), rng.integers(1, 6)))
        t[0, 0] += 1
        assert abs(an.plugin_mi(t) - loop_mi(t)) < 1e-9


@pytest.mark.parametrize("table, expected", [
    ([[50, 0], [0, 50]], math.log(2)),
    ([[25, 25], [25, 25]], 0.0),
    ([[0, 30], [30, 0]], math.log(2)),
    ([[10]], 0.0),
])
def test_mi_examples(table, expected):
    assert abs(an.plugin_mi(table) - expected) < 1e-12


def test_mi_errors():
    with pytest.raises(DomainError):
        an.plugin_mi([[0, 0], [0, 0]])
    with pytest.raises(DomainError):
        an.plugin_mi([[1, -1]])
    with pytest.raises(DomainError):
        an.joint_counts([0, 1], [0])
    with pytest.raises(DomainError):
        an.joint_counts([], [])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 3)), min_size=1, max_size=80))
def test_mi_properties(pairs):
    a = [p[0] for p in pairs]
    b = [p[1] for p in pairs]
    mi = an.plugin_mi(an.joint_counts(a, b))
    assert mi >= 0
    assert abs(mi - an.plugin_mi(an.joint_counts(b, a))) < 1e-12
    ha = an.entropy(np.bincount(a))
    hb = an.entropy(np.bincount(b))
    assert mi <= min(ha, hb) + 1e-9


def test_joint_counts_example():
    assert an.joint_counts([0, 1, 1, 2], [1, 0, 0, 1]).tolist() == [[0, 1], [2, 0], [0, 1]]


def test_vib_bound_zero_at_prior_and_grows_with_mu():
    z = np.zeros((5, 3))
    assert an.vib_mi_upper_bound(z, z) == 0.0
    assert an.vib_mi_upper_bound(np.ones((5, 3)), z) == pytest.approx(1.5)
    vals = [an.vib_mi_upper_bound(np.full((5, 3), s), z) for s in (0.1, 0.5, 1.0, 2.0)]
    assert vals == sorted(vals)


# ---------------------------------------------------------------- information gap

def test_lemma1_gap_examples():
    rng = np.random.default_rng(1)
    y = rng.integers(0, 2, 10000)
    assert an.lemma1_gap(y, y, y) == 0.0
    assert abs(an.lemma1_gap(y, rng.integers(0, 2, 10000), y) - math.log(2)) < 0.05
    with pytest.raises(DomainError):
        an.lemma1_gap([0, 1], [0], [0, 1])


def test_lemma1_gap_relabel_invariant():
    rng = np.random.default_rng(2)
    y = rng.integers(0, 3, 500)
    c = np.where(rng.random(500) < 0.8, y, rng.integers(0, 3, 500))
    p = rng.integers(0, 3, 500)
    perm = np.array([2, 0, 1])
    assert abs(an.lemma1_gap(c, p, y) - an.lemma1_gap(perm[c], perm[p], y)) < 1e-12


# ---------------------------------------------------------------- bound evaluator

def test_bound_degenerate_cases():
    assert an.theorem1_rhs(an.BoundInputs(0, 0, 4, 0.5, 0.5, 1)) == 0.0
    assert an.theorem1_rhs(an.BoundInputs(0, 0, 4, 0.5, 0.5, math.e)) == 1.0


def test_bound_spreadsheet_example():
    # B2 = 8 sqrt(2 ln 2) and B1 = B2 ln(1/B2); both parties contribute equally
    b2 = 8 * math.sqrt(2 * math.log(2))
    b1 = -b2 * math.log(b2)
    per_party = b1 * 2 * 0.1 + b2 * 2 ** 1.5 * 0.1 ** 0.5
    got = an.theorem1_rhs(an.BoundInputs(0.01, 0.01, 4, 0.5, 0.5, 1))
    assert got == pytest.approx(2 * per_party, rel=1e-14)
    assert got == pytest.approx(8.399651703557675, rel=1e-12)


def test_bound_terms_sum():
    t = an.theorem1_terms(an.BoundInputs(0.3, 0.2, 3, 0.4, 0.7, 5))
    assert t.total == pytest.approx(t.t1 + t.t2 + t.t3 + t.t4 + t.b0)
    assert t.t1 < 0 < t.t2


@pytest.mark.parametrize("kw", [dict(min_p=0), dict(min_p_prime=-0.1), dict(min_p=1.5), dict(i_ht=-1),
                                dict(card_t=0), dict(m_count=0.5)])
def test_bound_domain_errors(kw):
    base = dict(i_ht=0.1, i_hptp=0.1, card_t=2, min_p=0.5, min_p_prime=0.5, m_count=1)
    base.update(kw)
    with pytest.raises(DomainError):
        an.theorem1_rhs(an.BoundInputs(**base))


def test_bound_monotone_in_m_count():
    vals = [an.theorem1_rhs(an.BoundInputs(0.1, 0.1, 4, 0.5, 0.5, m)) for m in (1, 2, 5, 50)]
    assert vals == sorted(vals)


def test_bound_turns_over_in_information():
    # the negative first coefficient makes the bound rise then fall in I; the turning point is
    # I* = T / (2 ln B2)^4
    card, min_p = 4, 0.5
    b2 = 4 * math.sqrt(2 * math.log(2)) / min_p
    i_star = card / (2 * math.log(b2)) ** 4
    f = lambda i: an.theorem1_rhs(an.BoundInputs(i, 0.0, card, min_p, 1.0, 1))
    below = np.linspace(0, i_star, 20)
    above = np.linspace(i_star, 20 * i_star, 20)
    assert np.all(np.diff([f(i) for i in below]) > 0)
    assert np.all(np.diff([f(i) for i in above]) < 0)


# ---------------------------------------------------------------- metrics

def test_psnr_examples():
    checker = (np.indices((8, 8)).sum(axis=0) % 2).astype(float)
    assert an.psnr(np.full((8, 8), 0.5), checker) == pytest.approx(10 * math.log10(4))
    assert an.psnr(checker, checker) == math.inf
    assert an.psnr_capped(an.psnr(checker, checker)) == 99.0
    assert an.attack_metrics("cafe", 0.9, recon=checker, target=checker).attack_metric == 99.0


def test_psnr_symmetric_and_decreasing():
    rng = np.random.default_rng(3)
    a = rng.random((4, 4))
    b = rng.random((4, 4))
    assert an.psnr(a, b) == an.psnr(b, a)
    vals = [an.psnr(a, a + s) for s in (0.01, 0.05, 0.2)]
    assert vals == sorted(vals, reverse=True)
    with pytest.raises(DomainError):
        an.psnr(a, b[:2])


def test_backdoor_accuracy_null_without_non_target():
    assert an.backdoor_accuracy([1, 1], [1, 1], 1) is None
    assert an.backdoor_accuracy([1, 0, 1], [0, 0, 1], 1) == 0.5
    assert an.attack_metrics("backdoor", 0.9, pred=[2], truth=[2], target=2).attack_metric is None


def test_multiset_accuracy():
    assert an.multiset_accuracy([2, 1, 0], [0, 0, 1], 3) == 1.0
    assert an.multiset_accuracy([0, 0, 3], [0, 1, 2], 3) == pytest.approx(1 / 3)


def test_attack_metrics_variants():
    assert an.attack_metrics("dli", 0.8, pred=[0, 1], truth=[0, 0]).attack_metric == 0.5
    assert an.attack_metrics("missing", 0.8, clean_acc=0.9, attacked_acc=0.6).attack_metric == pytest.approx(0.3)
    assert an.attack_metrics("none", 0.8).attack_metric is None
    with pytest.raises(DomainError):
        an.attack_metrics("bogus", 0.8)


def test_spearman_examples():
    assert an.spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert an.spearman([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8)
