import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from textleak.metrics import lcs_length, mcc, rouge, rouge_l, rouge_n, strip

rows = st.lists(st.integers(4, 9), min_size=1, max_size=8)


def test_reordered_sentence():
    # "the cat sat" recovered as "sat the cat"
    rep = rouge([[2, 5, 6, 7, 3]], [[2, 7, 5, 6, 3]])
    assert rep.r1 == pytest.approx(1.0, abs=1e-9)
    assert rep.r2 == pytest.approx(0.5, abs=1e-9)
    assert rep.rl == pytest.approx(2 / 3, abs=1e-9)


def test_special_tokens_are_ignored():
    assert strip([2, 5, 0, 3, 6], (0, 2, 3)) == [5, 6]
    assert rouge([[2, 5, 6, 3, 0]], [[2, 5, 6, 3, 0]]).r2 == 1.0


def test_partial_overlap():
    # ref 4 tokens, hyp 2 tokens, 2 shared: p=1, r=1/2, F=2/3
    assert rouge_n([5, 6, 7, 8], [5, 6], 1) == pytest.approx(2 / 3)
    assert rouge_n([5, 6], [7, 8], 1) == 0.0
    assert rouge_n([5], [5], 2) == 0.0


def test_lcs():
    assert lcs_length([1, 2, 3, 4], [2, 4, 1, 3]) == 2
    assert lcs_length([], [1]) == 0


def test_batch_max_matching():
    ref = [[2, 5, 6, 3], [2, 7, 8, 3]]
    hyp = [[2, 7, 8, 3], [2, 5, 6, 3]]
    rep = rouge(ref, hyp)
    assert rep.r1 == rep.r2 == rep.rl == 1.0
    assert rep.assignments == [(0, 1), (1, 0)]


def test_empty_reference_row_scores_zero():
    rep = rouge([[2, 3, 0], [2, 5, 3]], [[2, 5, 3], [2, 5, 3]])
    assert rep.empty_references == [0]
    assert rep.r1 == 0.5


@settings(max_examples=100)
@given(rows, rows)
def test_scores_bounded_and_symmetric(a, b):
    for n in (1, 2):
        s = rouge_n(a, b, n)
        assert 0.0 <= s <= 1.0 and math.isclose(s, rouge_n(b, a, n))
    assert 0.0 <= rouge_l(a, b) <= 1.0
    assert rouge_n(a, a, 1) == 1.0 and rouge_l(a, a) == 1.0


@settings(max_examples=100)
@given(rows)
def test_permutation_keeps_unigrams(a):
    b = list(reversed(a))
    assert rouge_n(a, b, 1) == 1.0


def test_mcc_values():
    assert mcc([1, 0, 1, 0], [1, 0, 1, 0]) == 1.0
    assert mcc([0, 1, 0, 1], [1, 0, 1, 0]) == -1.0
    assert mcc([1, 1, 1], [1, 0, 1]) == 0.0
    # tp=2 tn=1 fp=1 fn=0: (2-0)/sqrt(3*2*2*1)
    assert mcc([1, 1, 1, 0], [1, 1, 0, 0]) == pytest.approx(2 / math.sqrt(12))
    with pytest.raises(ValueError):
        mcc([1], [1, 0])


def test_mcc_matches_correlation():
    rng = np.random.default_rng(0)
    p, y = rng.integers(0, 2, 50), rng.integers(0, 2, 50)
    assert mcc(p, y) == pytest.approx(np.corrcoef(p, y)[0, 1])
