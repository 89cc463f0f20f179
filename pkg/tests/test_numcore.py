import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from crossmodal_cl.errors import DimensionMismatch, EmptySequence, ZeroNormVector
from crossmodal_cl.numcore import cosine_similarity, log_sum_exp, pairwise_cosine

# straight-line dot/norm arithmetic for [1,2,3].[4,5,6], computed with the math module
COS_123_456 = 0.9746318461970762

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_cosine_examples():
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([3, 4], [3, 4]) == pytest.approx(1.0, abs=1e-15)
    assert cosine_similarity([1, 2, 3], [4, 5, 6]) == pytest.approx(COS_123_456, abs=1e-15)


def test_cosine_errors():
    with pytest.raises(ZeroNormVector):
        cosine_similarity([0, 0], [1, 0])
    with pytest.raises(DimensionMismatch):
        cosine_similarity([1, 0], [1, 0, 0])


@given(arrays(np.float64, 5, elements=finite), arrays(np.float64, 5, elements=finite), st.floats(1e-3, 1e3))
def test_cosine_scale_invariant(a, b, s):
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    assert cosine_similarity(a, s * b) == pytest.approx(cosine_similarity(a, b), abs=1e-12)
    assert cosine_similarity(a, b) == cosine_similarity(b, a)


def test_pairwise_examples(rng):
    np.testing.assert_array_equal(pairwise_cosine([[1, 0], [0, 1]]), np.eye(2))
    x = rng.standard_normal((4, 3))
    x[3] = x[1]
    s = pairwise_cosine(x)
    assert s[1, 3] == pytest.approx(1.0, abs=1e-15)
    for i in range(4):
        for j in range(4):
            assert s[i, j] == pytest.approx(cosine_similarity(x[i], x[j]), abs=1e-14)


def test_pairwise_symmetry_and_diagonal(rng):
    s = pairwise_cosine(rng.standard_normal((30, 7)))
    assert np.max(np.abs(s - s.T)) <= 1e-12
    np.testing.assert_allclose(np.diag(s), 1.0, atol=1e-12)


def test_pairwise_zero_row_reports_index():
    with pytest.raises(ZeroNormVector) as exc:
        pairwise_cosine([[1, 0], [0, 0], [1, 1]])
    assert exc.value.index == 1


def test_log_sum_exp_examples():
    assert log_sum_exp([0, 0, 0, 0]) == pytest.approx(math.log(4), abs=1e-15)
    assert log_sum_exp([2.5]) == 2.5
    assert log_sum_exp([1000, 1000]) == pytest.approx(1000 + math.log(2), abs=1e-12)
    with pytest.raises(EmptySequence):
        log_sum_exp([])


@settings(max_examples=200)
@given(st.lists(finite, min_size=1, max_size=20))
def test_log_sum_exp_bounds(values):
    v = log_sum_exp(values)
    assert v >= max(values) - 1e-12
    assert v <= max(values) + math.log(len(values)) + 1e-12
