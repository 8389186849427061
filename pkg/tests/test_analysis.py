import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedsfr.analysis import assumption1_ratio, fr_surrogate_diag, improvement_ratio, lemma3_bound


def test_alignment_ratio_examples():
    a = np.array([1.0, 2.0, -0.5])
    assert assumption1_ratio(a, a) == 0.0
    assert assumption1_ratio(a, np.zeros(3)) == 1.0
    assert assumption1_ratio(a, -a) == 2.0
    with pytest.raises(ValueError):
        assumption1_ratio(np.zeros(2), np.zeros(2))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-1e3, 1e3)), arrays(np.float64, 6, elements=st.floats(-1e3, 1e3)))
def test_alignment_ratio_range(a, b):
    if not (a @ a + b @ b) > 0:
        return
    assert 0.0 <= assumption1_ratio(a, b) <= 2.0


def test_error_memory_bound_examples():
    assert lemma3_bound(1.0, 0.01, 3, 10) == 0.0
    # 4 * 0.5 / 0.25 * 1e-4 * 9 * 100
    assert lemma3_bound(0.5, 0.01, 3, 10) == pytest.approx(0.72)


def test_error_memory_bound_monotone_in_nu():
    nus = np.linspace(0.01, 1.0, 200)
    vals = [lemma3_bound(n, 0.05, 5, 2.0) for n in nus]
    assert np.all(np.diff(vals) < 0)
    with pytest.raises(ValueError):
        lemma3_bound(0.0, 1, 1, 1)


def test_surrogate_zero_perturbation_degenerate(desk_params):
    ratio, corr = fr_surrogate_diag(desk_params, np.random.default_rng(0).random((4, 1, 8, 8)), 0.0, 10,
                                    np.random.default_rng(1))
    assert np.isnan(ratio) and np.isnan(corr)


def test_surrogate_linear_gaussian_encoder():
    N, d, pixels = 16, 2, 64
    rng = np.random.default_rng(5)
    W = rng.standard_normal((pixels, N * d))
    ratio, corr = fr_surrogate_diag(lambda X: X @ W, rng.random((32, pixels)), 0.01, 10_000, rng)
    assert abs(ratio - N * d) <= 0.1 * N * d
    assert corr > 0


def test_improvement_ratio_examples():
    assert improvement_ratio([(2, 1), (3, 2)]) == 1.0
    assert improvement_ratio([(1, 2), (1, 1)]) == 0.0
    assert improvement_ratio([(1, 0), (1, 2), (1, 0.5), (1, 1)]) == 0.5
    assert np.isnan(improvement_ratio([(None, None)]))
