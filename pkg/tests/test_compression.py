import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedsfr.compression import (
    CompressedUpdate,
    compress,
    estimate_contraction,
    kept_count,
    make_compressor,
    qsgd_dequantize,
    qsgd_quantize,
    top_s_sparsify,
    uniform_scalar_dequantize,
    uniform_scalar_quantize,
    update_error_memory,
)
from fedsfr.model import LayerMap, LayerSpan, layer_map


def one_layer(n):
    return LayerMap((LayerSpan("w", 0, n, (n,)),))


def test_top_s_examples():
    assert top_s_sparsify(np.array([3.0, -1.0, 2.0]), one_layer(3), 1 / 3).tolist() == [0]
    assert top_s_sparsify(np.array([3.0, -1.0, 2.0]), one_layer(3), 1.0).tolist() == [0, 1, 2]
    assert top_s_sparsify(np.array([2.0, -2.0]), one_layer(2), 0.5).tolist() == [0]


def test_kept_count_rounding():
    assert kept_count(0.1, 30) == 3
    assert kept_count(0.2, 32) == 7
    assert kept_count(1e-9, 5) == 1
    with pytest.raises(ValueError):
        kept_count(0.0, 5)


def test_qsgd_on_grid_is_exact(rng):
    levels, scale = qsgd_quantize(np.array([1.0, 0.0]), 4, rng)
    assert qsgd_dequantize(levels, scale, 4).tolist() == [1.0, 0.0]


def test_qsgd_zero_vector(rng):
    levels, scale = qsgd_quantize(np.zeros(4), 4, rng)
    assert scale == 0.0 and not qsgd_dequantize(levels, scale, 4).any()


def test_qsgd_scalar_unbiased():
    rng = np.random.default_rng(17)
    draws = np.array([qsgd_dequantize(*qsgd_quantize(np.array([0.5]), 4, rng), 4)[0] for _ in range(100_000)])
    # a lone scalar normalizes to 1, which is on the grid
    assert np.all(draws == 0.5)


def test_qsgd_vector_unbiased():
    v = np.array([0.5, -0.2, 0.05])
    rng = np.random.default_rng(18)
    draws = np.array([qsgd_dequantize(*qsgd_quantize(v, 4, rng), 4) for _ in range(100_000)])
    se = draws.std(axis=0, ddof=1) / math.sqrt(len(draws))
    assert np.all(se > 0)
    assert np.all(np.abs(draws.mean(axis=0) - v) <= 3 * se)


def test_compress_near_lossless(rng, desk_cfg):
    lm = layer_map(desk_cfg)
    g = rng.normal(size=lm.D)
    gb = compress(g, lm, 1.0, 52, rng).dense(lm)
    assert np.max(np.abs(gb - g) / np.abs(g)) <= 1e-9


def test_compress_zero(rng, desk_cfg):
    lm = layer_map(desk_cfg)
    assert not compress(np.zeros(lm.D), lm, 0.2, 4, rng).dense(lm).any()


def test_compress_counts_and_order(rng, desk_cfg):
    lm = layer_map(desk_cfg)
    cu = compress(rng.normal(size=lm.D), lm, 0.2, 4, rng)
    assert cu.total_kept == sum(math.ceil(0.2 * s.length) for s in lm)
    for lu in cu.layers:
        assert np.all(np.diff(lu.indices) > 0)


def test_wire_roundtrip(rng, desk_cfg):
    lm = layer_map(desk_cfg)
    cu = compress(rng.normal(size=lm.D), lm, 0.1, 4, rng)
    back = CompressedUpdate.from_bytes(cu.to_bytes(), 4)
    assert np.array_equal(back.dense(lm), cu.dense(lm))
    with pytest.raises(ValueError):
        CompressedUpdate.from_bytes(cu.to_bytes()[:-40], 4)


def test_error_memory_examples():
    g = np.array([3.0, -1.0, 2.0])
    assert update_error_memory(np.zeros(3), g, np.array([3.0, 0.0, 0.0])).tolist() == [0.0, -1.0, 2.0]
    assert not update_error_memory(np.zeros(3), g, g).any()


def test_error_memory_recursion_bitwise(rng, desk_cfg):
    # m_{t+1} = m_t + eta*sum(grads) - g_bar_t, exactly as computed by the client
    lm = layer_map(desk_cfg)
    m = np.zeros(lm.D)
    for _ in range(5):
        step = 0.1 * rng.normal(size=lm.D)
        g = m + step
        gb = compress(g, lm, 0.2, 4, rng).dense(lm)
        new = update_error_memory(m, g, gb)
        assert np.array_equal(new, g - gb)
        assert np.array_equal(new, (m + step) - gb)
        m = new


def test_usq_examples():
    levels, lo, hi = uniform_scalar_quantize(np.array([0.0, 0.5, 1.0]), 4)
    assert levels[1] == 8
    assert uniform_scalar_dequantize(levels, lo, hi, 4)[1] == pytest.approx(8 / 15)
    const = np.full((3, 2), 0.37)
    assert np.array_equal(uniform_scalar_dequantize(*uniform_scalar_quantize(const, 4), 4), const)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 2), elements=st.floats(-5, 5)), st.integers(1, 8))
def test_usq_error_within_step(Y, bits):
    levels, lo, hi = uniform_scalar_quantize(Y, bits)
    rec = uniform_scalar_dequantize(levels, lo, hi, bits)
    step = (hi - lo) / (2**bits - 1)
    assert np.max(np.abs(rec - Y)) <= step / 2 + 1e-12
    assert levels.min() >= 0 and levels.max() <= 2**bits - 1


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 40, elements=st.floats(-10, 10)), st.sampled_from([0.05, 0.1, 0.25, 0.5, 1.0]))
def test_per_layer_counts_property(v, frac):
    lm = LayerMap((LayerSpan("a", 0, 13, (13,)), LayerSpan("b", 13, 27, (27,))))
    idx = top_s_sparsify(v, lm, frac)
    assert len(idx) == math.ceil(round(frac * 13, 9)) + math.ceil(round(frac * 27, 9))
    assert len(np.unique(idx)) == len(idx)


def test_identity_compressor_contraction(rng):
    assert estimate_contraction(lambda x, r: x, 50, 20, rng) == 1.0


def test_top_s_contraction_lower_bound(desk_cfg):
    lm = layer_map(desk_cfg)
    S = sum(kept_count(0.2, s.length) for s in lm)
    nu = estimate_contraction(make_compressor(lm, 0.2, None), lm.D, 500, np.random.default_rng(0))
    assert S / lm.D <= nu <= 1.0


@pytest.mark.parametrize("frac,bits", [(0.2, 4), (0.1, 4), (0.2, None), (0.01, None)])
def test_configured_compressors_contract(desk_cfg, frac, bits):
    lm = layer_map(desk_cfg)
    nu = estimate_contraction(make_compressor(lm, frac, bits), lm.D, 200, np.random.default_rng(1))
    assert 0.0 < nu <= 1.0
