import numpy as np
import pytest

from qalora.quant import (
    QuantizedMatrix,
    dequantize,
    quantize_groupwise,
    quantize_minmax,
    roundtrip_bound,
    rtn_requantize,
)


def test_minmax_exact_grid():
    codes, scale, zero = quantize_minmax([0.0, 1.0, 2.0, 3.0], 2)
    np.testing.assert_array_equal(codes, [0, 1, 2, 3])
    assert scale == 1.0 and zero == 0.0


def test_minmax_worked_example():
    codes, scale, zero = quantize_minmax([-1.0, 0.0, 2.0], 4)
    np.testing.assert_array_equal(codes, [0, 5, 15])
    assert scale == pytest.approx(0.2, abs=1e-15)
    assert zero == pytest.approx(5.0, abs=1e-12)
    np.testing.assert_allclose(scale * (codes - zero), [-1.0, 0.0, 2.0], atol=1e-15)


@pytest.mark.parametrize("c", [0.0, -3.25, 7.0, 1e-3])
def test_minmax_constant_vector(c):
    codes, scale, zero = quantize_minmax([c, c, c], 3)
    np.testing.assert_array_equal(codes, [0, 0, 0])
    assert scale == 1.0
    assert zero == -c
    np.testing.assert_array_equal(scale * (codes - zero), [c, c, c])


def test_minmax_ties_round_away_from_zero():
    # t = (v - min) / scale lands exactly on .5 for v = 0.5 with a unit step
    codes, scale, _ = quantize_minmax([0.0, 0.5, 1.5, 3.0], 2)
    assert scale == 1.0
    np.testing.assert_array_equal(codes, [0, 1, 2, 3])


def test_minmax_rejects_bad_input():
    with pytest.raises(ValueError):
        quantize_minmax([1.0, 2.0], 5)
    with pytest.raises(ValueError):
        quantize_minmax([], 4)
    with pytest.raises(ValueError):
        quantize_minmax([1.0, np.inf], 4)


def test_groupwise_single_group():
    q = quantize_groupwise(np.array([[0.0], [1.0], [2.0], [3.0]]), 2, 4)
    np.testing.assert_array_equal(q.codes[:, 0], [0, 1, 2, 3])
    np.testing.assert_array_equal(dequantize(q)[:, 0], [0.0, 1.0, 2.0, 3.0])


def test_groupwise_two_groups_example():
    w = np.array([[0.0], [1.0], [100.0], [103.0]])
    q = quantize_groupwise(w, 2, 2)
    assert q.num_groups == 2
    np.testing.assert_allclose(q.scales[:, 0], [1.0 / 3.0, 1.0], rtol=1e-15)
    np.testing.assert_allclose(q.zeros[:, 0], [0.0, -100.0], atol=1e-12)
    err = np.abs(w - dequantize(q))
    assert np.all(err <= roundtrip_bound(q) + 1e-12)


def test_groupwise_random_bound(rng):
    w = rng.normal(size=(64, 8))
    q = quantize_groupwise(w, 4, 32)
    alpha = np.repeat(q.scales, 32, axis=0)
    assert np.all(np.abs(w - dequantize(q)) <= alpha / 2 + 1e-12)


def test_groupwise_rejects_non_divisor():
    with pytest.raises(ValueError):
        quantize_groupwise(np.ones((10, 2)), 4, 4)


def test_quantized_matrix_invariants(rng):
    q = quantize_groupwise(rng.normal(size=(64, 5)), 3, 16)
    assert q.group_size * q.num_groups == q.d_in
    assert np.all(q.scales > 0)
    assert q.codes.min() >= 0 and q.codes.max() <= 7
    assert not q.codes.flags.writeable


def test_quantized_matrix_validation():
    packed = bytes(4)
    with pytest.raises(ValueError):
        QuantizedMatrix(8, 1, 4, 4, packed, np.zeros((2, 1)), np.zeros((2, 1)))
    with pytest.raises(ValueError):
        QuantizedMatrix(8, 1, 4, 3, packed, np.ones((2, 1)), np.zeros((2, 1)))
    with pytest.raises(ValueError):
        QuantizedMatrix(8, 1, 4, 4, bytes(3), np.ones((2, 1)), np.zeros((2, 1)))
    QuantizedMatrix(8, 1, 4, 4, packed, np.ones((2, 1)), np.zeros((2, 1)))


def test_dequantize_zero_codes_zero_zeros():
    q = QuantizedMatrix.from_codes(np.zeros((8, 3), dtype=int), np.full((2, 3), 0.7), np.zeros((2, 3)), 4, 4)
    np.testing.assert_array_equal(dequantize(q), np.zeros((8, 3)))


def test_dequantize_formula(rng):
    codes = rng.integers(0, 8, size=(12, 4))
    scales = rng.uniform(0.1, 1.0, size=(3, 4))
    zeros = rng.normal(size=(3, 4))
    q = QuantizedMatrix.from_codes(codes, scales, zeros, 3, 4)
    expected = np.empty((12, 4))
    for i in range(12):
        for j in range(4):
            expected[i, j] = scales[i // 4, j] * (codes[i, j] - zeros[i // 4, j])
    np.testing.assert_array_equal(dequantize(q), expected)


@pytest.mark.parametrize("bits", [2, 3, 4, 8])
def test_requantize_idempotent(rng, bits):
    for _ in range(20):
        w = rng.normal(size=(64, 6))
        first = quantize_groupwise(w, bits, 16)
        second = quantize_groupwise(dequantize(first), bits, 16)
        assert first.packed == second.packed
        # min/max of the de-quantized group are recomputed in floating point,
        # so the step and zero agree to a few ulps rather than bitwise
        np.testing.assert_allclose(second.scales, first.scales, rtol=1e-12)
        np.testing.assert_allclose(second.zeros, first.zeros, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("bits", [2, 3, 4, 8])
def test_finer_groups_never_hurt(rng, bits):
    for _ in range(20):
        w = rng.normal(size=(128, 8))
        fine = np.max(np.abs(w - dequantize(quantize_groupwise(w, bits, 32))))
        coarse = np.max(np.abs(w - dequantize(quantize_groupwise(w, bits, 128))))
        assert fine <= coarse


def test_full_column_group_matches_minmax(rng):
    w = rng.normal(size=(40, 5))
    q = quantize_groupwise(w, 3, 40)
    for j in range(5):
        codes, scale, zero = quantize_minmax(w[:, j], 3)
        np.testing.assert_array_equal(q.codes[:, j], codes)
        assert q.scales[0, j] == scale
        assert q.zeros[0, j] == zero


def test_rtn_matches_groupwise_bitwise(rng):
    w = rng.normal(size=(64, 8))
    a = rtn_requantize(w, 4, 32)
    b = quantize_groupwise(w, 4, 32)
    assert a.bitwise_equal(b)


def test_rtn_loses_non_group_constant_delta(rng):
    w = rng.normal(size=(64, 8))
    base = dequantize(quantize_groupwise(w, 4, 32))
    delta = rng.normal(0.0, 0.05, size=w.shape)
    merged = base + delta
    err = np.max(np.abs(merged - dequantize(rtn_requantize(merged, 4, 32))))
    assert err > 1e-6


@pytest.mark.parametrize("bits", [2, 3, 4])
def test_rtn_keeps_group_constant_delta(rng, bits):
    w = rng.normal(size=(64, 8))
    q = quantize_groupwise(w, bits, 32)
    base = dequantize(q)
    offsets = rng.normal(size=(2, 8))
    merged = base + np.repeat(offsets, 32, axis=0)
    again = rtn_requantize(merged, bits, 32)
    assert again.packed == q.packed
    np.testing.assert_allclose(dequantize(again), merged, rtol=0, atol=1e-12)
