import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from agelock.errors import InvalidCodeError
from agelock.quantize import (
    BitPlanes, InputPlanes, decompose, input_planes_from_values, max_code, nearest_odd,
    quantize_inputs, quantize_weights, reconstruct, round_half_up,
)


@pytest.mark.parametrize("q", range(1, 9))
def test_decompose_reconstruct_exhaustive(q):
    codes = np.arange(-max_code(q), max_code(q) + 1, 2)
    bits = decompose(codes, q)
    assert bits.shape == (q, len(codes))
    assert set(np.unique(bits)) <= {-1, 1}
    np.testing.assert_array_equal(reconstruct(bits, q), codes)


def test_decompose_known_values():
    # +1 with q=2: unsigned (1 + 3) / 2 = 2, digits (0, 1)
    np.testing.assert_array_equal(decompose(-3, 2), [-1, -1])
    np.testing.assert_array_equal(decompose(1, 2), [-1, 1])
    np.testing.assert_array_equal(decompose(3, 2), [1, 1])
    assert reconstruct(decompose(5, 3), 3) == 5


@pytest.mark.parametrize("code,q", [(2, 3), (0, 1), (9, 3), (-9, 3)])
def test_decompose_rejects_bad_codes(code, q):
    with pytest.raises(InvalidCodeError):
        decompose(code, q)


def test_decompose_rejects_fractional():
    with pytest.raises(InvalidCodeError):
        decompose(np.array([1.5]), 2)


@given(st.integers(1, 8), st.data())
def test_roundtrip_property(q, data):
    shape = data.draw(st.tuples(st.integers(1, 4), st.integers(1, 4)))
    k = data.draw(st.lists(st.integers(0, max_code(q)), min_size=shape[0] * shape[1],
                           max_size=shape[0] * shape[1]))
    codes = (2 * np.array(k) - max_code(q)).reshape(shape)
    planes = decompose(codes, q)
    assert planes.shape == (q,) + shape
    np.testing.assert_array_equal(reconstruct(planes), codes)


def test_round_half_up_ties():
    np.testing.assert_array_equal(round_half_up([0.5, 1.5, -0.5, -1.5, 2.4]), [1, 2, 0, -1, 2])


@given(st.floats(-300, 300, allow_nan=False), st.integers(1, 8))
def test_nearest_odd_is_odd_and_close(x, q):
    c = int(nearest_odd(x, q))
    top = max_code(q)
    assert c % 2 == 1 and -top <= c <= top
    if -top <= x <= top:
        assert abs(c - x) <= 1.0


def test_quantize_weights_scale_and_zero():
    bp = quantize_weights(np.array([[0.5, -1.0], [0.25, 0.0]]), 3)
    assert bp.scale == pytest.approx(1.0 / 7)
    assert bp.codes()[0, 1] == -7
    assert np.max(np.abs(bp.weights() - [[0.5, -1.0], [0.25, 0.0]])) <= bp.scale
    zero = quantize_weights(np.zeros((2, 2)), 1)
    assert zero.scale == 1.0
    np.testing.assert_array_equal(zero.codes(), np.ones((2, 2)))


def test_bitplanes_validation():
    with pytest.raises(InvalidCodeError):
        BitPlanes(np.zeros((1, 2, 2)))
    with pytest.raises(InvalidCodeError):
        BitPlanes(np.ones((2, 2)))


def test_input_planes_roundtrip():
    values = np.arange(256).reshape(16, 16)
    planes = input_planes_from_values(values, 8)
    assert planes.n == 8
    np.testing.assert_array_equal(planes.values(), values)
    with pytest.raises(InvalidCodeError):
        input_planes_from_values([256], 8)
    with pytest.raises(InvalidCodeError):
        InputPlanes(np.full((2, 3), 2))


def test_quantize_inputs_clamps_and_counts():
    planes = quantize_inputs(np.array([-0.2, 0.0, 0.5, 1.0, 1.3]), 8)
    np.testing.assert_array_equal(planes.values(), [0, 0, 128, 255, 255])
    assert planes.saturated == 2


@settings(max_examples=50)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=20), st.integers(1, 8))
def test_input_quantization_error_bound(a, n):
    a = np.array(a)
    v = quantize_inputs(a, n).values()
    assert np.all(np.abs(v / max_code(n) - a) <= 0.5 / max_code(n) + 1e-12)
