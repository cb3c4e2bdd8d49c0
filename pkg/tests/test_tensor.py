import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pilunet.tensor import Shape4, elementwise_map, ravel_offset, reduce_mean_spatial


def test_map_identity():
    np.testing.assert_array_equal(elementwise_map(np.array([1.0, 2.0, 3.0]), lambda v: v), [1, 2, 3])


def test_map_relu():
    np.testing.assert_array_equal(
        elementwise_map(np.array([-1.0, 0.0, 2.0]), lambda v: max(0.0, v)), [0, 0, 2]
    )


def test_map_doubling():
    np.testing.assert_array_equal(elementwise_map(np.array([0.5, -0.5]), lambda v: 2 * v), [1.0, -1.0])


def test_map_preserves_shape_and_dtype():
    x = np.arange(12, dtype=np.float32).reshape(3, 4)
    y = elementwise_map(x, lambda v: v + 1)
    assert y.shape == x.shape and y.dtype == x.dtype


def test_mean_spatial_hand_case():
    t = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 2, 2, 1)
    np.testing.assert_array_equal(reduce_mean_spatial(t), [[2.5]])


def test_mean_spatial_constant():
    t = np.full((2, 5, 3, 4), 7.25)
    np.testing.assert_array_equal(reduce_mean_spatial(t), np.full((2, 4), 7.25))


def test_mean_spatial_zeros():
    np.testing.assert_array_equal(reduce_mean_spatial(np.zeros((1, 7, 7, 64))), np.zeros((1, 64)))


def test_mean_spatial_rejects_other_ranks():
    with pytest.raises(ValueError):
        reduce_mean_spatial(np.zeros((3, 3)))


@given(st.data())
def test_mean_spatial_matches_sum_over_count(data):
    n = data.draw(st.integers(1, 3))
    h = data.draw(st.integers(1, 5))
    w = data.draw(st.integers(1, 5))
    c = data.draw(st.integers(1, 4))
    seed = data.draw(st.integers(0, 2**16))
    t = np.random.default_rng(seed).normal(size=(n, h, w, c))
    expected = t.sum(axis=(1, 2)) / (h * w)
    np.testing.assert_allclose(reduce_mean_spatial(t), expected, rtol=1e-12)


@given(st.data())
def test_row_major_offset_round_trip(data):
    shape = tuple(data.draw(st.integers(1, 5)) for _ in range(data.draw(st.integers(1, 4))))
    coords = tuple(data.draw(st.integers(0, d - 1)) for d in shape)
    t = np.arange(np.prod(shape), dtype=np.float64).reshape(shape)
    assert t.ravel()[ravel_offset(shape, coords)] == t[coords]


def test_ravel_offset_bounds_checked():
    with pytest.raises(IndexError):
        ravel_offset((2, 3), (1, 3))


def test_shape4_requires_positive_dims():
    with pytest.raises(ValueError):
        Shape4(1, 0, 32, 3)
    assert Shape4(2, 32, 32, 3).as_tuple() == (2, 32, 32, 3)
