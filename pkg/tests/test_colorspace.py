import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from labsplat import colorspace as cs

import oracles

# L of the (0.5, 0.5, 0.5) gray, frozen from the scalar oracle run.
GRAY_HALF_L = 53.38896474111432


def test_white_maps_to_reference_white():
    lab = cs.rgb_to_lab(np.ones((3, 4, 4)))
    np.testing.assert_allclose(lab[0], 100.0, atol=1e-9)
    assert np.abs(lab[1]).max() < 1e-6
    assert np.abs(lab[2]).max() < 1e-6


def test_black_maps_to_origin():
    lab = cs.rgb_to_lab(np.zeros((3, 4, 4)))
    np.testing.assert_allclose(lab, 0.0, atol=1e-12)


def test_mid_gray_luminance_matches_oracle():
    lab = cs.rgb_to_lab(np.full((3, 2, 3), 0.5))
    np.testing.assert_allclose(lab[0], GRAY_HALF_L, rtol=1e-12)
    np.testing.assert_allclose(lab[1], 0.0, atol=1e-12)
    np.testing.assert_allclose(lab[2], 0.0, atol=1e-12)


def test_matches_scalar_oracle_on_random_image():
    rng = np.random.default_rng(7)
    img = rng.random((3, 5, 4))
    np.testing.assert_allclose(cs.rgb_to_lab(img), oracles.rgb_image_to_lab(img), atol=1e-10)


def test_round_trip_10k_random_triples():
    rng = np.random.default_rng(123)
    img = rng.random((3, 100, 100))
    back = cs.lab_to_rgb(cs.rgb_to_lab(img))
    assert np.abs(back - img).max() < 1e-3


def test_lab_to_rgb_white_and_black():
    white = cs.lab_to_rgb(np.concatenate([np.full((1, 2, 2), 100.0), np.zeros((2, 2, 2))]))
    np.testing.assert_allclose(white, 1.0, atol=1e-3)
    black = cs.lab_to_rgb(np.zeros((3, 2, 2)))
    np.testing.assert_allclose(black, 0.0, atol=1e-9)


@given(st.floats(min_value=0.0, max_value=1.0))
@settings(max_examples=50, deadline=None)
def test_gray_pixels_have_zero_chroma(v):
    lab = cs.rgb_to_lab(np.full((3, 1, 1), v))
    assert abs(lab[1, 0, 0]) < 1e-4
    assert abs(lab[2, 0, 0]) < 1e-4


def test_rejects_non_finite_with_coordinate():
    img = np.zeros((3, 4, 5))
    img[1, 2, 3] = np.nan
    with pytest.raises(ValueError, match=r"\(1, 2, 3\)"):
        cs.rgb_to_lab(img)


def test_normalize_boundaries():
    lab = np.zeros((3, 1, 3))
    lab[0, 0, 0] = 100.0
    lab[1, 0, 0] = -128.0
    lab[1, 0, 1] = 127.0
    lab[1, 0, 2] = 0.0
    norm = cs.normalize_lab(lab)
    assert norm[0, 0, 0] == 1.0
    assert norm[1, 0, 0] == 0.0
    assert norm[1, 0, 1] == 1.0
    np.testing.assert_allclose(norm[1, 0, 2], 128.0 / 255.0)


def test_denormalize_examples():
    norm = np.full((3, 1, 1), 0.5)
    norm[0] = 1.0
    lab = cs.denormalize_lab(norm)
    assert lab[0, 0, 0] == 100.0
    np.testing.assert_allclose(lab[1, 0, 0], -0.5)


@given(st.integers(min_value=0, max_value=2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_normalize_round_trip(seed):
    rng = np.random.default_rng(seed)
    lab = np.stack(
        [
            rng.uniform(0, 100, (6, 7)),
            rng.uniform(-128, 127, (6, 7)),
            rng.uniform(-128, 127, (6, 7)),
        ]
    )
    back = cs.denormalize_lab(cs.normalize_lab(lab))
    assert np.abs(back - lab).max() < 1e-9


def test_plane_accessors():
    rng = np.random.default_rng(3)
    norm = rng.random((3, 4, 5))
    np.testing.assert_array_equal(cs.luminance_plane(norm), norm[0])
    np.testing.assert_array_equal(cs.chroma_planes(norm), norm[1:3])


def test_laplacian_annihilates_constants():
    np.testing.assert_allclose(cs.laplacian(np.full((5, 6), 3.7)), 0.0, atol=1e-12)


def test_laplacian_zero_on_ramp_interior():
    x = np.tile(np.arange(7, dtype=np.float64), (5, 1))
    out = cs.laplacian(x)
    np.testing.assert_allclose(out[1:-1, 1:-1], 0.0, atol=1e-12)


def test_laplacian_impulse_reproduces_kernel():
    plane = np.zeros((5, 5))
    plane[2, 2] = 1.0
    out = cs.laplacian(plane)
    expected = np.zeros((5, 5))
    expected[2, 2] = -4.0
    expected[1, 2] = expected[3, 2] = expected[2, 1] = expected[2, 3] = 1.0
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_laplacian_matches_convolution_oracle():
    rng = np.random.default_rng(11)
    plane = rng.standard_normal((9, 12))
    np.testing.assert_allclose(cs.laplacian(plane), oracles.laplacian_reference(plane), atol=1e-12)


@given(st.integers(min_value=0, max_value=2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_laplacian_linearity(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((6, 6))
    y = rng.standard_normal((6, 6))
    alpha, beta = rng.standard_normal(2)
    lhs = cs.laplacian(alpha * x + beta * y)
    rhs = alpha * cs.laplacian(x) + beta * cs.laplacian(y)
    assert np.abs(lhs - rhs).max() < 1e-9


def test_laplacian_rejects_small_planes():
    with pytest.raises(ValueError):
        cs.laplacian(np.zeros((2, 5)))
    with pytest.raises(ValueError):
        cs.laplacian(np.zeros((5, 2)))
