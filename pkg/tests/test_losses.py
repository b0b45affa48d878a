import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from labsplat import autodiff as ad
from labsplat import colorspace
from labsplat.losses import LossWeights, dssim, edge_loss, loss_ab, loss_l

import oracles


def fd_check(f, arrays, tol=1e-4):
    leaves = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    ad.backward(f(*leaves))
    for i, arr in enumerate(arrays):
        def scalar(x, i=i):
            args = [ad.Tensor(a) for a in arrays]
            args[i] = ad.Tensor(x)
            return float(f(*args).data)

        numeric = oracles.finite_difference_grad(scalar, arr.copy())
        err = oracles.relative_grad_error(leaves[i].grad, numeric)
        assert err < tol, f"input {i}: rel err {err}"


def plane_pair(seed, shape, lo=0.1, hi=0.9):
    rng = np.random.default_rng(seed)
    return rng.uniform(lo, hi, shape), rng.uniform(lo, hi, shape)


# ---------------------------------------------------------------------------
# LossWeights validation
# ---------------------------------------------------------------------------

def test_weights_defaults():
    w = LossWeights()
    assert w.beta == 0.2 and w.edge_eps == 1e-3 and w.edge_scale == 1.0


@pytest.mark.parametrize("kwargs", [
    {"beta": -0.1},
    {"beta": 1.1},
    {"edge_eps": 0.0},
    {"edge_eps": -1e-3},
    {"edge_scale": -1.0},
])
def test_weights_rejects_bad_values(kwargs):
    with pytest.raises(ValueError):
        LossWeights(**kwargs)


# ---------------------------------------------------------------------------
# dssim
# ---------------------------------------------------------------------------

def test_dssim_identical_is_exactly_zero():
    x, _ = plane_pair(0, (24, 24))
    assert float(dssim(x, x).data) == 0.0


def test_dssim_matches_reference():
    p, t = plane_pair(1, (32, 32))
    expected = (1.0 - oracles.ssim_reference(p, t)) / 2.0
    assert abs(float(dssim(p, t).data) - expected) < 1e-6


def test_dssim_multiplane_averages_reference():
    p, t = plane_pair(2, (3, 24, 24))
    per_plane = [oracles.ssim_reference(p[c], t[c]) for c in range(3)]
    expected = (1.0 - float(np.mean(per_plane))) / 2.0
    assert abs(float(dssim(p, t).data) - expected) < 1e-6


def test_dssim_symmetric():
    p, t = plane_pair(3, (20, 20))
    assert abs(float(dssim(p, t).data) - float(dssim(t, p).data)) <= 1e-9


def test_dssim_negative_image_strictly_positive():
    rng = np.random.default_rng(4)
    x = rng.uniform(0.0, 1.0, (24, 24))
    val = float(dssim(x, 1.0 - x).data)
    assert 0.0 < val <= 1.0


def test_dssim_rejects_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        dssim(np.zeros((16, 16)), np.zeros((16, 17)))


def test_dssim_rejects_out_of_range():
    x = np.full((16, 16), 0.5)
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        dssim(x + 1.0, x)


def test_dssim_rejects_undersized_plane():
    with pytest.raises(ValueError, match="at least 11x11"):
        dssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_dssim_gradcheck():
    p, t = plane_pair(5, (14, 14), lo=0.2, hi=0.8)
    fd_check(dssim, [p, t])


# ---------------------------------------------------------------------------
# edge loss
# ---------------------------------------------------------------------------

def test_edge_loss_floor_is_exact():
    x, _ = plane_pair(6, (16, 24))
    assert float(edge_loss(x, x, 1e-3).data) == 16 * 24 * 1e-3


def test_edge_loss_floor_exact_for_other_eps():
    x, _ = plane_pair(7, (9, 9))
    for eps in (1e-3, 2.5e-4, 0.125):
        assert float(edge_loss(x, x, eps).data) == 9 * 9 * eps


def test_edge_loss_two_different_constants_hits_floor():
    a = np.full((12, 12), 0.2)
    b = np.full((12, 12), 0.7)
    assert float(edge_loss(a, b, 1e-3).data) == 12 * 12 * 1e-3


def test_edge_loss_matches_direct_formula():
    p, t = plane_pair(8, (17, 13))
    eps = 1e-3
    diff = colorspace.laplacian(p) - colorspace.laplacian(t)
    expected = math.fsum(np.sqrt(diff * diff + eps * eps).ravel())
    assert abs(float(edge_loss(p, t, eps).data) - expected) < 1e-9


def test_edge_loss_multiplane_floor():
    x = np.random.default_rng(9).uniform(0.0, 1.0, (3, 10, 10))
    got = float(edge_loss(x, x, 1e-3).data)
    assert abs(got - 10 * 10 * 1e-3) < 1e-12


def test_edge_loss_rejects_bad_inputs():
    with pytest.raises(ValueError, match="shape mismatch"):
        edge_loss(np.zeros((8, 8)), np.zeros((9, 8)), 1e-3)
    with pytest.raises(ValueError, match="at least 3x3"):
        edge_loss(np.zeros((2, 8)), np.zeros((2, 8)), 1e-3)
    with pytest.raises(ValueError, match="eps"):
        edge_loss(np.zeros((8, 8)), np.zeros((8, 8)), 0.0)


def test_edge_loss_gradcheck():
    # eps well above the FD step keeps the Charbonnier curvature resolvable
    p, t = plane_pair(10, (8, 8))
    fd_check(lambda a, b: edge_loss(a, b, 0.05), [p, t])


@settings(deadline=None, max_examples=25)
@given(st.integers(0, 2**32 - 1), st.integers(3, 12), st.integers(3, 12))
def test_edge_loss_never_below_floor(seed, h, w):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.0, 1.0, (h, w))
    t = rng.uniform(0.0, 1.0, (h, w))
    assert float(edge_loss(p, t, 1e-3).data) >= h * w * 1e-3


# ---------------------------------------------------------------------------
# channel objectives
# ---------------------------------------------------------------------------

def test_loss_l_identical_hits_exact_floor():
    x, _ = plane_pair(11, (16, 16))
    assert float(loss_l(x, x).data) == 16 * 16 * 1e-3


def test_loss_l_three_plane_floor():
    x = np.random.default_rng(12).uniform(0.0, 1.0, (3, 16, 16))
    assert abs(float(loss_l(x, x).data) - 16 * 16 * 1e-3) < 1e-12


def test_loss_l_beta_zero_drops_dssim():
    p, t = plane_pair(13, (16, 16))
    w = LossWeights(beta=0.0)
    l1 = float(ad.l1_loss(ad.Tensor(p), ad.Tensor(t)).data)
    edge = float(edge_loss(p, t, w.edge_eps).data)
    assert abs(float(loss_l(p, t, w).data) - (l1 + edge)) < 1e-12


def test_loss_l_matches_hand_combination():
    p, t = plane_pair(14, (20, 20))
    w = LossWeights()
    l1 = float(ad.l1_loss(ad.Tensor(p), ad.Tensor(t)).data)
    ds = float(dssim(p, t).data)
    edge = float(edge_loss(p, t, w.edge_eps).data)
    expected = 0.8 * l1 + 0.2 * ds + edge
    assert abs(float(loss_l(p, t, w).data) - expected) < 1e-9


def test_loss_l_gradcheck():
    p, t = plane_pair(15, (12, 12), lo=0.2, hi=0.8)
    w = LossWeights(edge_eps=0.05)
    fd_check(lambda a, b: loss_l(a, b, w), [p, t])


def test_loss_ab_identical_is_exactly_zero():
    x = np.random.default_rng(16).uniform(0.1, 0.9, (2, 16, 16))
    assert float(loss_ab(x, x).data) == 0.0


def test_loss_ab_constant_offset_matches_components():
    t = np.full((2, 16, 16), 0.4)
    p = t + 0.1
    ds = float(dssim(p, t).data)
    expected = 0.8 * 0.1 + 0.2 * ds
    assert abs(float(loss_ab(p, t).data) - expected) < 1e-9


def test_loss_ab_requires_two_planes():
    x = np.zeros((3, 16, 16))
    with pytest.raises(ValueError, match="2 chroma planes"):
        loss_ab(x, x)


def test_loss_ab_gradcheck():
    rng = np.random.default_rng(17)
    p = rng.uniform(0.2, 0.8, (2, 12, 12))
    t = rng.uniform(0.2, 0.8, (2, 12, 12))
    fd_check(lambda a, b: loss_ab(a, b), [p, t])


def test_losses_backprop_reaches_prediction():
    p, t = plane_pair(18, (16, 16))
    leaf = ad.Tensor(p, requires_grad=True)
    ad.backward(loss_l(leaf, ad.Tensor(t)))
    assert leaf.grad is not None and np.any(leaf.grad != 0.0)
