"""Training objectives for luminance and chrominance planes.

Three building blocks, all differentiable through :mod:`labsplat.autodiff`:

* ``dssim``: structural dissimilarity ``(1 - mean SSIM) / 2`` with the
  standard 11x11 Gaussian window (sigma 1.5) and unit-range constants.
* ``edge_loss``: Charbonnier penalty on the difference of Laplacians,
  summed over pixels. On identical inputs it sits exactly at its floor of
  ``H * W * eps``.
* ``loss_l`` / ``loss_ab``: the channel objectives: a convex mix of L1 and
  D-SSIM weighted by ``beta``, with the edge term added for luminance only.

Inputs may be raw arrays or autodiff Tensors shaped ``(H, W)`` or
``(C, H, W)``. Multi-plane inputs are scored per plane and averaged, so the
edge floor stays ``H * W * eps`` regardless of plane count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = ["LossWeights", "dssim", "edge_loss", "loss_l", "loss_ab"]

_C1 = 0.01**2
_C2 = 0.03**2
_WINDOW_SIZE = 11
_WINDOW_SIGMA = 1.5

_LAPLACIAN_KERNEL = np.array(
    [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]], dtype=np.float64
)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


_SSIM_WINDOW = _gaussian_window(_WINDOW_SIZE, _WINDOW_SIGMA)


@dataclass
class LossWeights:
    """Mixing weights shared by ``loss_l`` and ``loss_ab``.

    ``beta`` blends L1 against D-SSIM; ``edge_eps`` is the Charbonnier
    epsilon of the edge term; ``edge_scale`` rescales the edge sum (1.0
    keeps the literal per-pixel sum).
    """

    beta: float = 0.2
    edge_eps: float = 1e-3
    edge_scale: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"LossWeights: beta must lie in [0, 1], got {self.beta}")
        if self.edge_eps <= 0.0:
            raise ValueError(f"LossWeights: edge_eps must be > 0, got {self.edge_eps}")
        if self.edge_scale < 0.0:
            raise ValueError(f"LossWeights: edge_scale must be >= 0, got {self.edge_scale}")


def _as_nchw(x, name: str) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if t.data.ndim == 2:
        h, w = t.data.shape
        return ad.reshape(t, (1, 1, h, w))
    if t.data.ndim == 3:
        c, h, w = t.data.shape
        return ad.reshape(t, (1, c, h, w))
    if t.data.ndim == 4 and t.data.shape[0] == 1:
        return t
    raise ValueError(f"{name}: expected (H, W) or (C, H, W) planes, got shape {t.data.shape}")


def _check_pair(pred: Tensor, target: Tensor, name: str) -> None:
    if pred.data.shape != target.data.shape:
        raise ValueError(
            f"{name}: shape mismatch, prediction {pred.data.shape} vs target {target.data.shape}"
        )


def dssim(pred, target) -> Tensor:
    """Structural dissimilarity (1 - mean SSIM) / 2 over [0, 1] planes.

    SSIM uses an 11x11 Gaussian window (sigma 1.5) in valid mode, so the
    planes must be at least 11x11. Multi-plane inputs are treated as
    independent channels and averaged together.
    """
    p = _as_nchw(pred, "dssim")
    t = _as_nchw(target, "dssim")
    _check_pair(p, t, "dssim")
    _, c, h, w = p.data.shape
    if h < _WINDOW_SIZE or w < _WINDOW_SIZE:
        raise ValueError(f"dssim: planes must be at least {_WINDOW_SIZE}x{_WINDOW_SIZE}, got {h}x{w}")
    for name, t_ in (("prediction", p), ("target", t)):
        lo, hi = float(t_.data.min()), float(t_.data.max())
        if lo < -1e-9 or hi > 1.0 + 1e-9:
            raise ValueError(f"dssim: {name} values must lie in [0, 1], got range [{lo}, {hi}]")

    win = Tensor(np.repeat(_SSIM_WINDOW[None, None], c, axis=0))
    mu1 = ad.depthwise_conv2d(p, win)
    mu2 = ad.depthwise_conv2d(t, win)
    s1 = ad.depthwise_conv2d(p * p, win) - mu1 * mu1
    s2 = ad.depthwise_conv2d(t * t, win) - mu2 * mu2
    s12 = ad.depthwise_conv2d(p * t, win) - mu1 * mu2
    num = (mu1 * mu2 * 2.0 + _C1) * (s12 * 2.0 + _C2)
    den = (mu1 * mu1 + mu2 * mu2 + _C1) * (s1 + s2 + _C2)
    ssim_mean = ad.tmean(num / den)
    return (1.0 - ssim_mean) * 0.5


def edge_loss(render_l, target_l, eps: float = 1e-3) -> Tensor:
    """Charbonnier distance between Laplacian responses, summed over pixels.

    The Laplacian matches :func:`labsplat.colorspace.laplacian` (4-neighbor
    stencil on a replicate-padded plane). Identical inputs give exactly
    ``H * W * eps``; multi-plane inputs average the per-plane sums.
    """
    if eps <= 0.0:
        raise ValueError(f"edge_loss: eps must be > 0, got {eps}")
    p = _as_nchw(render_l, "edge_loss")
    t = _as_nchw(target_l, "edge_loss")
    _check_pair(p, t, "edge_loss")
    _, c, h, w = p.data.shape
    if h < 3 or w < 3:
        raise ValueError(f"edge_loss: planes must be at least 3x3, got {h}x{w}")

    kern = Tensor(np.repeat(_LAPLACIAN_KERNEL[None, None], c, axis=0))
    lap_p = ad.depthwise_conv2d(ad.replicate_pad2d(p, 1), kern)
    lap_t = ad.depthwise_conv2d(ad.replicate_pad2d(t, 1), kern)
    diff = lap_p - lap_t
    charb = ad.sqrt(diff * diff + eps * eps)
    return ad.exact_sum(charb) / float(c)


def loss_l(render_l, target_l, weights: LossWeights | None = None) -> Tensor:
    """Luminance objective: (1 - beta) L1 + beta D-SSIM + edge term."""
    w = weights if weights is not None else LossWeights()
    p = _as_nchw(render_l, "loss_l")
    t = _as_nchw(target_l, "loss_l")
    _check_pair(p, t, "loss_l")
    l1 = ad.l1_loss(p, t)
    ds = dssim(p, t)
    edge = edge_loss(p, t, w.edge_eps)
    return l1 * (1.0 - w.beta) + ds * w.beta + edge * w.edge_scale


def loss_ab(render_ab, target_ab, weights: LossWeights | None = None) -> Tensor:
    """Chrominance objective: (1 - beta) L1 + beta D-SSIM, no edge term."""
    w = weights if weights is not None else LossWeights()
    p = _as_nchw(render_ab, "loss_ab")
    t = _as_nchw(target_ab, "loss_ab")
    _check_pair(p, t, "loss_ab")
    if p.data.shape[1] != 2:
        raise ValueError(f"loss_ab: expected 2 chroma planes, got {p.data.shape[1]}")
    l1 = ad.l1_loss(p, t)
    ds = dssim(p, t)
    return l1 * (1.0 - w.beta) + ds * w.beta
