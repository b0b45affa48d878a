"""Conversions between sRGB and CIE Lab, Lab range normalization, and the
discrete Laplacian used by the edge-preservation loss.

Image conventions
-----------------
Images are numpy ``float64`` arrays in planar layout:

* ``RgbImage``: shape ``(3, H, W)``, sRGB-encoded values in ``[0, 1]``.
* ``LabImage``: shape ``(3, H, W)``, ``L`` in ``[0, 100]``, ``a``/``b`` in
  ``[-128, 127]``.
* ``NormalizedLabImage``: shape ``(3, H, W)``, all planes in ``[0, 1]``:
  ``L' = L / 100``, ``a' = (a + 128) / 255``, ``b' = (b + 128) / 255``.
* ``MonoImage``: shape ``(H, W)``, values in ``[0, 1]``.

Color standard
--------------
sRGB transfer function and primaries with the D65 white point. The working
RGB-to-XYZ matrix is the 8-decimal IEC-derived matrix; the reference white is
taken as the image of (1, 1, 1) under that matrix (its row sums) so that pure
grays map to exactly ``a = b = 0`` and white maps to exactly ``L = 100``.
The XYZ-to-RGB matrix is the numerical inverse, which closes round trips to
machine precision. ICC profiles, other white points, and chromatic adaptation
are out of scope.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "rgb_to_lab",
    "lab_to_rgb",
    "normalize_lab",
    "denormalize_lab",
    "luminance_plane",
    "chroma_planes",
    "laplacian",
]

# sRGB (D65) linear RGB -> XYZ. Rows: X, Y, Z.
_RGB_TO_XYZ = np.array(
    [
        [0.41239080, 0.35758434, 0.18048079],
        [0.21263901, 0.71516868, 0.07219232],
        [0.01933082, 0.11919478, 0.95053215],
    ]
)
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)

# Reference white = matrix applied to RGB (1,1,1); see module docstring.
_WHITE = _RGB_TO_XYZ.sum(axis=1)

# CIE Lab companding constants: delta = 6/29.
_DELTA = 6.0 / 29.0
_DELTA3 = _DELTA**3
_LAB_SLOPE = 1.0 / (3.0 * _DELTA**2)
_LAB_OFFSET = 4.0 / 29.0

# sRGB transfer-function breakpoints.
_SRGB_DECODE_KNEE = 0.04045
_SRGB_ENCODE_KNEE = 0.0031308

def _require_finite(img: np.ndarray, op: str) -> None:
    """Reject non-finite pixels, naming the first offending coordinate."""
    finite = np.isfinite(img)
    if not finite.all():
        idx = np.unravel_index(int(np.argmin(finite)), img.shape)
        raise ValueError(
            f"{op}: non-finite value {img[idx]!r} at coordinate {tuple(int(i) for i in idx)}"
        )


def _srgb_decode(v: np.ndarray) -> np.ndarray:
    """sRGB-encoded -> linear-light, per the piecewise IEC transfer function."""
    lo = v / 12.92
    hi = ((v + 0.055) / 1.055) ** 2.4
    return np.where(v <= _SRGB_DECODE_KNEE, lo, hi)


def _srgb_encode(v: np.ndarray) -> np.ndarray:
    """Linear-light -> sRGB-encoded; inverse of :func:`_srgb_decode`."""
    v = np.maximum(v, 0.0)
    lo = v * 12.92
    hi = 1.055 * v ** (1.0 / 2.4) - 0.055
    return np.where(v <= _SRGB_ENCODE_KNEE, lo, hi)


def _lab_f(t: np.ndarray) -> np.ndarray:
    """The CIE Lab companding function f(t) = t^(1/3) above (6/29)^3,
    linear below."""
    return np.where(t > _DELTA3, np.cbrt(t), _LAB_SLOPE * t + _LAB_OFFSET)


def _lab_f_inverse(u: np.ndarray) -> np.ndarray:
    return np.where(u > _DELTA, u**3, (u - _LAB_OFFSET) / _LAB_SLOPE)


def rgb_to_lab(img: np.ndarray) -> np.ndarray:
    """Convert an sRGB image ``(3, H, W)`` in ``[0, 1]`` to CIE Lab.

    The chain is sRGB decode -> linear RGB -> XYZ (D65) -> Lab, applied per
    pixel. Output planes are clamped to the Lab ranges ``L`` in ``[0, 100]``
    and ``a``/``b`` in ``[-128, 127]`` (sRGB's gamut lies inside them, so the
    clamp only trims round-off).

    Raises ``ValueError`` for non-finite input pixels, naming the first
    offending coordinate.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"rgb_to_lab: expected (3, H, W) image, got {img.shape}")
    _require_finite(img, "rgb_to_lab")

    linear = _srgb_decode(img)
    xyz = np.einsum("ij,jhw->ihw", _RGB_TO_XYZ, linear)
    fxyz = _lab_f(xyz / _WHITE[:, None, None])
    fx, fy, fz = fxyz

    lab = np.empty_like(img)
    lab[0] = 116.0 * fy - 16.0
    lab[1] = 500.0 * (fx - fy)
    lab[2] = 200.0 * (fy - fz)
    lab[0] = np.clip(lab[0], 0.0, 100.0)
    lab[1] = np.clip(lab[1], -128.0, 127.0)
    lab[2] = np.clip(lab[2], -128.0, 127.0)
    return lab


def lab_to_rgb(img: np.ndarray) -> np.ndarray:
    """Convert a CIE Lab image ``(3, H, W)`` back to sRGB in ``[0, 1]``.

    Exact algebraic inverse of :func:`rgb_to_lab`; out-of-gamut results are
    clamped to ``[0, 1]``. Round trips rgb -> lab -> rgb stay within 1e-3
    absolute error for in-gamut colors (machine precision in practice).
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"lab_to_rgb: expected (3, H, W) image, got {img.shape}")
    _require_finite(img, "lab_to_rgb")

    L, a, b = img
    fy = (L + 16.0) / 116.0
    fx = fy + a / 500.0
    fz = fy - b / 200.0
    xyz = _lab_f_inverse(np.stack([fx, fy, fz])) * _WHITE[:, None, None]
    linear = np.einsum("ij,jhw->ihw", _XYZ_TO_RGB, xyz)
    return np.clip(_srgb_encode(linear), 0.0, 1.0)


def normalize_lab(img: np.ndarray) -> np.ndarray:
    """Map a LabImage onto the unified ``[0, 1]`` range:
    ``L' = L/100``, ``a' = (a+128)/255``, ``b' = (b+128)/255``."""
    img = np.asarray(img, dtype=np.float64)
    out = np.empty_like(img)
    out[0] = img[0] / 100.0
    out[1] = (img[1] + 128.0) / 255.0
    out[2] = (img[2] + 128.0) / 255.0
    return out


def denormalize_lab(img: np.ndarray) -> np.ndarray:
    """Exact algebraic inverse of :func:`normalize_lab`."""
    img = np.asarray(img, dtype=np.float64)
    out = np.empty_like(img)
    out[0] = img[0] * 100.0
    out[1] = img[1] * 255.0 - 128.0
    out[2] = img[2] * 255.0 - 128.0
    return out


def luminance_plane(img: np.ndarray) -> np.ndarray:
    """The ``L'`` plane of a NormalizedLabImage, as an ``(H, W)`` MonoImage."""
    return np.asarray(img, dtype=np.float64)[0]


def chroma_planes(img: np.ndarray) -> np.ndarray:
    """The ``(a', b')`` planes of a NormalizedLabImage, shape ``(2, H, W)``."""
    return np.asarray(img, dtype=np.float64)[1:3]


def laplacian(channel: np.ndarray) -> np.ndarray:
    """Discrete 4-neighbor Laplacian of a single plane.

    Fixed kernel ``[[0,1,0],[1,-4,1],[0,1,0]]`` with replicate-padded
    borders, so the output has the input's shape. Linear in its input.
    Planes smaller than 3x3 are rejected.
    """
    channel = np.asarray(channel, dtype=np.float64)
    if channel.ndim != 2:
        raise ValueError(f"laplacian: expected a 2-D plane, got shape {channel.shape}")
    h, w = channel.shape
    if h < 3 or w < 3:
        raise ValueError(f"laplacian: plane must be at least 3x3, got {h}x{w}")
    p = np.pad(channel, 1, mode="edge")
    return p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:] - 4.0 * channel
