"""Color-consistency metrics: Matching Error over pixel correspondences
and the Hasler-Suesstrunk colorfulness score.

Matching Error compares chroma only: the luminance planes are supplied by
the monochromatic captures themselves, so any cross-view disagreement
lives in (a', b'). Distances are Euclidean in the normalized chroma plane
with values bilinearly sampled at real-valued pixel locations.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .rasterizer import rasterize
from .scene import Camera, Scene, time_powers

__all__ = [
    "CorrespondenceSet",
    "matching_error",
    "colorfulness",
    "synth_correspondences",
    "load_correspondences",
    "save_correspondences",
]


@dataclass(frozen=True)
class CorrespondenceSet:
    """Matched pixel locations (x1, y1) in view `id_a` and (x2, y2) in `id_b`."""

    id_a: str
    id_b: str
    pairs: np.ndarray  # (N, 4) rows of x1 y1 x2 y2

    def __post_init__(self) -> None:
        pairs = np.asarray(self.pairs, dtype=np.float64)
        if pairs.ndim != 2 or pairs.shape[1] != 4:
            raise ValueError(f"CorrespondenceSet: pairs must be (N, 4), got {pairs.shape}")
        if not np.all(np.isfinite(pairs)):
            raise ValueError("CorrespondenceSet: coordinates must be finite")
        object.__setattr__(self, "pairs", pairs)

    def __len__(self) -> int:
        return self.pairs.shape[0]

    def swapped(self) -> "CorrespondenceSet":
        return CorrespondenceSet(self.id_b, self.id_a, self.pairs[:, [2, 3, 0, 1]])


def _bilinear(planes: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample (C, H, W) planes at real (x, y); integer pixel centers,
    edge-clamped. Returns (C, N)."""
    h, w = planes.shape[-2:]
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    top = planes[:, y0, x0] * (1.0 - fx) + planes[:, y0, x1] * fx
    bot = planes[:, y1, x0] * (1.0 - fx) + planes[:, y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def _check_image(img: np.ndarray, name: str) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"{name} must be a (3, H, W) image, got {img.shape}")
    return img


def _check_bounds(xs: np.ndarray, ys: np.ndarray, shape: tuple[int, int], name: str) -> None:
    h, w = shape
    bad = (xs < 0) | (xs > w - 1) | (ys < 0) | (ys > h - 1)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise ValueError(
            f"correspondence {i} lies outside {name}: ({xs[i]}, {ys[i]}) vs {w}x{h}"
        )


def matching_error(img_a, img_b, corr: CorrespondenceSet) -> float:
    """Mean Euclidean (a', b') distance over bilinearly sampled pairs."""
    img_a = _check_image(img_a, "img_a")
    img_b = _check_image(img_b, "img_b")
    if len(corr) == 0:
        raise ValueError("matching_error: correspondence set is empty")
    x1, y1, x2, y2 = corr.pairs.T
    _check_bounds(x1, y1, img_a.shape[1:], "img_a")
    _check_bounds(x2, y2, img_b.shape[1:], "img_b")
    ab_a = _bilinear(img_a[1:], x1, y1)
    ab_b = _bilinear(img_b[1:], x2, y2)
    diff = ab_a - ab_b
    return float(np.mean(np.sqrt(diff[0] ** 2 + diff[1] ** 2)))


def colorfulness(img) -> float:
    """Hasler-Suesstrunk score of a (3, H, W) RGB image in [0, 1]."""
    img = _check_image(img, "img") * 255.0
    rg = img[0] - img[1]
    yb = 0.5 * (img[0] + img[1]) - img[2]
    sigma = np.sqrt(rg.var() + yb.var())
    mu = np.sqrt(rg.mean() ** 2 + yb.mean() ** 2)
    return float(sigma + 0.3 * mu)


def psnr(img_a, img_b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; inf for identical inputs."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("psnr: empty images")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("psnr: images must be finite")
    if peak <= 0:
        raise ValueError(f"psnr: peak must be positive, got {peak}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


def _project_centers(scene: Scene, cam: Camera, t: float | None):
    positions = scene.positions
    if t is not None:
        tp = time_powers(t, scene.deformation.degree)
        positions = positions + np.einsum("p,npk->nk", tp, scene.deformation.d_mu)
    p_cam = cam.to_camera(positions)
    depth = p_cam[:, 2]
    in_front = depth > cam.near
    z = np.where(in_front, depth, 1.0)
    xs = cam.fx * p_cam[:, 0] / z + cam.cx
    ys = cam.fy * p_cam[:, 1] / z + cam.cy
    on_image = (xs >= 0) & (xs <= cam.width - 1) & (ys >= 0) & (ys <= cam.height - 1)
    return xs, ys, depth, in_front & on_image


def synth_correspondences(
    scene: Scene,
    cam_a: Camera,
    cam_b: Camera,
    t_a: float | None = None,
    t_b: float | None = None,
    *,
    id_a: str = "A",
    id_b: str = "B",
    opacity_threshold: float = 0.5,
    depth_tolerance: float = 0.1,
) -> CorrespondenceSet:
    """Ground-truth correspondences from Gaussian centers visible in both views.

    Centers of sufficiently opaque Gaussians are projected into both
    cameras (deformed for dynamic scenes); a pair survives when both
    projections land on the image and neither is occluded, judging
    occlusion by comparing center depth against the rendered depth map.
    """
    depth_a = rasterize(scene, cam_a, t=t_a).depth_map
    depth_b = rasterize(scene, cam_b, t=t_b).depth_map

    solid = expit(scene.opacity_logits) >= opacity_threshold
    xa, ya, da, vis_a = _project_centers(scene, cam_a, t_a)
    xb, yb, db, vis_b = _project_centers(scene, cam_b, t_b)

    keep = solid & vis_a & vis_b
    if np.any(keep):
        surf_a = _bilinear(depth_a[None], xa[keep], ya[keep])[0]
        surf_b = _bilinear(depth_b[None], xb[keep], yb[keep])[0]
        open_view = (da[keep] <= surf_a + depth_tolerance) & (db[keep] <= surf_b + depth_tolerance)
        keep[np.flatnonzero(keep)[~open_view]] = False
    if not np.any(keep):
        raise ValueError("synth_correspondences: no mutually visible points")

    pairs = np.column_stack([xa[keep], ya[keep], xb[keep], yb[keep]])
    return CorrespondenceSet(id_a, id_b, pairs)


# ---------------------------------------------------------------------------
# correspondence files
# ---------------------------------------------------------------------------


def save_correspondences(path: str | Path, corr: CorrespondenceSet) -> None:
    lines = [f"pair {corr.id_a} {corr.id_b}"]
    lines.extend(" ".join(repr(float(v)) for v in row) for row in corr.pairs)
    Path(path).write_text("\n".join(lines) + "\n")


def load_correspondences(
    path: str | Path,
    bounds_a: tuple[int, int] | None = None,
    bounds_b: tuple[int, int] | None = None,
) -> CorrespondenceSet:
    """Parse a correspondence file, optionally checking (H, W) bounds."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ValueError(f"cannot read correspondence file {path}: {exc}") from exc

    header: tuple[str, str] | None = None
    rows: list[list[float]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if header is None:
            fields = line.split()
            if len(fields) != 3 or fields[0] != "pair":
                raise ValueError(f"{path}:{lineno}: expected header 'pair <idA> <idB>'")
            header = (fields[1], fields[2])
            continue
        fields = line.split()
        if len(fields) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 coordinates, got {len(fields)}")
        try:
            row = [float(v) for v in fields]
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-numeric coordinate") from None
        if not all(np.isfinite(row)):
            raise ValueError(f"{path}:{lineno}: non-finite coordinate")
        for (x, y), bounds, name in (
            ((row[0], row[1]), bounds_a, "view A"),
            ((row[2], row[3]), bounds_b, "view B"),
        ):
            if x < 0 or y < 0:
                raise ValueError(f"{path}:{lineno}: negative coordinate for {name}")
            if bounds is not None and (x > bounds[1] - 1 or y > bounds[0] - 1):
                raise ValueError(f"{path}:{lineno}: coordinate out of bounds for {name}")
        rows.append(row)

    if header is None:
        raise ValueError(f"{path}: missing 'pair <idA> <idB>' header")
    if not rows:
        raise ValueError(f"{path}: no correspondence pairs")
    return CorrespondenceSet(header[0], header[1], np.array(rows))
