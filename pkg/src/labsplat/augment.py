"""Single-view augmentation for colorizer training.

Native transforms (quarter-turn rotation/flips, grid shuffle, elastic
warp) always move the luminance input and the chroma target through the
same geometry, so the pixelwise L-to-ab pairing the colorizer must learn
is never broken. Generated augmentations (outpainting, video frames,
novel views) are produced by external tools and enter through a manifest
of image files; anything unreadable is skipped with a warning.

Grid shuffle cuts the image into g x g cells where the last row/column of
cells absorbs the size remainder. A permutation can only move a cell into
a slot of identical shape, so cells shuffle within their shape class;
when the image divides evenly that is the full g^2 permutation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter, map_coordinates

from .colorspace import chroma_planes, luminance_plane, normalize_lab, rgb_to_lab

__all__ = [
    "Provenance",
    "AugmentSample",
    "AugmentConfig",
    "rotate_flip",
    "grid_shuffle",
    "elastic_transform",
    "random_crop",
    "ingest_generated",
    "sample_training_item",
]

_MANIFEST_TAGS = ("outpaint", "video", "novelview")


@dataclass(frozen=True)
class Provenance:
    """Where a sample came from, plus the native transforms applied to it."""

    kind: str
    transforms: tuple[str, ...] = ()

    _KINDS = ("original", "outpaint", "video", "novelview", "traditional")

    def __post_init__(self) -> None:
        if self.kind not in self._KINDS:
            raise ValueError(f"provenance kind must be one of {self._KINDS}, got {self.kind!r}")

    def with_transform(self, name: str) -> "Provenance":
        kind = "traditional" if self.kind == "original" else self.kind
        return Provenance(kind, self.transforms + (name,))

    @classmethod
    def original(cls) -> "Provenance":
        return cls("original")


@dataclass
class AugmentSample:
    input_l: np.ndarray    # (H, W)
    target_ab: np.ndarray  # (2, H, W)
    provenance: Provenance = field(default_factory=Provenance.original)

    def __post_init__(self) -> None:
        self.input_l = np.asarray(self.input_l, dtype=np.float64)
        self.target_ab = np.asarray(self.target_ab, dtype=np.float64)
        if self.input_l.ndim != 2:
            raise ValueError(f"AugmentSample: input_l must be 2-D, got shape {self.input_l.shape}")
        if self.target_ab.ndim != 3 or self.target_ab.shape[0] != 2:
            raise ValueError(
                f"AugmentSample: target_ab must be (2, H, W), got shape {self.target_ab.shape}"
            )
        if self.target_ab.shape[1:] != self.input_l.shape:
            raise ValueError(
                "AugmentSample: input_l and target_ab are not pixel-aligned: "
                f"{self.input_l.shape} vs {self.target_ab.shape[1:]}"
            )

    @property
    def height(self) -> int:
        return self.input_l.shape[0]

    @property
    def width(self) -> int:
        return self.input_l.shape[1]


@dataclass(frozen=True)
class AugmentConfig:
    grid_sizes: tuple[int, ...] = (2, 3, 4)
    elastic_alpha: float = 34.0
    elastic_sigma: float = 4.0
    seed: int = 0
    enable_rotate_flip: bool = True
    enable_grid_shuffle: bool = True
    enable_elastic: bool = True
    stack_transforms: bool = True
    crop_size: int | None = None

    def __post_init__(self) -> None:
        if not self.grid_sizes or any(g < 2 for g in self.grid_sizes):
            raise ValueError(f"AugmentConfig: grid sizes must all be >= 2, got {self.grid_sizes}")
        if self.elastic_alpha < 0.0:
            raise ValueError(f"AugmentConfig: elastic_alpha must be >= 0, got {self.elastic_alpha}")
        if self.elastic_sigma <= 0.0:
            raise ValueError(f"AugmentConfig: elastic_sigma must be > 0, got {self.elastic_sigma}")
        if self.crop_size is not None and self.crop_size < 1:
            raise ValueError(f"AugmentConfig: crop_size must be >= 1, got {self.crop_size}")


def _planes(sample: AugmentSample) -> np.ndarray:
    return np.concatenate([sample.input_l[None], sample.target_ab], axis=0)


def _rebuild(sample: AugmentSample, planes: np.ndarray, op: str) -> AugmentSample:
    return AugmentSample(
        input_l=planes[0],
        target_ab=planes[1:],
        provenance=sample.provenance.with_transform(op),
    )


def rotate_flip(sample: AugmentSample, k: int, hflip: bool, vflip: bool) -> AugmentSample:
    """Quarter-turn rotation then optional horizontal/vertical flips.

    Pure index permutations, so the operation is lossless.
    """
    planes = np.rot90(_planes(sample), k % 4, axes=(-2, -1))
    if hflip:
        planes = planes[:, :, ::-1]
    if vflip:
        planes = planes[:, ::-1, :]
    name = f"rotate_flip(k={k % 4},h={hflip},v={vflip})"
    return _rebuild(sample, np.ascontiguousarray(planes), name)


def _cell_bounds(extent: int, g: int) -> list[tuple[int, int]]:
    base = extent // g
    bounds = [(i * base, (i + 1) * base) for i in range(g - 1)]
    bounds.append(((g - 1) * base, extent))
    return bounds


def grid_shuffle(sample: AugmentSample, g: int, seed: int) -> AugmentSample:
    """Permute g x g image cells, identically for L and ab planes.

    Cells are grouped by shape (the last row/column absorbs remainders)
    and shuffled within each group, which preserves the pixel multiset
    exactly.
    """
    h, w = sample.input_l.shape
    if g > h or g > w:
        raise ValueError(f"grid_shuffle: grid {g} exceeds image {h}x{w}")
    if g < 2:
        raise ValueError(f"grid_shuffle: grid size must be >= 2, got {g}")
    rows = _cell_bounds(h, g)
    cols = _cell_bounds(w, g)
    cells = [(r, c) for r in range(g) for c in range(g)]
    shapes = {}
    for r, c in cells:
        key = (rows[r][1] - rows[r][0], cols[c][1] - cols[c][0])
        shapes.setdefault(key, []).append((r, c))

    rng = np.random.default_rng(seed)
    mapping = {}
    for key in sorted(shapes):
        group = shapes[key]
        perm = rng.permutation(len(group))
        for src_pos, dst_idx in enumerate(perm):
            mapping[group[dst_idx]] = group[src_pos]

    planes = _planes(sample)
    out = np.empty_like(planes)
    for (dr, dc), (sr, sc) in mapping.items():
        out[:, rows[dr][0]:rows[dr][1], cols[dc][0]:cols[dc][1]] = \
            planes[:, rows[sr][0]:rows[sr][1], cols[sc][0]:cols[sc][1]]
    return _rebuild(sample, out, f"grid_shuffle(g={g})")


def elastic_transform(sample: AugmentSample, alpha: float, sigma: float, seed: int) -> AugmentSample:
    """Smooth random warp: Gaussian-smoothed unit noise scaled by alpha.

    One displacement field drives bilinear resampling of all three planes
    (replicate borders), so interpolation weights are shared between L
    and ab.
    """
    if alpha < 0.0:
        raise ValueError(f"elastic_transform: alpha must be >= 0, got {alpha}")
    if sigma <= 0.0:
        raise ValueError(f"elastic_transform: sigma must be > 0, got {sigma}")
    h, w = sample.input_l.shape
    rng = np.random.default_rng(seed)
    dx = gaussian_filter(rng.uniform(-1.0, 1.0, size=(h, w)), sigma) * alpha
    dy = gaussian_filter(rng.uniform(-1.0, 1.0, size=(h, w)), sigma) * alpha
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    coords = np.stack([yy + dy, xx + dx])

    planes = _planes(sample)
    out = np.empty_like(planes)
    for p in range(planes.shape[0]):
        out[p] = map_coordinates(planes[p], coords, order=1, mode="nearest")
    return _rebuild(sample, out, f"elastic(alpha={alpha},sigma={sigma})")


def random_crop(sample: AugmentSample, size: int, rng: np.random.Generator) -> AugmentSample:
    """Random size x size crop; an oversized request warns and returns the
    sample uncropped."""
    h, w = sample.input_l.shape
    if size > h or size > w:
        warnings.warn(
            f"crop {size}x{size} exceeds image {h}x{w}; using the image uncropped",
            stacklevel=2,
        )
        return sample
    y0 = int(rng.integers(0, h - size + 1))
    x0 = int(rng.integers(0, w - size + 1))
    planes = _planes(sample)[:, y0:y0 + size, x0:x0 + size]
    return _rebuild(sample, np.ascontiguousarray(planes), f"crop({size})")


def _load_sample(path: Path, kind: str) -> AugmentSample:
    with Image.open(path) as img:
        rgb = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    planar = rgb.transpose(2, 0, 1)
    lab = normalize_lab(rgb_to_lab(planar))
    return AugmentSample(
        input_l=luminance_plane(lab),
        target_ab=chroma_planes(lab),
        provenance=Provenance(kind),
    )


def ingest_generated(manifest_path: str | Path, key_sample: AugmentSample) -> list[AugmentSample]:
    """Key-view sample plus every readable image listed in the manifest.

    Manifest lines are `<tag> <relative-path>` with tag in
    {outpaint, video, novelview}; paths resolve against the manifest's
    directory. Bad lines and unreadable images are skipped with warnings;
    an unreadable manifest is an error.
    """
    manifest = Path(manifest_path)
    try:
        text = manifest.read_text(encoding="utf-8")
    except OSError as exc:
        raise ValueError(f"augmentation manifest {manifest}: {exc}") from exc

    samples = [key_sample]
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split(maxsplit=1)
        if len(parts) != 2 or parts[0] not in _MANIFEST_TAGS:
            warnings.warn(
                f"manifest line {ln}: expected '<tag> <path>' with tag in {_MANIFEST_TAGS}; skipped",
                stacklevel=2,
            )
            continue
        tag, rel = parts
        path = manifest.parent / rel
        try:
            samples.append(_load_sample(path, tag))
        except (OSError, ValueError) as exc:
            warnings.warn(f"manifest line {ln}: cannot load {path}: {exc}; skipped", stacklevel=2)
    return samples


def sample_training_item(
    pool: Sequence[AugmentSample],
    config: AugmentConfig,
    rng: np.random.Generator,
) -> AugmentSample:
    """One training sample: uniform pool pick, coin-flip transforms, crop.

    Enabled transforms are considered in the fixed order rotate_flip,
    grid_shuffle, elastic, each applied with probability 0.5. With
    stack_transforms off, at most one (chosen uniformly among the enabled
    ones) is applied, still with probability 0.5.
    """
    if not pool:
        raise ValueError("sample_training_item: augmentation pool is empty")
    item = pool[int(rng.integers(0, len(pool)))]

    enabled = []
    if config.enable_rotate_flip:
        enabled.append("rotate_flip")
    if config.enable_grid_shuffle:
        enabled.append("grid_shuffle")
    if config.enable_elastic:
        enabled.append("elastic")

    if config.stack_transforms:
        chosen = [name for name in enabled if rng.random() < 0.5]
    else:
        chosen = []
        if enabled and rng.random() < 0.5:
            chosen = [enabled[int(rng.integers(0, len(enabled)))]]

    for name in chosen:
        if name == "rotate_flip":
            item = rotate_flip(
                item, int(rng.integers(0, 4)), bool(rng.integers(0, 2)), bool(rng.integers(0, 2))
            )
        elif name == "grid_shuffle":
            g = int(config.grid_sizes[int(rng.integers(0, len(config.grid_sizes)))])
            if g <= min(item.height, item.width):
                item = grid_shuffle(item, g, int(rng.integers(0, 2**32)))
        else:
            item = elastic_transform(
                item, config.elastic_alpha, config.elastic_sigma, int(rng.integers(0, 2**32))
            )

    if config.crop_size is not None:
        item = random_crop(item, config.crop_size, rng)
    return item
