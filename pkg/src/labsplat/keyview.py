"""Entropy-based key view selection.

Each candidate view is mapped to a feature vector by a pluggable embedding
provider, rows are unit-normalized, and the cosine-similarity matrix is
softmax-normalized per row. The view whose similarity row has maximum
entropy (natural log) is the key view; ties go to the lowest index. The
softmax includes the self-similarity term by default, with a config switch
to drop it.

Two providers ship with the package: a handcrafted 112-dim luminance
descriptor, and a reader for precomputed per-view feature files so any
external embedder can be plugged in.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy.special import softmax as _scipy_softmax

__all__ = [
    "KeyviewConfig",
    "EmbeddingProvider",
    "BuiltinDescriptorProvider",
    "FileFeatureProvider",
    "builtin_descriptor",
    "normalize_rows",
    "similarity",
    "softmax_rows",
    "entropies",
    "view_entropies",
    "select_key_view",
    "make_provider",
]

_GRID = 8
_LUM_BINS = 32
_ORIENT_BINS = 16


@dataclass(frozen=True)
class KeyviewConfig:
    provider: str = "builtin"
    feature_file: str | Path | None = None
    include_self: bool = True

    def __post_init__(self) -> None:
        if self.provider not in ("builtin", "file"):
            raise ValueError(f"keyview provider must be 'builtin' or 'file', got {self.provider!r}")
        if self.provider == "file" and self.feature_file is None:
            raise ValueError("keyview provider 'file' requires feature_file")


class EmbeddingProvider(Protocol):
    def features(self, view_id: str, image: np.ndarray) -> np.ndarray: ...


def builtin_descriptor(image: np.ndarray) -> np.ndarray:
    """112-dim descriptor of a luminance plane.

    Concatenates an 8x8 mean-pooled grid, a 32-bin intensity histogram
    (normalized to unit sum), and a 16-bin gradient-orientation histogram
    weighted by gradient magnitude (unit sum when any gradient exists).
    A constant image yields a zero orientation block, which is fine: the
    intensity histogram keeps the full vector nonzero.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"builtin_descriptor: expected a 2-D plane, got shape {img.shape}")
    h, w = img.shape
    if h < 16 or w < 16:
        raise ValueError(f"builtin_descriptor: image must be at least 16x16, got {h}x{w}")

    rb = [h * i // _GRID for i in range(_GRID + 1)]
    cb = [w * j // _GRID for j in range(_GRID + 1)]
    grid = np.empty((_GRID, _GRID))
    for i in range(_GRID):
        for j in range(_GRID):
            grid[i, j] = img[rb[i]:rb[i + 1], cb[j]:cb[j + 1]].mean()

    lum_hist, _ = np.histogram(np.clip(img, 0.0, 1.0), bins=_LUM_BINS, range=(0.0, 1.0))
    lum_hist = lum_hist / img.size

    gy, gx = np.gradient(img)
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx)
    orient_hist, _ = np.histogram(ang, bins=_ORIENT_BINS, range=(-np.pi, np.pi), weights=mag)
    total = orient_hist.sum()
    if total > 0.0:
        orient_hist = orient_hist / total

    return np.concatenate([grid.ravel(), lum_hist, orient_hist])


class BuiltinDescriptorProvider:
    """Wraps builtin_descriptor into the provider interface."""

    def features(self, view_id: str, image: np.ndarray) -> np.ndarray:
        return builtin_descriptor(image)


class FileFeatureProvider:
    """Serves per-view feature vectors from a UTF-8 text file.

    One record per line: the view identifier followed by D whitespace-
    separated reals. Blank lines are ignored.
    """

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._table: dict[str, np.ndarray] = {}
        dim = None
        try:
            text = self.path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ValueError(f"feature file {self.path}: {exc}") from exc
        for ln, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) < 2:
                raise ValueError(f"feature file line {ln}: expected a view id and feature values")
            vid = parts[0]
            if vid in self._table:
                raise ValueError(f"feature file line {ln}: duplicate view id {vid!r}")
            try:
                vec = np.array([float(p) for p in parts[1:]], dtype=np.float64)
            except ValueError:
                raise ValueError(f"feature file line {ln}: non-numeric feature value") from None
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise ValueError(f"feature file line {ln}: dimension {vec.size} != {dim}")
            self._table[vid] = vec
        if not self._table:
            raise ValueError(f"feature file {self.path}: no records")

    def features(self, view_id: str, image: np.ndarray) -> np.ndarray:
        if view_id not in self._table:
            raise ValueError(f"feature file {self.path}: no record for view {view_id!r}")
        return self._table[view_id].copy()


def make_provider(config: KeyviewConfig) -> EmbeddingProvider:
    if config.provider == "file":
        return FileFeatureProvider(config.feature_file)
    return BuiltinDescriptorProvider()


def normalize_rows(features: np.ndarray) -> np.ndarray:
    """Unit-normalize every row; a zero row is reported by index."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 1 or f.shape[1] < 1:
        raise ValueError(f"normalize_rows: expected an N x D matrix, got shape {f.shape}")
    norms = np.linalg.norm(f, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValueError(f"normalize_rows: row {zero[0]} is all zeros and cannot be normalized")
    return f / norms[:, None]


def similarity(fhat: np.ndarray) -> np.ndarray:
    """Cosine-similarity matrix of unit-norm rows."""
    f = np.asarray(fhat, dtype=np.float64)
    return f @ f.T


def softmax_rows(s: np.ndarray, include_self: bool = True) -> np.ndarray:
    """Row-wise softmax of a similarity matrix.

    With include_self=False the diagonal is excluded from the distribution
    (its probability is exactly zero).
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"softmax_rows: expected a square matrix, got shape {s.shape}")
    n = s.shape[0]
    if not include_self:
        if n == 1:
            return np.zeros((1, 1))
        s = s.copy()
        np.fill_diagonal(s, -np.inf)
    return _scipy_softmax(s, axis=1)


def entropies(s: np.ndarray, include_self: bool = True) -> np.ndarray:
    """Natural-log entropy of each softmax-normalized similarity row."""
    p = softmax_rows(s, include_self=include_self)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log(p), 0.0)
    return -terms.sum(axis=1)


def _extract_features(
    images: Sequence[np.ndarray],
    provider: EmbeddingProvider,
    view_ids: Sequence[str],
    threads: int | None,
) -> np.ndarray:
    if threads is not None and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            feats = list(pool.map(provider.features, view_ids, images))
    else:
        feats = [provider.features(v, img) for v, img in zip(view_ids, images)]
    dim = feats[0].shape[-1] if feats[0].ndim else feats[0].size
    for vid, vec in zip(view_ids, feats):
        vec = np.asarray(vec)
        if vec.ndim != 1 or vec.size != dim:
            raise ValueError(
                f"embedding provider returned dimension {vec.size} for view {vid!r}, expected {dim}"
            )
    return np.stack([np.asarray(v, dtype=np.float64) for v in feats])


def view_entropies(
    images: Sequence[np.ndarray],
    provider: EmbeddingProvider | None = None,
    view_ids: Sequence[str] | None = None,
    include_self: bool = True,
    threads: int | None = None,
) -> np.ndarray:
    """Entropy score per view, in input order."""
    if len(images) < 1:
        raise ValueError("view_entropies: need at least one view")
    if provider is None:
        provider = BuiltinDescriptorProvider()
    if view_ids is None:
        view_ids = [str(i) for i in range(len(images))]
    elif len(view_ids) != len(images):
        raise ValueError("view_entropies: view_ids and images length mismatch")
    features = _extract_features(images, provider, view_ids, threads)
    return entropies(similarity(normalize_rows(features)), include_self=include_self)


def select_key_view(
    images: Sequence[np.ndarray],
    provider: EmbeddingProvider | None = None,
    view_ids: Sequence[str] | None = None,
    include_self: bool = True,
    threads: int | None = None,
) -> int:
    """Index of the maximum-entropy view; ties break to the lowest index."""
    h = view_entropies(images, provider, view_ids, include_self, threads)
    return int(np.argmax(h))
