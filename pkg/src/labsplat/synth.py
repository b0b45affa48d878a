"""Synthetic dataset generator.

Builds a bumpy-sphere test scene whose chroma is a smooth function of a
scalar surface coordinate, renders it from a camera ring, and writes the
dataset a pipeline run consumes:

* ``cameras.txt``: the camera ring (with per-view timestamps when the
  scene moves),
* ``scene.txt``: the ground-truth Gaussian scene,
* ``color/<view>.planes`` and ``color/<view>.png``: normalized Lab
  renders and sRGB previews,
* ``mono/<view>.planes`` and ``mono/<view>.png``: the luminance plane of
  the color render, byte-identical to its first plane,
* ``corr/<a>_<b>.txt``: ground-truth correspondences for every view pair.

Palette stops are given in sRGB and interpolated in normalized Lab space
along the surface coordinate, so luminance and chroma vary together and a
colorizer can recover chroma from luminance alone. All spherical
harmonics are degree 0: the ground-truth appearance is view independent,
which keeps renders of the same surface point consistent across cameras.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .colorspace import denormalize_lab, lab_to_rgb, normalize_lab, rgb_to_lab
from .io import write_cameras, write_planes, write_png
from .metrics import save_correspondences, synth_correspondences
from .rasterizer import rasterize
from .scene import (
    SH_C0,
    Camera,
    ChannelAssignment,
    DeformationField,
    Scene,
    save_scene,
)

CORRESPONDENCE_HEADER = "# labsplat-correspondences 1"

_DEFAULT_PALETTE = ((0.10, 0.14, 0.42), (0.93, 0.79, 0.48))
_MOTION_KINDS = ("none", "linear", "sinusoidal")
_SHELL_RADIUS = 0.8
_SHELL_SQUASH = 0.65
_SOLID_LOGIT = 3.0


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Everything that determines a generated dataset.

    `motion` selects how per-Gaussian velocities vary over the surface:
    "linear" scales a shared direction smoothly with the surface
    coordinate, "sinusoidal" oscillates its sign across the surface.
    Both are constant in time; positions move linearly between t=0 and
    t=1, and each ring camera is assigned one timestamp of that span.
    """

    gaussians: int = 500
    palette: tuple = _DEFAULT_PALETTE
    cameras: int = 8
    ring_radius: float = 2.5
    ring_height: float = 2.2
    look_at: tuple = (0.0, 0.0, 0.0)
    focal: float | None = None
    resolution: int = 64
    motion: str = "none"
    motion_amplitude: float = 0.25
    seed: int = 0

    def __post_init__(self) -> None:
        if self.gaussians < 1:
            raise ValueError(f"SyntheticSceneSpec: gaussians must be >= 1, got {self.gaussians}")
        if self.resolution < 32:
            raise ValueError(f"SyntheticSceneSpec: resolution must be >= 32, got {self.resolution}")
        if len(self.palette) < 2:
            raise ValueError("SyntheticSceneSpec: palette needs at least 2 stops")
        for stop in self.palette:
            if len(stop) != 3 or any(not (0.0 <= float(v) <= 1.0) for v in stop):
                raise ValueError(f"SyntheticSceneSpec: palette stop {stop!r} is not an RGB triple in [0, 1]")
        if self.cameras < 1:
            raise ValueError(f"SyntheticSceneSpec: cameras must be >= 1, got {self.cameras}")
        if self.ring_radius <= 0:
            raise ValueError(f"SyntheticSceneSpec: ring_radius must be > 0, got {self.ring_radius}")
        if len(self.look_at) != 3:
            raise ValueError("SyntheticSceneSpec: look_at must be a 3-vector")
        if self.focal is not None and self.focal <= 0:
            raise ValueError(f"SyntheticSceneSpec: focal must be > 0, got {self.focal}")
        if self.motion not in _MOTION_KINDS:
            raise ValueError(f"SyntheticSceneSpec: motion must be one of {_MOTION_KINDS}, got {self.motion!r}")
        if not np.isfinite(self.motion_amplitude) or self.motion_amplitude < 0:
            raise ValueError(f"SyntheticSceneSpec: motion_amplitude must be finite and >= 0, got {self.motion_amplitude}")

    @property
    def is_dynamic(self) -> bool:
        return self.motion != "none"

    @property
    def effective_focal(self) -> float:
        """Default focal keeps the shell near a third of the frame."""
        if self.focal is not None:
            return self.focal
        distance = float(np.hypot(self.ring_radius, self.ring_height))
        return 0.33 * self.resolution * distance


def view_ids(spec: SyntheticSceneSpec) -> tuple:
    return tuple(f"view{i:02d}" for i in range(spec.cameras))


def view_times(spec: SyntheticSceneSpec):
    """One timestamp per ring camera for moving scenes, else None."""
    if not spec.is_dynamic:
        return None
    if spec.cameras == 1:
        return (0.0,)
    return tuple(np.linspace(0.0, 1.0, spec.cameras))


def palette_lab(spec: SyntheticSceneSpec) -> np.ndarray:
    """Palette stops as normalized Lab rows, shape (S, 3)."""
    stops = np.asarray(spec.palette, dtype=np.float64).T.reshape(3, -1, 1)
    return normalize_lab(rgb_to_lab(stops))[:, :, 0].T


def _surface_coordinate(dirs: np.ndarray) -> np.ndarray:
    return (dirs[:, 1] + 1.0) / 2.0


def build_scene(spec: SyntheticSceneSpec) -> Scene:
    """The ground-truth scene: a bumpy shell colored along the palette."""
    rng = np.random.default_rng(spec.seed)
    n = spec.gaussians

    dirs = rng.normal(size=(n, 3))
    norms = np.linalg.norm(dirs, axis=1)
    norms[norms < 1e-9] = 1.0
    dirs /= norms[:, None]
    bump = 1.0 + 0.15 * dirs[:, 0] * dirs[:, 1] + 0.12 * (dirs[:, 2] ** 2 - 1.0 / 3.0)
    positions = _SHELL_RADIUS * bump[:, None] * dirs
    positions[:, 1] *= _SHELL_SQUASH
    positions += np.asarray(spec.look_at, dtype=np.float64)

    u = _surface_coordinate(dirs)
    stops = palette_lab(spec)
    grid = np.linspace(0.0, 1.0, stops.shape[0])
    lab = np.stack([np.interp(u, grid, stops[:, c]) for c in range(3)])

    sh = np.zeros((3, n, 1))
    sh[:, :, 0] = (lab - 0.5) / SH_C0

    if n > 1:
        spacing = cKDTree(positions).query(positions, k=2)[0][:, 1]
        spacing = np.maximum(spacing, 1e-4)
    else:
        spacing = np.full(1, 0.1)
    log_scales = np.log(np.minimum(1.1 * spacing, 1.0))[:, None].repeat(3, axis=1)

    deformation = None
    if spec.is_dynamic:
        direction = rng.normal(size=3)
        direction /= max(np.linalg.norm(direction), 1e-9)
        if spec.motion == "linear":
            speed = 0.6 + 0.4 * u
        else:
            speed = np.sin(2.0 * np.pi * u)
        d_mu = (spec.motion_amplitude * speed)[:, None] * direction
        deformation = DeformationField(
            d_mu[:, None, :], np.zeros((n, 1, 4)), np.zeros((n, 1, 3))
        )

    return Scene(
        positions=positions,
        quaternions=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        log_scales=log_scales,
        opacity_logits=np.full(n, _SOLID_LOGIT),
        sh=sh,
        sh_degree=0,
        assignment=ChannelAssignment.FULL_LAB,
        deformation=deformation,
    )


def look_at_camera(position, target, fx: float, width: int, height: int) -> Camera:
    """Camera at `position` looking at `target`, up along +y."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    norm = np.linalg.norm(forward)
    if norm < 1e-9:
        raise ValueError("look_at_camera: position coincides with target")
    forward = forward / norm
    right = np.cross(forward, [0.0, 1.0, 0.0])
    norm = np.linalg.norm(right)
    if norm < 1e-9:
        raise ValueError("look_at_camera: view direction is vertical, up vector is degenerate")
    right = right / norm
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    return Camera(
        fx=fx, fy=fx, cx=(width - 1) / 2, cy=(height - 1) / 2,
        width=width, height=height,
        rotation=rot, translation=-rot @ position,
    )


def ring_cameras(spec: SyntheticSceneSpec) -> tuple:
    target = np.asarray(spec.look_at, dtype=np.float64)
    fx = spec.effective_focal
    cams = []
    for i in range(spec.cameras):
        angle = 2.0 * np.pi * i / spec.cameras
        pos = target + np.array([
            spec.ring_radius * np.cos(angle),
            spec.ring_height,
            spec.ring_radius * np.sin(angle),
        ])
        cams.append(look_at_camera(pos, target, fx, spec.resolution, spec.resolution))
    return tuple(cams)


def _save_versioned_correspondences(path: Path, corr) -> None:
    save_correspondences(path, corr)
    path.write_text(CORRESPONDENCE_HEADER + "\n" + path.read_text())


def _oracle_depth_tolerance(positions: np.ndarray) -> float:
    """Slack for the center-vs-rendered-depth visibility test.

    A Gaussian center sits up to a couple of standard deviations behind
    the alpha-blended front surface, and splat size tracks neighbor
    spacing, so the slack has to grow with spacing for sparse shells.
    """
    if len(positions) < 2:
        return 0.12
    spacing = cKDTree(positions).query(positions, k=2)[0][:, 1]
    return float(0.12 + 1.2 * np.median(spacing))


def write_dataset(spec: SyntheticSceneSpec, out_dir: str | os.PathLike) -> dict:
    """Generate and write the full dataset tree; returns a path summary."""
    out = Path(out_dir)
    for sub in ("color", "mono", "corr"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    scene = build_scene(spec)
    cams = ring_cameras(spec)
    ids = view_ids(spec)
    times = view_times(spec)

    save_scene(scene, out / "scene.txt")
    write_cameras(out / "cameras.txt", ids, cams, times=times)

    for i, (vid, cam) in enumerate(zip(ids, cams)):
        t = times[i] if times is not None else None
        lab = rasterize(scene, cam, t=t).image
        write_planes(out / "color" / f"{vid}.planes", lab)
        write_png(out / "color" / f"{vid}.png", lab_to_rgb(denormalize_lab(lab)))
        write_planes(out / "mono" / f"{vid}.planes", lab[:1])
        write_png(out / "mono" / f"{vid}.png", lab[0])

    pair_files = []
    tolerance = _oracle_depth_tolerance(scene.positions)
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            t_a = times[i] if times is not None else None
            t_b = times[j] if times is not None else None
            corr = synth_correspondences(
                scene, cams[i], cams[j], t_a=t_a, t_b=t_b,
                id_a=ids[i], id_b=ids[j], depth_tolerance=tolerance,
            )
            path = out / "corr" / f"{ids[i]}_{ids[j]}.txt"
            _save_versioned_correspondences(path, corr)
            pair_files.append(path)

    return {
        "cameras": out / "cameras.txt",
        "scene": out / "scene.txt",
        "color": [out / "color" / f"{v}.planes" for v in ids],
        "mono": [out / "mono" / f"{v}.planes" for v in ids],
        "correspondences": pair_files,
    }
