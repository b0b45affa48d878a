"""Scene optimization against known luminance and predicted chrominance.

Training runs in two phases over one Gaussian scene. During warm-up the
scene renders its luminance content on all three planes and every plane is
supervised by the same L' target, which shapes geometry and opacity before
any color exists. At the switch iteration two SH coefficient sets are
reassigned to chrominance (reset to neutral gray) and the remaining
iterations optimize the full Lab objective: ``loss_l`` on the rendered L'
plane plus ``loss_ab`` on the rendered chroma planes against the
colorizer's predictions.

Gradients flow through the image-space losses by reverse-mode autodiff and
through the rasterizer by its hand-written backward pass; each scene
attribute class (positions, rotations, scales, opacities, SH, deformation)
gets its own Adam state and learning rate. Chroma SH rows receive zeroed
gradients until the switch, so they stay bit-identical to their initial
values throughout warm-up.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import logit

from . import autodiff as ad
from .autodiff import AdamState, Tensor, adam_step
from .colorspace import denormalize_lab, lab_to_rgb
from .losses import LossWeights, loss_ab, loss_l
from .rasterizer import rasterize, rasterize_backward
from .scene import (
    Camera,
    ChannelAssignment,
    DeformationField,
    Scene,
    switch_to_full_color,
)

__all__ = [
    "ReconstructConfig",
    "SupervisionView",
    "SupervisionSet",
    "ReconstructStep",
    "ReconstructResult",
    "NovelRender",
    "init_scene",
    "train_scene",
    "render_novel",
    "write_reconstruct_log",
    "save_optimizer_state",
    "load_optimizer_state",
]

_INIT_ALPHA = 0.1
_LONE_POINT_SCALE = 0.1
_STATE_MAGIC = b"LABSPLAT-OPTSTATE-1\n"


@dataclass(frozen=True)
class ReconstructConfig:
    """Optimization schedule and per-attribute learning rates.

    ``lr_position`` is expressed per unit of scene extent and scaled by the
    initial point spread at training time. ``warmup_iterations`` overrides
    the fraction-derived split when set (a run with ``warmup_iterations ==
    iterations`` never switches, which is how callers inspect the scene
    exactly at the phase boundary).
    """

    iterations: int = 2000
    warmup_fraction: float = 0.5
    warmup_iterations: int | None = None
    lr_position: float = 1.6e-4
    lr_rotation: float = 5e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    lr_deformation: float = 1e-3
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    sh_degree: int = 1
    init_count: int = 2000
    init_bounds: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    deformation_degree: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"ReconstructConfig: iterations must be >= 1, got {self.iterations}")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError(
                f"ReconstructConfig: warmup_fraction must lie in (0, 1), got {self.warmup_fraction}"
            )
        if self.warmup_iterations is not None and not 0 <= self.warmup_iterations <= self.iterations:
            raise ValueError(
                "ReconstructConfig: warmup_iterations must lie in [0, iterations], "
                f"got {self.warmup_iterations}"
            )
        for name in ("lr_position", "lr_rotation", "lr_scale", "lr_opacity", "lr_sh", "lr_deformation"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"ReconstructConfig: {name} must be > 0, got {getattr(self, name)}")
        if self.sh_degree not in (0, 1, 2, 3):
            raise ValueError(f"ReconstructConfig: sh_degree must be 0..3, got {self.sh_degree}")
        if self.init_count < 1:
            raise ValueError(f"ReconstructConfig: init_count must be >= 1, got {self.init_count}")
        if self.deformation_degree < 0:
            raise ValueError(
                f"ReconstructConfig: deformation_degree must be >= 0, got {self.deformation_degree}"
            )
        lo, hi = (np.asarray(b, dtype=np.float64) for b in self.init_bounds)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(lo >= hi):
            raise ValueError("ReconstructConfig: init_bounds must be two ordered 3D corners")

    @property
    def warmup_split(self) -> int:
        if self.warmup_iterations is not None:
            return self.warmup_iterations
        return int(self.iterations * self.warmup_fraction)


@dataclass(frozen=True)
class SupervisionView:
    """One training image: a camera, its L' plane, and predicted chroma."""

    camera: Camera
    target_l: np.ndarray
    target_ab: np.ndarray
    t: float | None = None

    def __post_init__(self):
        tl = np.asarray(self.target_l, dtype=np.float64)
        tab = np.asarray(self.target_ab, dtype=np.float64)
        h, w = self.camera.height, self.camera.width
        if tl.shape != (h, w):
            raise ValueError(f"SupervisionView: target_l must be ({h}, {w}), got {tl.shape}")
        if tab.shape != (2, h, w):
            raise ValueError(f"SupervisionView: target_ab must be (2, {h}, {w}), got {tab.shape}")
        for name, plane in (("target_l", tl), ("target_ab", tab)):
            if not np.all(np.isfinite(plane)):
                raise ValueError(f"SupervisionView: {name} has non-finite values")
            if plane.min() < 0.0 or plane.max() > 1.0:
                raise ValueError(f"SupervisionView: {name} must lie in [0, 1]")
        if self.t is not None and not 0.0 <= self.t <= 1.0:
            raise ValueError(f"SupervisionView: t must lie in [0, 1], got {self.t}")
        object.__setattr__(self, "target_l", tl)
        object.__setattr__(self, "target_ab", tab)


@dataclass(frozen=True)
class SupervisionSet:
    views: tuple

    def __post_init__(self):
        views = tuple(self.views)
        if not views:
            raise ValueError("SupervisionSet: needs at least one view")
        timed = [v.t is not None for v in views]
        if any(timed) and not all(timed):
            raise ValueError("SupervisionSet: views must either all carry timestamps or none")
        object.__setattr__(self, "views", views)

    def __len__(self) -> int:
        return len(self.views)

    @property
    def is_dynamic(self) -> bool:
        return self.views[0].t is not None


class ReconstructStep(NamedTuple):
    iteration: int
    phase: str
    loss_l: float
    loss_ab: float
    total: float


@dataclass
class ReconstructResult:
    steps: list
    optimizer: dict
    aborted: bool = False

    @property
    def totals(self) -> list:
        return [s.total for s in self.steps]


class NovelRender(NamedTuple):
    rgb: np.ndarray
    lab: np.ndarray


def _scene_extent(positions: np.ndarray) -> float:
    span = positions.max(axis=0) - positions.min(axis=0)
    extent = float(np.linalg.norm(span))
    return extent if extent > 0.0 else 1.0


def init_scene(point_seed, cfg: ReconstructConfig) -> Scene:
    """Seed a warm-up scene from 3D points (or a count for random points).

    Each point becomes one Gaussian: isotropic scale set by the nearest
    neighbor distance, opacity near 0.1, all SH sets at mid-gray so the
    first renders are achromatic by construction.
    """
    if isinstance(point_seed, (int, np.integer)):
        if point_seed < 1:
            raise ValueError(f"init_scene: point count must be >= 1, got {point_seed}")
        lo, hi = (np.asarray(b, dtype=np.float64) for b in cfg.init_bounds)
        rng = np.random.default_rng(cfg.seed)
        points = rng.uniform(lo, hi, size=(int(point_seed), 3))
    else:
        points = np.asarray(point_seed, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] < 1:
            raise ValueError(f"init_scene: point seed must be (N, 3) with N >= 1, got {points.shape}")
        if not np.all(np.isfinite(points)):
            raise ValueError("init_scene: point seed has non-finite values")
        points = points.copy()

    n = points.shape[0]
    if n > 1:
        dist, _ = cKDTree(points).query(points, k=2)
        nearest = np.maximum(dist[:, 1], 1e-6)
    else:
        nearest = np.array([_LONE_POINT_SCALE])
    k = (cfg.sh_degree + 1) ** 2
    deformation = None
    if cfg.deformation_degree >= 1:
        deformation = DeformationField.zeros(n, degree=cfg.deformation_degree)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return Scene(
        positions=points,
        quaternions=quats,
        log_scales=np.repeat(np.log(nearest)[:, None], 3, axis=1),
        opacity_logits=np.full(n, float(logit(_INIT_ALPHA))),
        sh=np.zeros((3, n, k)),
        sh_degree=cfg.sh_degree,
        assignment=ChannelAssignment.WARM_UP,
        deformation=deformation,
    )


def _iteration_loss(scene: Scene, view: SupervisionView, warm: bool, weights: LossWeights):
    """Render one view and build its loss graph.

    Returns the loss tensors plus the plane leaves and the raster cache so
    the caller can chain image gradients into the rasterizer backward pass.
    """
    out = rasterize(scene, view.camera, t=view.t, keep_cache=True)
    planes = [Tensor(out.image[c], requires_grad=True) for c in range(3)]
    h, w = view.camera.height, view.camera.width
    if warm:
        per_plane = [loss_l(p, view.target_l, weights) for p in planes]
        l_term = (per_plane[0] + per_plane[1] + per_plane[2]) * (1.0 / 3.0)
        total = l_term
        ab_term = None
    else:
        l_term = loss_l(planes[0], view.target_l, weights)
        ab_pred = ad.concat(
            [ad.reshape(planes[1], (1, 1, h, w)), ad.reshape(planes[2], (1, 1, h, w))],
            axis=1,
        )
        ab_term = loss_ab(ab_pred, view.target_ab, weights)
        total = l_term + ab_term
    return total, l_term, ab_term, planes, out


_ATTRIBUTES = (
    ("position", lambda s: s.positions, lambda g: g.positions),
    ("rotation", lambda s: s.quaternions, lambda g: g.quaternions),
    ("scale", lambda s: s.log_scales, lambda g: g.log_scales),
    ("opacity", lambda s: s.opacity_logits, lambda g: g.opacity_logits),
    ("sh", lambda s: s.sh, lambda g: g.sh),
    ("d_mu", lambda s: s.deformation.d_mu, lambda g: g.d_mu),
    ("d_q", lambda s: s.deformation.d_q, lambda g: g.d_q),
    ("d_s", lambda s: s.deformation.d_s, lambda g: g.d_s),
)


def train_scene(
    scene: Scene,
    sup: SupervisionSet,
    cfg: ReconstructConfig,
    probe: Callable[[int, str, Scene], None] | None = None,
) -> ReconstructResult:
    """Run the two-phase optimization in place on ``scene``.

    One view is drawn per iteration (epoch-shuffled under ``cfg.seed``).
    A non-finite loss rolls the scene back to the last finite state and
    stops early. ``probe``, when given, is called as ``probe(iteration,
    phase, scene)`` after the potential phase switch and before the render;
    it is a diagnostic hook and must not mutate the scene.
    """
    if scene.assignment is not ChannelAssignment.WARM_UP:
        raise ValueError("train_scene: scene must start in warm-up mode")
    if sup.is_dynamic != scene.is_dynamic:
        raise ValueError("train_scene: supervision and scene disagree on dynamics")

    lrs = {
        "position": cfg.lr_position * _scene_extent(scene.positions),
        "rotation": cfg.lr_rotation,
        "scale": cfg.lr_scale,
        "opacity": cfg.lr_opacity,
        "sh": cfg.lr_sh,
        "d_mu": cfg.lr_deformation,
        "d_q": cfg.lr_deformation,
        "d_s": cfg.lr_deformation,
    }
    attrs = [a for a in _ATTRIBUTES if scene.is_dynamic or not a[0].startswith("d_")]
    states = {name: AdamState.for_params([get(scene)]) for name, get, _ in attrs}

    rng = np.random.default_rng(cfg.seed)
    n_views = len(sup)
    order = np.empty(0, dtype=np.intp)
    split = cfg.warmup_split

    def snapshot():
        saved = {name: get(scene).copy() for name, get, _ in attrs}
        saved["assignment"] = scene.assignment
        return saved

    good = snapshot()
    steps: list[ReconstructStep] = []
    aborted = False

    for it in range(cfg.iterations):
        if it == split:
            switch_to_full_color(scene)
        warm = it < split
        phase = "warmup" if warm else "full"
        if probe is not None:
            probe(it, phase, scene)
        if it % n_views == 0:
            order = rng.permutation(n_views)
        view = sup.views[order[it % n_views]]

        try:
            total, l_term, ab_term, planes, out = _iteration_loss(scene, view, warm, cfg.weights)
            total_value = float(total.data)
            if not np.isfinite(total_value):
                raise FloatingPointError("loss is non-finite")
        except FloatingPointError as exc:
            for name, get, _ in attrs:
                get(scene)[...] = good[name]
            scene.assignment = good["assignment"]
            warnings.warn(
                f"train_scene: non-finite value at iteration {it} ({exc}); "
                "rolled back to the last good parameters",
                RuntimeWarning,
                stacklevel=2,
            )
            aborted = True
            break

        good = snapshot()
        ad.backward(total)
        h, w = view.camera.height, view.camera.width
        upstream = np.stack(
            [p.grad if p.grad is not None else np.zeros((h, w)) for p in planes]
        )
        grads = rasterize_backward(scene, view.camera, view.t, upstream, out.cache)
        if warm:
            grads.sh[1] = 0.0
            grads.sh[2] = 0.0
        for name, get, pick in attrs:
            adam_step([get(scene)], [pick(grads)], states[name], lrs[name])
        steps.append(
            ReconstructStep(
                iteration=it,
                phase=phase,
                loss_l=float(l_term.data),
                loss_ab=float(ab_term.data) if ab_term is not None else 0.0,
                total=total_value,
            )
        )

    return ReconstructResult(steps=steps, optimizer=states, aborted=aborted)


def render_novel(scene: Scene, cam: Camera, t: float | None = None) -> NovelRender:
    """Render a full-color view as both sRGB and normalized Lab planes."""
    if scene.assignment is not ChannelAssignment.FULL_LAB:
        raise ValueError("render_novel: scene has no chroma channels yet")
    lab = rasterize(scene, cam, t=t).image
    return NovelRender(rgb=lab_to_rgb(denormalize_lab(lab)), lab=lab)


def write_reconstruct_log(path, result: ReconstructResult) -> None:
    lines = ["iteration,phase,loss_l,loss_ab,total"]
    for s in result.steps:
        lines.append(
            f"{s.iteration},{s.phase},{s.loss_l!r},{s.loss_ab!r},{s.total!r}"
        )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# optimizer-state checkpointing
# ---------------------------------------------------------------------------


def _state_blocks(states: dict) -> list:
    blocks = []
    for name in sorted(states):
        st = states[name]
        blocks.append((f"{name}.m", st.m[0]))
        blocks.append((f"{name}.v", st.v[0]))
        blocks.append((f"{name}.step", np.array([float(st.step)])))
    return blocks


def save_optimizer_state(path, states: dict) -> None:
    """Write per-attribute Adam moments to a stable binary container."""
    blocks = _state_blocks(states)
    with open(path, "wb") as fh:
        fh.write(_STATE_MAGIC)
        fh.write(struct.pack("<I", len(blocks)))
        for name, arr in blocks:
            raw = name.encode("utf-8")
            a = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(a.tobytes())


def load_optimizer_state(path) -> dict:
    """Rebuild the Adam state dict written by ``save_optimizer_state``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(_STATE_MAGIC):
        raise ValueError(f"load_optimizer_state: {path} is not an optimizer state file")
    pos = len(_STATE_MAGIC)

    def take(n, what):
        nonlocal pos
        if pos + n > len(raw):
            raise ValueError(f"load_optimizer_state: truncated file ({what})")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4, "block count"))
    blocks = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims"))
        size = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(take(8 * size, name), dtype="<f8").reshape(dims)
        blocks[name] = data.copy()
    if pos != len(raw):
        raise ValueError("load_optimizer_state: trailing bytes after the last block")

    names = sorted({key.rsplit(".", 1)[0] for key in blocks})
    states = {}
    for name in names:
        for part in ("m", "v", "step"):
            if f"{name}.{part}" not in blocks:
                raise ValueError(f"load_optimizer_state: missing block {name}.{part}")
        states[name] = AdamState(
            m=[blocks[f"{name}.m"]],
            v=[blocks[f"{name}.v"]],
            step=int(blocks[f"{name}.step"].reshape(-1)[0]),
        )
    return states
