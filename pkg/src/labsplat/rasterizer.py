"""Differentiable splatting of Lab Gaussian scenes.

Forward path: every Gaussian is projected to screen space with the EWA
local affine approximation (cov2d = J W Sigma W^T J^T plus an isotropic
blur floor), truncated at three sigma, depth-sorted front to back (ties
broken by primitive index), and alpha-composited per pixel. The three
image planes always come from the three SH sets; the scene's channel
assignment only decides how the background fills uncovered regions
(warm-up replicates the luminance component onto all planes).

Backward path: analytic gradients for every primitive attribute and, for
dynamic scenes, for the deformation coefficients. The forward pass caches
each splat's footprint patch (its alpha values and the transmittance in
front of it), so the backward traversal is an exact back-to-front replay
with a deterministic summation order, not a reconstruction.

Pixel centers sit at integer coordinates: pixel (row i, column j) is the
point x = j, y = i in screen space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .scene import (
    Camera,
    ChannelAssignment,
    GaussianPrimitive,
    Scene,
    sh_basis,
    sh_basis_grad,
    time_powers,
)

__all__ = [
    "BLUR_FLOOR",
    "SplatProjection",
    "RenderOutput",
    "SceneGradients",
    "project",
    "rasterize",
    "rasterize_backward",
]

BLUR_FLOOR = 0.3          # px^2 added to the cov2d diagonal
_FOOTPRINT_SIGMAS = 3.0
_ALPHA_SKIP = 1e-4        # splat-pixel contributions below this are dropped
_ALPHA_CAP = 0.999        # keeps 1/(1 - alpha') bounded in the backward pass


@dataclass
class SplatProjection:
    """Screen-space footprint of one projected Gaussian."""

    mean2d: np.ndarray        # (2,) pixel coordinates
    cov2d: np.ndarray         # (2, 2) pixel^2
    depth: float              # camera-space z
    channel_values: np.ndarray  # (3,) evaluated SH per coefficient set


@dataclass
class RenderOutput:
    image: np.ndarray       # (3, H, W) in [0, 1]
    alpha_map: np.ndarray   # (H, W) accumulated opacity in [0, 1]
    depth_map: np.ndarray   # (H, W) opacity-weighted depth, far where empty
    cache: "_RasterCache | None" = None


@dataclass
class SceneGradients:
    """Per-primitive gradients, indexed like the scene arrays.

    Deformation gradients are None for static renders.
    """

    positions: np.ndarray       # (N, 3)
    quaternions: np.ndarray     # (N, 4)
    log_scales: np.ndarray      # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    sh: np.ndarray              # (3, N, K)
    d_mu: np.ndarray | None = None
    d_q: np.ndarray | None = None
    d_s: np.ndarray | None = None


@dataclass
class _RasterCache:
    scene: Scene
    cam: Camera
    t: float | None
    idx: np.ndarray          # (M,) original indices of composited splats, sorted order
    bounds: np.ndarray       # (M, 4) y0, y1, x0, x1
    alpha_patches: list      # (h, w) alpha' per splat (after skip/cap)
    trans_patches: list      # (h, w) transmittance in front of the splat
    mean2d: np.ndarray       # (M, 2)
    lam: np.ndarray          # (M, 2, 2) cov2d inverse
    j: np.ndarray            # (M, 2, 3)
    p_cam: np.ndarray        # (M, 3)
    cov_world: np.ndarray    # (M, 3, 3)
    m_mat: np.ndarray        # (M, 3, 3) rotation times diag(scale)
    rot: np.ndarray          # (M, 3, 3)
    scales: np.ndarray       # (M, 3)
    q_unit: np.ndarray       # (M, 4)
    q_norm: np.ndarray       # (M,)
    alphas: np.ndarray       # (M,)
    dirs: np.ndarray         # (M, 3) unit view directions
    vnorm: np.ndarray        # (M,)
    basis: np.ndarray        # (M, K)
    dots: np.ndarray         # (3, M) pre-clamp channel values
    values: np.ndarray       # (3, M) clamped channel values
    depths: np.ndarray       # (M,)
    t_final: np.ndarray      # (H, W)
    bg_planes: np.ndarray    # (3,)
    tpow: np.ndarray | None  # (P,) deformation time powers


def _deformed_arrays(scene: Scene, t: float | None):
    """Scene parameter arrays at time t, with the raw (pre-normalization)
    quaternions and the time-power vector needed by the backward pass."""
    if t is None:
        return scene.positions, scene.quaternions, scene.log_scales, None
    tp = time_powers(t, scene.deformation.degree)
    pos = scene.positions + np.einsum("p,npk->nk", tp, scene.deformation.d_mu)
    q_raw = scene.quaternions + np.einsum("p,npk->nk", tp, scene.deformation.d_q)
    log_s = scene.log_scales + np.einsum("p,npk->nk", tp, scene.deformation.d_s)
    return pos, q_raw, log_s, tp


def _rotations_from_raw(q_raw: np.ndarray):
    """Unit quaternions, their norms, and rotation matrices."""
    norms = np.linalg.norm(q_raw, axis=-1)
    if np.any(norms == 0.0):
        raise ValueError("rasterizer: quaternion with zero norm")
    q_unit = q_raw / norms[:, None]
    w, x, y, z = q_unit[:, 0], q_unit[:, 1], q_unit[:, 2], q_unit[:, 3]
    rot = np.empty((q_raw.shape[0], 3, 3))
    rot[:, 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    rot[:, 0, 1] = 2.0 * (x * y - w * z)
    rot[:, 0, 2] = 2.0 * (x * z + w * y)
    rot[:, 1, 0] = 2.0 * (x * y + w * z)
    rot[:, 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    rot[:, 1, 2] = 2.0 * (y * z - w * x)
    rot[:, 2, 0] = 2.0 * (x * z - w * y)
    rot[:, 2, 1] = 2.0 * (y * z + w * x)
    rot[:, 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return q_unit, norms, rot


def _project_core(positions, q_raw, log_scales, cam: Camera):
    """Vectorized EWA projection of all primitives.

    Returns per-primitive geometry plus a visibility mask (depth and
    footprint culling combined).
    """
    n = positions.shape[0]
    p_cam = positions @ cam.rotation.T + cam.translation
    depth = p_cam[:, 2]
    visible = depth > cam.near

    z = np.where(visible, depth, 1.0)  # placeholder depth avoids div warnings
    mean2d = np.empty((n, 2))
    mean2d[:, 0] = cam.fx * p_cam[:, 0] / z + cam.cx
    mean2d[:, 1] = cam.fy * p_cam[:, 1] / z + cam.cy

    j = np.zeros((n, 2, 3))
    j[:, 0, 0] = cam.fx / z
    j[:, 0, 2] = -cam.fx * p_cam[:, 0] / z**2
    j[:, 1, 1] = cam.fy / z
    j[:, 1, 2] = -cam.fy * p_cam[:, 1] / z**2

    q_unit, q_norm, rot = _rotations_from_raw(q_raw)
    scales = np.exp(log_scales)
    m_mat = rot * scales[:, None, :]
    cov_world = m_mat @ m_mat.transpose(0, 2, 1)
    jw = j @ cam.rotation
    cov2d = jw @ cov_world @ jw.transpose(0, 2, 1)
    cov2d[:, 0, 0] += BLUR_FLOOR
    cov2d[:, 1, 1] += BLUR_FLOOR

    # 3-sigma footprint from the dominant eigenvalue
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = _FOOTPRINT_SIGMAS * np.sqrt(mid + disc)

    x0 = np.maximum(np.floor(mean2d[:, 0] - radius), 0.0).astype(int)
    x1 = np.minimum(np.floor(mean2d[:, 0] + radius) + 1, cam.width).astype(int)
    y0 = np.maximum(np.floor(mean2d[:, 1] - radius), 0.0).astype(int)
    y1 = np.minimum(np.floor(mean2d[:, 1] + radius) + 1, cam.height).astype(int)
    visible &= (x0 < x1) & (y0 < y1)
    bounds = np.stack([y0, y1, x0, x1], axis=1)

    return {
        "p_cam": p_cam,
        "depth": depth,
        "mean2d": mean2d,
        "j": j,
        "q_unit": q_unit,
        "q_norm": q_norm,
        "rot": rot,
        "scales": scales,
        "m_mat": m_mat,
        "cov_world": cov_world,
        "cov2d": cov2d,
        "bounds": bounds,
        "visible": visible,
    }


def _channel_values(scene: Scene, positions, cam: Camera, subset: np.ndarray):
    """Per-set SH evaluation at the camera-to-primitive directions."""
    v = positions[subset] - cam.position
    vnorm = np.linalg.norm(v, axis=1)
    vnorm = np.where(vnorm == 0.0, 1.0, vnorm)
    dirs = v / vnorm[:, None]
    basis = sh_basis(scene.sh_degree, dirs)
    dots = np.einsum("mk,smk->sm", basis, scene.sh[:, subset]) + 0.5
    values = np.clip(dots, 0.0, 1.0)
    return dirs, vnorm, basis, dots, values


def _background_planes(scene: Scene) -> np.ndarray:
    if scene.assignment is ChannelAssignment.WARM_UP:
        return np.full(3, scene.background[0])
    return scene.background.copy()


def project(g: GaussianPrimitive, cam: Camera) -> SplatProjection | None:
    """Screen-space footprint of a single primitive, or None when culled."""
    core = _project_core(g.mu[None], g.q[None], g.log_s[None], cam)
    if not core["visible"][0]:
        return None
    v = g.mu - cam.position
    vn = np.linalg.norm(v)
    d = v / vn if vn > 0 else np.array([0.0, 0.0, 1.0])
    basis = sh_basis(g.sh_degree, d)
    values = np.clip(
        np.array([basis @ g.sh_set_0, basis @ g.sh_set_1, basis @ g.sh_set_2]) + 0.5,
        0.0,
        1.0,
    )
    return SplatProjection(
        mean2d=core["mean2d"][0],
        cov2d=core["cov2d"][0],
        depth=float(core["depth"][0]),
        channel_values=values,
    )


def _check_time(scene: Scene, t: float | None) -> None:
    if t is not None:
        if not scene.is_dynamic:
            raise ValueError("rasterize: time given for a static scene")
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"rasterize: t must lie in [0, 1], got {t}")
    elif scene.is_dynamic:
        raise ValueError("rasterize: dynamic scene requires a render time")


def rasterize(
    scene: Scene,
    cam: Camera,
    t: float | None = None,
    keep_cache: bool = False,
    tile_size: int | None = None,
) -> RenderOutput:
    """Composite a scene into a 3-plane image, alpha map, and depth map.

    `tile_size` runs the same per-pixel math over independent image tiles
    (the result is identical to the untiled path); tiling cannot be
    combined with `keep_cache`.
    """
    _check_time(scene, t)
    if tile_size is not None:
        if keep_cache:
            raise ValueError("rasterize: tiled rendering does not keep a backward cache")
        return _rasterize_tiled(scene, cam, t, tile_size)

    h, w = cam.height, cam.width
    bg_planes = _background_planes(scene)
    positions, q_raw, log_scales, tpow = _deformed_arrays(scene, t)
    core = _project_core(positions, q_raw, log_scales, cam)
    valid = np.flatnonzero(core["visible"])

    t_img = np.ones((h, w))
    acc = np.zeros((3, h, w))
    depth_acc = np.zeros((h, w))

    if valid.size:
        dirs, vnorm, basis, dots, values = _channel_values(scene, positions, cam, valid)
        depths = core["depth"][valid]
        order = np.lexsort((valid, depths))  # front-to-back, ties by index
        lam = np.linalg.inv(core["cov2d"][valid])

        alphas_all = expit(scene.opacity_logits[valid])
        xs = np.arange(w, dtype=np.float64)
        ys = np.arange(h, dtype=np.float64)
        alpha_patches = [None] * order.size
        trans_patches = [None] * order.size

        mean2d_v = core["mean2d"][valid]
        bounds_v = core["bounds"][valid]
        for rank, m in enumerate(order):
            y0, y1, x0, x1 = bounds_v[m]
            dx = xs[x0:x1] - mean2d_v[m, 0]
            dy = ys[y0:y1] - mean2d_v[m, 1]
            l00, l01, l11 = lam[m, 0, 0], lam[m, 0, 1], lam[m, 1, 1]
            qf = (
                l00 * dx[None, :] ** 2
                + 2.0 * l01 * dy[:, None] * dx[None, :]
                + l11 * dy[:, None] ** 2
            )
            ap = alphas_all[m] * np.exp(-0.5 * qf)
            ap[ap < _ALPHA_SKIP] = 0.0
            np.minimum(ap, _ALPHA_CAP, out=ap)
            tp = t_img[y0:y1, x0:x1].copy()
            wgt = ap * tp
            acc[:, y0:y1, x0:x1] += values[:, m][:, None, None] * wgt[None]
            depth_acc[y0:y1, x0:x1] += depths[m] * wgt
            t_img[y0:y1, x0:x1] = tp * (1.0 - ap)
            if keep_cache:
                alpha_patches[rank] = ap
                trans_patches[rank] = tp

    image = acc + bg_planes[:, None, None] * t_img
    depth_map = depth_acc + cam.far * t_img
    out = RenderOutput(image=image, alpha_map=1.0 - t_img, depth_map=depth_map)
    if keep_cache:
        if valid.size:
            out.cache = _RasterCache(
                scene=scene, cam=cam, t=t,
                idx=valid[order], bounds=bounds_v[order],
                alpha_patches=alpha_patches, trans_patches=trans_patches,
                mean2d=mean2d_v[order], lam=lam[order], j=core["j"][valid][order],
                p_cam=core["p_cam"][valid][order],
                cov_world=core["cov_world"][valid][order],
                m_mat=core["m_mat"][valid][order], rot=core["rot"][valid][order],
                scales=core["scales"][valid][order],
                q_unit=core["q_unit"][valid][order], q_norm=core["q_norm"][valid][order],
                alphas=alphas_all[order],
                dirs=dirs[order], vnorm=vnorm[order], basis=basis[order],
                dots=dots[:, order], values=values[:, order], depths=depths[order],
                t_final=t_img, bg_planes=bg_planes, tpow=tpow,
            )
        else:
            out.cache = _RasterCache(
                scene=scene, cam=cam, t=t,
                idx=np.zeros(0, dtype=int), bounds=np.zeros((0, 4), dtype=int),
                alpha_patches=[], trans_patches=[],
                mean2d=np.zeros((0, 2)), lam=np.zeros((0, 2, 2)), j=np.zeros((0, 2, 3)),
                p_cam=np.zeros((0, 3)), cov_world=np.zeros((0, 3, 3)),
                m_mat=np.zeros((0, 3, 3)), rot=np.zeros((0, 3, 3)),
                scales=np.zeros((0, 3)), q_unit=np.zeros((0, 4)), q_norm=np.zeros(0),
                alphas=np.zeros(0), dirs=np.zeros((0, 3)), vnorm=np.zeros(0),
                basis=np.zeros((0, (scene.sh_degree + 1) ** 2)),
                dots=np.zeros((3, 0)), values=np.zeros((3, 0)), depths=np.zeros(0),
                t_final=t_img, bg_planes=bg_planes, tpow=tpow,
            )
    return out


def _rasterize_tiled(scene: Scene, cam: Camera, t: float | None, tile_size: int) -> RenderOutput:
    if tile_size < 1:
        raise ValueError(f"rasterize: tile_size must be >= 1, got {tile_size}")
    h, w = cam.height, cam.width
    bg_planes = _background_planes(scene)
    positions, q_raw, log_scales, _ = _deformed_arrays(scene, t)
    core = _project_core(positions, q_raw, log_scales, cam)
    valid = np.flatnonzero(core["visible"])

    image = np.empty((3, h, w))
    alpha = np.empty((h, w))
    depth_map = np.empty((h, w))
    if valid.size:
        _, _, _, _, values = _channel_values(scene, positions, cam, valid)
        depths = core["depth"][valid]
        order = np.lexsort((valid, depths))
        lam = np.linalg.inv(core["cov2d"][valid])
        alphas_all = expit(scene.opacity_logits[valid])
        mean2d_v = core["mean2d"][valid]
        bounds_v = core["bounds"][valid]
        xs = np.arange(w, dtype=np.float64)
        ys = np.arange(h, dtype=np.float64)

    for ty in range(0, h, tile_size):
        for tx in range(0, w, tile_size):
            ty1, tx1 = min(ty + tile_size, h), min(tx + tile_size, w)
            t_tile = np.ones((ty1 - ty, tx1 - tx))
            acc = np.zeros((3, ty1 - ty, tx1 - tx))
            dep = np.zeros((ty1 - ty, tx1 - tx))
            if valid.size:
                for m in order:
                    y0, y1, x0, x1 = bounds_v[m]
                    y0, y1 = max(y0, ty), min(y1, ty1)
                    x0, x1 = max(x0, tx), min(x1, tx1)
                    if y0 >= y1 or x0 >= x1:
                        continue
                    dx = xs[x0:x1] - mean2d_v[m, 0]
                    dy = ys[y0:y1] - mean2d_v[m, 1]
                    l00, l01, l11 = lam[m, 0, 0], lam[m, 0, 1], lam[m, 1, 1]
                    qf = (
                        l00 * dx[None, :] ** 2
                        + 2.0 * l01 * dy[:, None] * dx[None, :]
                        + l11 * dy[:, None] ** 2
                    )
                    ap = alphas_all[m] * np.exp(-0.5 * qf)
                    ap[ap < _ALPHA_SKIP] = 0.0
                    np.minimum(ap, _ALPHA_CAP, out=ap)
                    sl = (slice(y0 - ty, y1 - ty), slice(x0 - tx, x1 - tx))
                    tp = t_tile[sl].copy()
                    wgt = ap * tp
                    acc[(slice(None),) + sl] += values[:, m][:, None, None] * wgt[None]
                    dep[sl] += depths[m] * wgt
                    t_tile[sl] = tp * (1.0 - ap)
            image[:, ty:ty1, tx:tx1] = acc + bg_planes[:, None, None] * t_tile
            alpha[ty:ty1, tx:tx1] = 1.0 - t_tile
            depth_map[ty:ty1, tx:tx1] = dep + cam.far * t_tile
    return RenderOutput(image=image, alpha_map=alpha, depth_map=depth_map)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _rotation_partials(q_unit: np.ndarray) -> np.ndarray:
    """d(rotation matrix)/d(unit quaternion), shape (M, 4, 3, 3)."""
    w, x, y, z = q_unit[:, 0], q_unit[:, 1], q_unit[:, 2], q_unit[:, 3]
    m = q_unit.shape[0]
    p = np.zeros((m, 4, 3, 3))
    zero = np.zeros_like(w)
    p[:, 0] = 2.0 * np.stack(
        [zero, -z, y, z, zero, -x, -y, x, zero], axis=1
    ).reshape(m, 3, 3)
    p[:, 1] = 2.0 * np.stack(
        [zero, y, z, y, -2.0 * x, -w, z, w, -2.0 * x], axis=1
    ).reshape(m, 3, 3)
    p[:, 2] = 2.0 * np.stack(
        [-2.0 * y, x, w, x, zero, z, -w, z, -2.0 * y], axis=1
    ).reshape(m, 3, 3)
    p[:, 3] = 2.0 * np.stack(
        [-2.0 * z, -w, x, w, -2.0 * z, y, x, y, zero], axis=1
    ).reshape(m, 3, 3)
    return p


def rasterize_backward(
    scene: Scene,
    cam: Camera,
    t: float | None,
    upstream_grad: np.ndarray,
    cache: _RasterCache,
) -> SceneGradients:
    """Gradients of sum(upstream_grad * image) w.r.t. scene parameters.

    `cache` must come from `rasterize(..., keep_cache=True)` on the same
    scene, camera, and time; the alpha map and depth map outputs are not
    differentiated.
    """
    if cache is None or cache.scene is not scene or cache.cam is not cam or cache.t != t:
        raise ValueError("rasterize_backward: cache does not match this scene/camera/time")
    g_up = np.asarray(upstream_grad, dtype=np.float64)
    h, w = cam.height, cam.width
    if g_up.shape != (3, h, w):
        raise ValueError(f"rasterize_backward: upstream grad must be (3, {h}, {w}), got {g_up.shape}")

    n = scene.n
    k = (scene.sh_degree + 1) ** 2
    grads = SceneGradients(
        positions=np.zeros((n, 3)),
        quaternions=np.zeros((n, 4)),
        log_scales=np.zeros((n, 3)),
        opacity_logits=np.zeros((n,)),
        sh=np.zeros((3, n, k)),
    )
    if scene.is_dynamic:
        grads.d_mu = np.zeros_like(scene.deformation.d_mu)
        grads.d_q = np.zeros_like(scene.deformation.d_q)
        grads.d_s = np.zeros_like(scene.deformation.d_s)
    m_count = cache.idx.size
    if m_count == 0:
        return grads

    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)

    # pixel pass, back to front: suffix S holds everything composited behind
    suffix = cache.bg_planes[:, None, None] * cache.t_final
    d_vals = np.zeros((3, m_count))
    d_alpha = np.zeros(m_count)
    d_mean2d = np.zeros((m_count, 2))
    d_lam = np.zeros((m_count, 2, 2))
    for rank in range(m_count - 1, -1, -1):
        y0, y1, x0, x1 = cache.bounds[rank]
        ap = cache.alpha_patches[rank]
        tp = cache.trans_patches[rank]
        gp = g_up[:, y0:y1, x0:x1]
        wgt = ap * tp
        vals = cache.values[:, rank]
        d_vals[:, rank] = np.einsum("chw,hw->c", gp, wgt)

        s_patch = suffix[:, y0:y1, x0:x1]
        live = ap > 0.0
        one_m = 1.0 - ap
        d_ap = np.einsum("c,chw->hw", vals, gp) * tp - np.einsum("chw,chw->hw", gp, s_patch) / one_m
        d_ap[~live] = 0.0
        d_ap[ap >= _ALPHA_CAP] = 0.0
        suffix[:, y0:y1, x0:x1] += vals[:, None, None] * wgt[None]

        a_i = cache.alphas[rank]
        gauss = ap / a_i if a_i > 0.0 else np.zeros_like(ap)
        d_alpha[rank] = float(np.sum(d_ap * gauss))
        d_gauss = d_ap * cache.alphas[rank]
        d_qf = -0.5 * gauss * d_gauss
        dx = xs[x0:x1] - cache.mean2d[rank, 0]
        dy = ys[y0:y1] - cache.mean2d[rank, 1]
        dxg = dx[None, :]
        dyg = dy[:, None]
        l00, l01, l11 = cache.lam[rank, 0, 0], cache.lam[rank, 0, 1], cache.lam[rank, 1, 1]
        d_lam[rank, 0, 0] = float(np.sum(d_qf * dxg * dxg))
        off = float(np.sum(d_qf * dxg * dyg))
        d_lam[rank, 0, 1] = off
        d_lam[rank, 1, 0] = off
        d_lam[rank, 1, 1] = float(np.sum(d_qf * dyg * dyg))
        ddx = d_qf * 2.0 * (l00 * dxg + l01 * dyg)
        ddy = d_qf * 2.0 * (l01 * dxg + l11 * dyg)
        d_mean2d[rank, 0] = -float(np.sum(ddx))
        d_mean2d[rank, 1] = -float(np.sum(ddy))

    # opacity logits
    sig_grad = d_alpha * cache.alphas * (1.0 - cache.alphas)

    # SH coefficients and the view-direction path
    interior = (cache.dots > 0.0) & (cache.dots < 1.0)
    d_dots = d_vals * interior
    d_sh_sets = np.einsum("sm,mk->smk", d_dots, cache.basis)
    bgrad = sh_basis_grad(scene.sh_degree, cache.dirs)     # (M, K, 3)
    coeff_dirs = np.einsum("mkd,smk->smd", bgrad, scene.sh[:, cache.idx])
    d_dir = np.einsum("sm,smd->md", d_dots, coeff_dirs)
    d_v = (d_dir - np.einsum("md,md->m", d_dir, cache.dirs)[:, None] * cache.dirs) / cache.vnorm[:, None]

    # cov2d chain: lam = inv(cov2d)
    d_cov2d = -cache.lam @ d_lam @ cache.lam
    jw = cache.j @ cam.rotation
    d_jw = 2.0 * d_cov2d @ jw @ cache.cov_world
    d_cov_world = jw.transpose(0, 2, 1) @ d_cov2d @ jw
    d_j = d_jw @ cam.rotation.T
    d_m = 2.0 * d_cov_world @ cache.m_mat
    d_rot = d_m * cache.scales[:, None, :]
    d_scales = np.einsum("mij,mij->mj", cache.rot, d_m)
    d_log_s = d_scales * cache.scales

    # rotation -> quaternion (with normalization chain)
    partials = _rotation_partials(cache.q_unit)
    d_q_unit = np.einsum("mqij,mij->mq", partials, d_rot)
    d_q_raw = (
        d_q_unit - np.einsum("mq,mq->m", d_q_unit, cache.q_unit)[:, None] * cache.q_unit
    ) / cache.q_norm[:, None]

    # projection chain: mean2d and J both depend on p_cam
    px, py, pz = cache.p_cam[:, 0], cache.p_cam[:, 1], cache.p_cam[:, 2]
    d_p = np.zeros((m_count, 3))
    d_p[:, 0] = cam.fx / pz * d_mean2d[:, 0] + d_j[:, 0, 2] * (-cam.fx / pz**2)
    d_p[:, 1] = cam.fy / pz * d_mean2d[:, 1] + d_j[:, 1, 2] * (-cam.fy / pz**2)
    d_p[:, 2] = (
        -cam.fx * px / pz**2 * d_mean2d[:, 0]
        - cam.fy * py / pz**2 * d_mean2d[:, 1]
        + d_j[:, 0, 0] * (-cam.fx / pz**2)
        + d_j[:, 1, 1] * (-cam.fy / pz**2)
        + d_j[:, 0, 2] * (2.0 * cam.fx * px / pz**3)
        + d_j[:, 1, 2] * (2.0 * cam.fy * py / pz**3)
    )
    d_pos = d_p @ cam.rotation + d_v  # world-space position gradient

    # scatter back to original primitive rows
    idx = cache.idx
    np.add.at(grads.positions, idx, d_pos)
    np.add.at(grads.quaternions, idx, d_q_raw)
    np.add.at(grads.log_scales, idx, d_log_s)
    np.add.at(grads.opacity_logits, idx, sig_grad)
    for s in range(3):
        np.add.at(grads.sh[s], idx, d_sh_sets[s])
    if scene.is_dynamic and cache.tpow is not None:
        np.add.at(grads.d_mu, idx, cache.tpow[None, :, None] * d_pos[:, None, :])
        np.add.at(grads.d_q, idx, cache.tpow[None, :, None] * d_q_raw[:, None, :])
        np.add.at(grads.d_s, idx, cache.tpow[None, :, None] * d_log_s[:, None, :])
    return grads
