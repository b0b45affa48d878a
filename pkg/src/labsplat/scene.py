"""Lab-space Gaussian scene representation.

A scene is a set of anisotropic 3D Gaussians, each carrying a position,
an orientation quaternion, per-axis log-scales, an opacity logit, and three
spherical-harmonic coefficient sets. What the three sets mean depends on the
scene's channel assignment: during warm-up all three render the luminance
plane; after the one-way switch to full color they render L', a', b'.

Dynamic scenes add a per-Gaussian polynomial deformation field over
normalized time t in [0, 1]: position and rotation offsets are additive,
scale offsets act in log-space. The polynomial has no constant term, so
zero time or all-zero coefficients leave the primitive untouched.

Scenes store their primitives as structure-of-arrays (the training loop
updates the arrays in place); :class:`GaussianPrimitive` is the per-record
view used for construction, inspection, and serialization.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SH_C0",
    "AB_NEUTRAL",
    "ChannelAssignment",
    "GaussianPrimitive",
    "DeformationField",
    "Camera",
    "Scene",
    "sh_basis",
    "sh_basis_grad",
    "eval_sh",
    "constant_sh_coefficient",
    "quaternion_rotations",
    "covariance_from",
    "time_powers",
    "deform",
    "switch_to_full_color",
    "save_scene",
    "load_scene",
]

# Real spherical harmonics, all-positive convention, flat index l*(l+1)+m.
SH_C0 = 0.28209479177387814
_SH_C1 = 0.4886025119029199
_SH_C2 = (1.0925484305920792, 0.31539156525252005, 0.5462742152960396)
_SH_C3 = (
    0.5900435899266435,
    2.890611442640554,
    0.4570457994644658,
    0.3731763325901154,
    1.445305721320277,
)

AB_NEUTRAL = 128.0 / 255.0

_VALID_SH_LENGTHS = {1: 0, 4: 1, 9: 2, 16: 3}


class ChannelAssignment(enum.Enum):
    """What the three SH sets of a scene render.

    WARM_UP: all three sets produce the luminance plane. FULL_LAB: sets
    0, 1, 2 produce L', a', b'. The only legal transition is
    WARM_UP -> FULL_LAB, once, via :func:`switch_to_full_color`.
    """

    WARM_UP = "warm_up"
    FULL_LAB = "full_lab"


# ---------------------------------------------------------------------------
# spherical harmonics
# ---------------------------------------------------------------------------

def sh_basis(degree: int, dirs: np.ndarray) -> np.ndarray:
    """Real SH basis values for unit directions, shape (..., (degree+1)^2)."""
    if not 0 <= degree <= 3:
        raise ValueError(f"sh_basis: degree must be 0..3, got {degree}")
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    k = (degree + 1) ** 2
    out = np.empty(dirs.shape[:-1] + (k,))
    out[..., 0] = SH_C0
    if degree >= 1:
        out[..., 1] = _SH_C1 * y
        out[..., 2] = _SH_C1 * z
        out[..., 3] = _SH_C1 * x
    if degree >= 2:
        c20, c21, c22 = _SH_C2
        xx, yy, zz = x * x, y * y, z * z
        out[..., 4] = c20 * x * y
        out[..., 5] = c20 * y * z
        out[..., 6] = c21 * (2.0 * zz - xx - yy)
        out[..., 7] = c20 * x * z
        out[..., 8] = c22 * (xx - yy)
    if degree >= 3:
        c30, c31, c32, c33, c34 = _SH_C3
        out[..., 9] = c30 * y * (3.0 * xx - yy)
        out[..., 10] = c31 * x * y * z
        out[..., 11] = c32 * y * (4.0 * zz - xx - yy)
        out[..., 12] = c33 * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[..., 13] = c32 * x * (4.0 * zz - xx - yy)
        out[..., 14] = c34 * z * (xx - yy)
        out[..., 15] = c30 * x * (xx - 3.0 * yy)
    return out


def sh_basis_grad(degree: int, dirs: np.ndarray) -> np.ndarray:
    """Partials of each basis value w.r.t. the direction, (..., K, 3)."""
    if not 0 <= degree <= 3:
        raise ValueError(f"sh_basis_grad: degree must be 0..3, got {degree}")
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    k = (degree + 1) ** 2
    out = np.zeros(dirs.shape[:-1] + (k, 3))
    if degree >= 1:
        out[..., 1, 1] = _SH_C1
        out[..., 2, 2] = _SH_C1
        out[..., 3, 0] = _SH_C1
    if degree >= 2:
        c20, c21, c22 = _SH_C2
        out[..., 4, 0] = c20 * y
        out[..., 4, 1] = c20 * x
        out[..., 5, 1] = c20 * z
        out[..., 5, 2] = c20 * y
        out[..., 6, 0] = -2.0 * c21 * x
        out[..., 6, 1] = -2.0 * c21 * y
        out[..., 6, 2] = 4.0 * c21 * z
        out[..., 7, 0] = c20 * z
        out[..., 7, 2] = c20 * x
        out[..., 8, 0] = 2.0 * c22 * x
        out[..., 8, 1] = -2.0 * c22 * y
    if degree >= 3:
        c30, c31, c32, c33, c34 = _SH_C3
        xx, yy, zz = x * x, y * y, z * z
        out[..., 9, 0] = 6.0 * c30 * x * y
        out[..., 9, 1] = 3.0 * c30 * (xx - yy)
        out[..., 10, 0] = c31 * y * z
        out[..., 10, 1] = c31 * x * z
        out[..., 10, 2] = c31 * x * y
        out[..., 11, 0] = -2.0 * c32 * x * y
        out[..., 11, 1] = c32 * (4.0 * zz - xx - 3.0 * yy)
        out[..., 11, 2] = 8.0 * c32 * y * z
        out[..., 12, 0] = -6.0 * c33 * x * z
        out[..., 12, 1] = -6.0 * c33 * y * z
        out[..., 12, 2] = c33 * (6.0 * zz - 3.0 * xx - 3.0 * yy)
        out[..., 13, 0] = c32 * (4.0 * zz - 3.0 * xx - yy)
        out[..., 13, 1] = -2.0 * c32 * x * y
        out[..., 13, 2] = 8.0 * c32 * x * z
        out[..., 14, 0] = 2.0 * c34 * x * z
        out[..., 14, 1] = -2.0 * c34 * y * z
        out[..., 14, 2] = c34 * (xx - yy)
        out[..., 15, 0] = 3.0 * c30 * (xx - yy)
        out[..., 15, 1] = -6.0 * c30 * x * y
    return out


def eval_sh(coeffs: np.ndarray, view_dir: np.ndarray) -> float:
    """Channel value clamp(basis . coeffs + 0.5, 0, 1) at a unit direction."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.ndim != 1 or coeffs.size not in _VALID_SH_LENGTHS:
        raise ValueError(f"eval_sh: coefficient vector length must be 1, 4, 9, or 16, got shape {coeffs.shape}")
    degree = _VALID_SH_LENGTHS[coeffs.size]
    basis = sh_basis(degree, np.asarray(view_dir, dtype=np.float64))
    return float(np.clip(basis @ coeffs + 0.5, 0.0, 1.0))


def constant_sh_coefficient(value: float) -> float:
    """Degree-0 coefficient whose eval_sh equals `value` at any direction."""
    return (value - 0.5) / SH_C0


# ---------------------------------------------------------------------------
# rotations and covariance
# ---------------------------------------------------------------------------

def quaternion_rotations(q: np.ndarray) -> np.ndarray:
    """Rotation matrices of scalar-first unit quaternions, (..., 4) -> (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    r[..., 0, 1] = 2.0 * (x * y - w * z)
    r[..., 0, 2] = 2.0 * (x * z + w * y)
    r[..., 1, 0] = 2.0 * (x * y + w * z)
    r[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    r[..., 1, 2] = 2.0 * (y * z - w * x)
    r[..., 2, 0] = 2.0 * (x * z - w * y)
    r[..., 2, 1] = 2.0 * (y * z + w * x)
    r[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return r


def covariance_from(q: np.ndarray, s: np.ndarray) -> np.ndarray:
    """World-space covariance R diag(s)^2 R^T of one Gaussian."""
    rot = quaternion_rotations(np.asarray(q, dtype=np.float64))
    m = rot * np.asarray(s, dtype=np.float64)[None, :]
    cov = m @ m.T
    return 0.5 * (cov + cov.T)


def _normalize_quaternion(q: np.ndarray) -> np.ndarray:
    nsq = float(q @ q)
    if nsq <= 0.0 or not math.isfinite(nsq):
        raise ValueError("quaternion has non-positive or non-finite norm")
    if abs(nsq - 1.0) <= 1e-12:
        return q
    return q / math.sqrt(nsq)


# ---------------------------------------------------------------------------
# domain records
# ---------------------------------------------------------------------------

@dataclass
class GaussianPrimitive:
    """One anisotropic Gaussian.

    `q` is scalar-first and is renormalized at construction if its norm has
    drifted; `log_s` stores log-scales (exp gives strictly positive scales);
    `alpha_logit` stores the pre-sigmoid opacity.
    """

    mu: np.ndarray
    q: np.ndarray
    log_s: np.ndarray
    alpha_logit: float
    sh_set_0: np.ndarray
    sh_set_1: np.ndarray
    sh_set_2: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.q = np.asarray(self.q, dtype=np.float64)
        self.log_s = np.asarray(self.log_s, dtype=np.float64)
        self.alpha_logit = float(self.alpha_logit)
        self.sh_set_0 = np.asarray(self.sh_set_0, dtype=np.float64)
        self.sh_set_1 = np.asarray(self.sh_set_1, dtype=np.float64)
        self.sh_set_2 = np.asarray(self.sh_set_2, dtype=np.float64)
        if self.mu.shape != (3,):
            raise ValueError(f"GaussianPrimitive: mu must have shape (3,), got {self.mu.shape}")
        if self.q.shape != (4,):
            raise ValueError(f"GaussianPrimitive: q must have shape (4,), got {self.q.shape}")
        if self.log_s.shape != (3,):
            raise ValueError(f"GaussianPrimitive: log_s must have shape (3,), got {self.log_s.shape}")
        sets = (self.sh_set_0, self.sh_set_1, self.sh_set_2)
        if any(c.ndim != 1 for c in sets) or len({c.size for c in sets}) != 1:
            raise ValueError("GaussianPrimitive: SH sets must be 1-D and share a length")
        if self.sh_set_0.size not in _VALID_SH_LENGTHS:
            raise ValueError(
                f"GaussianPrimitive: SH length must be 1, 4, 9, or 16, got {self.sh_set_0.size}"
            )
        values = np.concatenate([self.mu, self.log_s, [self.alpha_logit], *sets])
        with np.errstate(over="ignore"):
            scales_finite = np.all(np.isfinite(np.exp(self.log_s)))
        if not np.all(np.isfinite(values)) or not scales_finite:
            raise ValueError("GaussianPrimitive: parameters must be finite (including exp(log_s))")
        self.q = _normalize_quaternion(self.q)

    @property
    def s(self) -> np.ndarray:
        return np.exp(self.log_s)

    @property
    def alpha(self) -> float:
        return float(1.0 / (1.0 + math.exp(-self.alpha_logit)))

    @property
    def sh_degree(self) -> int:
        return _VALID_SH_LENGTHS[self.sh_set_0.size]


@dataclass
class DeformationField:
    """Per-Gaussian polynomial offsets over normalized time.

    Coefficient arrays are indexed (gaussian, degree-1, component): the
    polynomial is sum_k c_k t^k for k = 1..degree, so the field vanishes
    identically at t = 0 and whenever all coefficients are zero.
    """

    d_mu: np.ndarray  # (N, P, 3)
    d_q: np.ndarray   # (N, P, 4)
    d_s: np.ndarray   # (N, P, 3)

    def __post_init__(self):
        self.d_mu = np.asarray(self.d_mu, dtype=np.float64)
        self.d_q = np.asarray(self.d_q, dtype=np.float64)
        self.d_s = np.asarray(self.d_s, dtype=np.float64)
        shapes = (self.d_mu.shape, self.d_q.shape, self.d_s.shape)
        if any(len(s) != 3 for s in shapes):
            raise ValueError(f"DeformationField: arrays must be 3-D, got {shapes}")
        if self.d_mu.shape[2] != 3 or self.d_q.shape[2] != 4 or self.d_s.shape[2] != 3:
            raise ValueError(f"DeformationField: component dims must be (3, 4, 3), got {shapes}")
        if len({s[:2] for s in shapes}) != 1:
            raise ValueError(f"DeformationField: arrays disagree on count/degree, got {shapes}")
        if self.degree < 1:
            raise ValueError("DeformationField: polynomial degree must be >= 1")
        if not all(np.all(np.isfinite(a)) for a in (self.d_mu, self.d_q, self.d_s)):
            raise ValueError("DeformationField: coefficients must be finite")

    @property
    def n(self) -> int:
        return self.d_mu.shape[0]

    @property
    def degree(self) -> int:
        return self.d_mu.shape[1]

    @classmethod
    def zeros(cls, n: int, degree: int = 2) -> "DeformationField":
        return cls(np.zeros((n, degree, 3)), np.zeros((n, degree, 4)), np.zeros((n, degree, 3)))


def time_powers(t: float, degree: int) -> np.ndarray:
    """(t^1, ..., t^degree) for the no-constant-term deformation polynomial."""
    return float(t) ** np.arange(1, degree + 1, dtype=np.float64)


@dataclass
class Camera:
    """Pinhole camera with world-to-camera extrinsics.

    A world point p maps to camera space as R @ p + t; pixel coordinates
    are (fx * X/Z + cx, fy * Y/Z + cy) with Z the camera-space depth.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray     # (3, 3) world-to-camera
    translation: np.ndarray  # (3,)
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"Camera: focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"Camera: image size must be >= 1, got {self.width}x{self.height}")
        if not self.near < self.far:
            raise ValueError(f"Camera: near must be < far, got near={self.near} far={self.far}")
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ValueError("Camera: rotation must be (3, 3) and translation (3,)")
        if np.abs(self.rotation @ self.rotation.T - np.eye(3)).max() > 1e-6:
            raise ValueError("Camera: rotation is not orthonormal within 1e-6")

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        """World points (..., 3) into camera space."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation


_DEFAULT_BACKGROUND = (0.0, AB_NEUTRAL, AB_NEUTRAL)


@dataclass
class Scene:
    """Structure-of-arrays Gaussian scene.

    `sh` is (3, N, K): three coefficient sets per primitive. `deformation`
    present iff the scene is dynamic.
    """

    positions: np.ndarray       # (N, 3)
    quaternions: np.ndarray     # (N, 4)
    log_scales: np.ndarray      # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    sh: np.ndarray              # (3, N, K)
    sh_degree: int
    assignment: ChannelAssignment = ChannelAssignment.WARM_UP
    background: np.ndarray = field(default_factory=lambda: np.array(_DEFAULT_BACKGROUND))
    deformation: DeformationField | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.quaternions = np.asarray(self.quaternions, dtype=np.float64)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64)
        self.sh = np.asarray(self.sh, dtype=np.float64)
        self.background = np.asarray(self.background, dtype=np.float64)
        n = self.positions.shape[0]
        k = (self.sh_degree + 1) ** 2
        if self.positions.shape != (n, 3) or self.quaternions.shape != (n, 4):
            raise ValueError("Scene: positions must be (N, 3) and quaternions (N, 4)")
        if self.log_scales.shape != (n, 3) or self.opacity_logits.shape != (n,):
            raise ValueError("Scene: log_scales must be (N, 3) and opacity_logits (N,)")
        if self.sh_degree not in (0, 1, 2, 3) or self.sh.shape != (3, n, k):
            raise ValueError(
                f"Scene: sh must have shape (3, {n}, {k}) for degree {self.sh_degree}, got {self.sh.shape}"
            )
        if self.background.shape != (3,) or np.any(self.background < 0) or np.any(self.background > 1):
            raise ValueError("Scene: background must be a normalized Lab triple in [0, 1]")
        if self.deformation is not None and self.deformation.n != n:
            raise ValueError(
                f"Scene: deformation covers {self.deformation.n} primitives, scene has {n}"
            )

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def is_dynamic(self) -> bool:
        return self.deformation is not None

    @property
    def primitives(self) -> list[GaussianPrimitive]:
        return [self.primitive(i) for i in range(self.n)]

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            mu=self.positions[i].copy(),
            q=self.quaternions[i].copy(),
            log_s=self.log_scales[i].copy(),
            alpha_logit=float(self.opacity_logits[i]),
            sh_set_0=self.sh[0, i].copy(),
            sh_set_1=self.sh[1, i].copy(),
            sh_set_2=self.sh[2, i].copy(),
        )

    @classmethod
    def from_primitives(
        cls,
        prims: list[GaussianPrimitive],
        sh_degree: int | None = None,
        assignment: ChannelAssignment = ChannelAssignment.WARM_UP,
        background=None,
        deformation: DeformationField | None = None,
    ) -> "Scene":
        if not prims and sh_degree is None:
            raise ValueError("Scene.from_primitives: sh_degree required for an empty scene")
        degree = sh_degree if sh_degree is not None else prims[0].sh_degree
        k = (degree + 1) ** 2
        if any(p.sh_set_0.size != k for p in prims):
            raise ValueError("Scene.from_primitives: primitives disagree on SH degree")
        n = len(prims)
        return cls(
            positions=np.array([p.mu for p in prims]).reshape(n, 3),
            quaternions=np.array([p.q for p in prims]).reshape(n, 4),
            log_scales=np.array([p.log_s for p in prims]).reshape(n, 3),
            opacity_logits=np.array([p.alpha_logit for p in prims]).reshape(n),
            sh=np.stack(
                [
                    np.array([p.sh_set_0 for p in prims]).reshape(n, k),
                    np.array([p.sh_set_1 for p in prims]).reshape(n, k),
                    np.array([p.sh_set_2 for p in prims]).reshape(n, k),
                ]
            ),
            sh_degree=degree,
            assignment=assignment,
            background=np.array(_DEFAULT_BACKGROUND) if background is None else background,
            deformation=deformation,
        )

    def renormalize_quaternions(self) -> None:
        """Rescale quaternion rows to unit norm (call after parameter updates)."""
        norms = np.linalg.norm(self.quaternions, axis=1, keepdims=True)
        if np.any(norms == 0.0) or not np.all(np.isfinite(norms)):
            raise ValueError("Scene: quaternion with zero or non-finite norm")
        self.quaternions /= norms


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def deform(g: GaussianPrimitive, field: DeformationField, t: float, index: int = 0) -> GaussianPrimitive:
    """Primitive at normalized time t; opacity and SH are never deformed.

    `index` selects the primitive's coefficient row in the field (0 for a
    single-primitive field).
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"deform: t must lie in [0, 1], got {t}")
    if not 0 <= index < field.n:
        raise ValueError(f"deform: index {index} out of range for field of {field.n}")
    tp = time_powers(t, field.degree)
    return GaussianPrimitive(
        mu=g.mu + tp @ field.d_mu[index],
        q=g.q + tp @ field.d_q[index],
        log_s=g.log_s + tp @ field.d_s[index],
        alpha_logit=g.alpha_logit,
        sh_set_0=g.sh_set_0.copy(),
        sh_set_1=g.sh_set_1.copy(),
        sh_set_2=g.sh_set_2.copy(),
    )


def switch_to_full_color(scene: Scene) -> None:
    """One-way WarmUp -> FullLab transition.

    Keeps SH set 0 (luminance) bit-identical and resets sets 1 and 2 to
    neutral chroma: degree-0 coefficient giving a' = b' = 128/255, higher
    orders zeroed.
    """
    if scene.assignment is ChannelAssignment.FULL_LAB:
        raise ValueError("switch_to_full_color: scene is already in FullLab mode")
    scene.sh[1] = 0.0
    scene.sh[2] = 0.0
    scene.sh[1, :, 0] = constant_sh_coefficient(AB_NEUTRAL)
    scene.sh[2, :, 0] = constant_sh_coefficient(AB_NEUTRAL)
    scene.assignment = ChannelAssignment.FULL_LAB


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_SCENE_MAGIC = "labsplat-scene"
_SCENE_VERSION = 1


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def save_scene(scene: Scene, path) -> None:
    """Write a scene as structured text, 9 significant digits per value.

    Layout: header lines `labsplat-scene 1`, `sh_degree d`, `mode m`,
    `background l a b`, `deformation_degree p|none`, `primitives n`; then
    one line per primitive: mu(3) q(4) log_s(3) alpha_logit sh0(K) sh1(K)
    sh2(K), followed for dynamic scenes by d_mu(P*3) d_q(P*4) d_s(P*3) in
    degree-major order.
    """
    lines = [
        f"{_SCENE_MAGIC} {_SCENE_VERSION}",
        f"sh_degree {scene.sh_degree}",
        f"mode {scene.assignment.value}",
        "background " + " ".join(_fmt(v) for v in scene.background),
        f"deformation_degree {scene.deformation.degree if scene.is_dynamic else 'none'}",
        f"primitives {scene.n}",
    ]
    for i in range(scene.n):
        vals = [
            *scene.positions[i],
            *scene.quaternions[i],
            *scene.log_scales[i],
            scene.opacity_logits[i],
            *scene.sh[0, i],
            *scene.sh[1, i],
            *scene.sh[2, i],
        ]
        if scene.is_dynamic:
            vals.extend(scene.deformation.d_mu[i].ravel())
            vals.extend(scene.deformation.d_q[i].ravel())
            vals.extend(scene.deformation.d_s[i].ravel())
        lines.append(" ".join(_fmt(float(v)) for v in vals))
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_scene(path) -> Scene:
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines:
        raise ValueError(f"load_scene: {path} is empty")

    def header(idx: int, key: str) -> str:
        if idx >= len(lines):
            raise ValueError(f"load_scene: missing header line '{key}'")
        parts = lines[idx].split(maxsplit=1)
        if parts[0] != key or len(parts) != 2:
            raise ValueError(f"load_scene: line {idx + 1} expected '{key} ...', got '{lines[idx]}'")
        return parts[1]

    magic = lines[0].split()
    if magic[0] != _SCENE_MAGIC:
        raise ValueError(f"load_scene: not a scene file (magic '{magic[0]}')")
    if int(magic[1]) != _SCENE_VERSION:
        raise ValueError(f"load_scene: unsupported format version {magic[1]}")
    degree = int(header(1, "sh_degree"))
    mode = ChannelAssignment(header(2, "mode"))
    background = np.array([float(v) for v in header(3, "background").split()])
    deg_token = header(4, "deformation_degree")
    deform_degree = None if deg_token == "none" else int(deg_token)
    n = int(header(5, "primitives"))

    k = (degree + 1) ** 2
    base = 11 + 3 * k
    extra = 0 if deform_degree is None else deform_degree * 10
    body = lines[6:]
    if len(body) != n:
        raise ValueError(f"load_scene: expected {n} primitive lines, found {len(body)}")

    positions = np.zeros((n, 3))
    quaternions = np.zeros((n, 4))
    log_scales = np.zeros((n, 3))
    logits = np.zeros(n)
    sh = np.zeros((3, n, k))
    fld = None if deform_degree is None else DeformationField.zeros(n, deform_degree)
    for i, line in enumerate(body):
        try:
            vals = np.array([float(v) for v in line.split()])
        except ValueError as e:
            raise ValueError(f"load_scene: line {i + 7}: {e}") from None
        if vals.size != base + extra:
            raise ValueError(
                f"load_scene: line {i + 7} has {vals.size} values, expected {base + extra}"
            )
        positions[i] = vals[0:3]
        quaternions[i] = vals[3:7]
        log_scales[i] = vals[7:10]
        logits[i] = vals[10]
        sh[0, i] = vals[11 : 11 + k]
        sh[1, i] = vals[11 + k : 11 + 2 * k]
        sh[2, i] = vals[11 + 2 * k : base]
        if fld is not None:
            p = deform_degree
            fld.d_mu[i] = vals[base : base + 3 * p].reshape(p, 3)
            fld.d_q[i] = vals[base + 3 * p : base + 7 * p].reshape(p, 4)
            fld.d_s[i] = vals[base + 7 * p : base + 10 * p].reshape(p, 3)
    return Scene(
        positions=positions,
        quaternions=quaternions,
        log_scales=log_scales,
        opacity_logits=logits,
        sh=sh,
        sh_degree=degree,
        assignment=mode,
        background=background,
        deformation=fld,
    )
