import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from labsplat import metrics
from labsplat.metrics import (
    CorrespondenceSet,
    colorfulness,
    load_correspondences,
    matching_error,
    save_correspondences,
    synth_correspondences,
)
from labsplat.rasterizer import rasterize
from labsplat.scene import (
    Camera,
    ChannelAssignment,
    DeformationField,
    GaussianPrimitive,
    Scene,
    constant_sh_coefficient,
    time_powers,
)

from oracles import colorfulness_uniform, matching_error_bruteforce


def look_at_camera(pos, target, fx=40.0, width=32, height=32):
    forward = np.asarray(target, dtype=float) - np.asarray(pos, dtype=float)
    forward /= np.linalg.norm(forward)
    up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    return Camera(
        fx=fx, fy=fx, cx=(width - 1) / 2, cy=(height - 1) / 2,
        width=width, height=height,
        rotation=rot, translation=-rot @ np.asarray(pos, dtype=float),
    )


def dot_primitive(mu, value_l, value_a, value_b, logit=6.0, log_scale=-2.2):
    return GaussianPrimitive(
        mu=mu,
        q=[1.0, 0.0, 0.0, 0.0],
        log_s=[log_scale] * 3,
        alpha_logit=logit,
        sh_set_0=[constant_sh_coefficient(value_l)],
        sh_set_1=[constant_sh_coefficient(value_a)],
        sh_set_2=[constant_sh_coefficient(value_b)],
    )


def dot_scene(prims, deformation=None):
    return Scene.from_primitives(
        prims, sh_degree=0, assignment=ChannelAssignment.FULL_LAB, deformation=deformation
    )


def random_lab_image(rng, h=12, w=14):
    return rng.uniform(0.05, 0.95, size=(3, h, w))


# ---------------------------------------------------------------------------
# CorrespondenceSet
# ---------------------------------------------------------------------------


def test_set_validates_shape_and_finiteness():
    with pytest.raises(ValueError, match="N, 4"):
        CorrespondenceSet("a", "b", np.zeros((3, 3)))
    with pytest.raises(ValueError, match="finite"):
        CorrespondenceSet("a", "b", [[0.0, 0.0, np.nan, 0.0]])


def test_set_swapped_reverses_sides():
    corr = CorrespondenceSet("a", "b", [[1.0, 2.0, 3.0, 4.0]])
    back = corr.swapped()
    assert back.id_a == "b" and back.id_b == "a"
    np.testing.assert_array_equal(back.pairs, [[3.0, 4.0, 1.0, 2.0]])


# ---------------------------------------------------------------------------
# matching error
# ---------------------------------------------------------------------------


def identity_pairs(h, w, step=1):
    xs, ys = np.meshgrid(np.arange(0, w, step, dtype=float), np.arange(0, h, step, dtype=float))
    flat = np.column_stack([xs.ravel(), ys.ravel()])
    return CorrespondenceSet("a", "b", np.hstack([flat, flat]))


def test_identical_images_score_zero():
    img = random_lab_image(np.random.default_rng(0))
    assert matching_error(img, img.copy(), identity_pairs(12, 14)) == 0.0


def test_constant_chroma_shift_scores_the_shift():
    img = np.random.default_rng(1).uniform(0.1, 0.8, size=(3, 10, 10))
    shifted = img.copy()
    shifted[1] += 0.1
    err = matching_error(img, shifted, identity_pairs(10, 10))
    assert err == pytest.approx(0.1, abs=1e-12)


def test_matching_error_matches_bruteforce():
    rng = np.random.default_rng(2)
    for _ in range(5):
        img_a = random_lab_image(rng)
        img_b = random_lab_image(rng)
        pairs = np.column_stack([
            rng.uniform(0, 13, 40), rng.uniform(0, 11, 40),
            rng.uniform(0, 13, 40), rng.uniform(0, 11, 40),
        ])
        corr = CorrespondenceSet("a", "b", pairs)
        expected = matching_error_bruteforce(img_a, img_b, pairs)
        assert matching_error(img_a, img_b, corr) == pytest.approx(expected, abs=1e-9)


def test_matching_error_symmetric():
    rng = np.random.default_rng(3)
    img_a, img_b = random_lab_image(rng), random_lab_image(rng)
    pairs = np.column_stack([
        rng.uniform(0, 13, 25), rng.uniform(0, 11, 25),
        rng.uniform(0, 13, 25), rng.uniform(0, 11, 25),
    ])
    corr = CorrespondenceSet("a", "b", pairs)
    fwd = matching_error(img_a, img_b, corr)
    rev = matching_error(img_b, img_a, corr.swapped())
    assert fwd == pytest.approx(rev, abs=1e-9)


def test_matching_error_rejects_empty_set():
    img = random_lab_image(np.random.default_rng(4))
    with pytest.raises(ValueError, match="empty"):
        matching_error(img, img, CorrespondenceSet("a", "b", np.empty((0, 4))))


def test_matching_error_rejects_out_of_bounds():
    img = random_lab_image(np.random.default_rng(5))
    corr = CorrespondenceSet("a", "b", [[0.0, 0.0, 13.5, 0.0]])
    with pytest.raises(ValueError, match="img_b"):
        matching_error(img, img, corr)
    corr = CorrespondenceSet("a", "b", [[-0.5, 0.0, 0.0, 0.0]])
    with pytest.raises(ValueError, match="img_a"):
        matching_error(img, img, corr)


def test_matching_error_rejects_bad_image_shape():
    corr = CorrespondenceSet("a", "b", [[0.0, 0.0, 0.0, 0.0]])
    with pytest.raises(ValueError, match="3, H, W"):
        matching_error(np.zeros((10, 10)), np.zeros((3, 10, 10)), corr)


# ---------------------------------------------------------------------------
# colorfulness
# ---------------------------------------------------------------------------


def test_gray_images_score_exactly_zero():
    rng = np.random.default_rng(6)
    plane = rng.uniform(size=(9, 11))
    gray = np.stack([plane, plane, plane])
    assert colorfulness(gray) == 0.0


def test_uniform_red_closed_form():
    img = np.zeros((3, 8, 8))
    img[0] = 1.0
    expected = 0.3 * math.sqrt(255.0**2 + 127.5**2)
    assert colorfulness(img) == pytest.approx(expected, rel=1e-12)
    assert colorfulness(img) == pytest.approx(colorfulness_uniform(255.0, 0.0, 0.0), rel=1e-12)


@settings(deadline=None, max_examples=25)
@given(
    r=st.floats(0.0, 1.0), g=st.floats(0.0, 1.0), b=st.floats(0.0, 1.0),
)
def test_uniform_images_match_scalar_oracle(r, g, b):
    img = np.stack([np.full((6, 6), r), np.full((6, 6), g), np.full((6, 6), b)])
    expected = colorfulness_uniform(255.0 * r, 255.0 * g, 255.0 * b)
    assert colorfulness(img) == pytest.approx(expected, abs=1e-9)


@settings(deadline=None, max_examples=20)
@given(seed=st.integers(0, 2**32 - 1))
def test_colorfulness_nonnegative_and_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    img = rng.uniform(size=(3, 8, 8))
    score = colorfulness(img)
    assert score >= 0.0
    perm = rng.permutation(64)
    shuffled = img.reshape(3, 64)[:, perm].reshape(3, 8, 8)
    assert colorfulness(shuffled) == pytest.approx(score, rel=1e-9)


# ---------------------------------------------------------------------------
# synthetic correspondences
# ---------------------------------------------------------------------------


def spread_scene(n=5, seed=8):
    rng = np.random.default_rng(seed)
    prims = []
    for i in range(n):
        angle = 2 * np.pi * i / n
        mu = np.array([0.8 * np.cos(angle), 0.8 * np.sin(angle), rng.uniform(-0.2, 0.2)])
        prims.append(
            dot_primitive(mu, rng.uniform(0.3, 0.7), rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8))
        )
    return dot_scene(prims)


def oracle_projection(cam, position):
    pc = cam.to_camera(position)
    return (
        cam.fx * pc[0] / pc[2] + cam.cx,
        cam.fy * pc[1] / pc[2] + cam.cy,
        pc[2],
    )


def test_same_camera_gives_identity_pairs():
    scene = spread_scene()
    cam = look_at_camera([0.0, 0.0, 4.0], [0.0, 0.0, 0.0])
    corr = synth_correspondences(scene, cam, cam)
    assert len(corr) == scene.n
    np.testing.assert_array_equal(corr.pairs[:, :2], corr.pairs[:, 2:])


def test_pairs_reproject_onto_gaussian_centers():
    scene = spread_scene()
    cam_a = look_at_camera([0.0, 0.5, 4.0], [0.0, 0.0, 0.0])
    cam_b = look_at_camera([1.5, 0.5, 3.6], [0.0, 0.0, 0.0])
    corr = synth_correspondences(scene, cam_a, cam_b, id_a="v0", id_b="v1")
    assert corr.id_a == "v0" and corr.id_b == "v1"
    expected = np.array([
        [*oracle_projection(cam_a, mu)[:2], *oracle_projection(cam_b, mu)[:2]]
        for mu in scene.positions
    ])
    for row in corr.pairs:
        dists = np.hypot(
            np.hypot(row[0] - expected[:, 0], row[1] - expected[:, 1]),
            np.hypot(row[2] - expected[:, 2], row[3] - expected[:, 3]),
        )
        assert dists.min() < 0.5


def test_point_behind_second_camera_excluded():
    prims = [
        dot_primitive([0.0, 0.0, 0.0], 0.5, 0.3, 0.7),
        dot_primitive([4.5, 0.0, 0.0], 0.5, 0.7, 0.3),
    ]
    scene = dot_scene(prims)
    cam_a = look_at_camera([0.0, 0.0, 4.0], [0.0, 0.0, 0.0], fx=10.0)
    cam_b = look_at_camera([4.0, 0.0, 0.0], [0.0, 0.0, 0.0], fx=10.0)
    # the second point sits behind cam_b yet inside cam_a's frustum
    assert oracle_projection(cam_b, prims[1].mu)[2] < 0
    xa, _, da = oracle_projection(cam_a, prims[1].mu)
    assert 0 <= xa <= 31 and da > 0
    corr = synth_correspondences(scene, cam_a, cam_b)
    assert len(corr) == 1
    x0, y0 = oracle_projection(cam_a, prims[0].mu)[:2]
    assert corr.pairs[0, 0] == pytest.approx(x0, abs=1e-9)
    assert corr.pairs[0, 1] == pytest.approx(y0, abs=1e-9)


def test_transparent_gaussians_excluded():
    prims = [
        dot_primitive([0.0, 0.0, 0.0], 0.5, 0.3, 0.7),
        dot_primitive([0.8, 0.0, 0.0], 0.5, 0.7, 0.3, logit=-3.0),
    ]
    scene = dot_scene(prims)
    cam = look_at_camera([0.0, 0.0, 4.0], [0.0, 0.0, 0.0])
    corr = synth_correspondences(scene, cam, cam)
    assert len(corr) == 1


def test_occluded_point_excluded():
    front = dot_primitive([0.0, 0.0, 0.0], 0.5, 0.3, 0.7, logit=8.0, log_scale=-0.5)
    behind = dot_primitive([0.0, 0.0, -2.0], 0.5, 0.7, 0.3)
    scene = dot_scene([front, behind])
    cam = look_at_camera([0.0, 0.0, 4.0], [0.0, 0.0, 0.0])
    corr = synth_correspondences(scene, cam, cam)
    assert len(corr) == 1
    x0, y0 = oracle_projection(cam, front.mu)[:2]
    assert corr.pairs[0, 0] == pytest.approx(x0, abs=1e-9)
    assert corr.pairs[0, 1] == pytest.approx(y0, abs=1e-9)


def test_no_mutual_visibility_rejected():
    scene = dot_scene([dot_primitive([0.0, 0.0, 0.0], 0.5, 0.3, 0.7)])
    cam_a = look_at_camera([0.0, 0.0, 4.0], [0.0, 0.0, 0.0])
    cam_away = look_at_camera([4.0, 0.0, 0.0], [8.0, 0.0, 0.0])
    with pytest.raises(ValueError, match="no mutually visible"):
        synth_correspondences(scene, cam_a, cam_away)


def test_dynamic_pairs_track_deformed_centers():
    prims = [
        dot_primitive([-0.4, 0.0, 0.0], 0.5, 0.3, 0.7),
        dot_primitive([0.5, 0.2, 0.0], 0.5, 0.7, 0.3),
    ]
    motion = DeformationField.zeros(2, degree=1)
    motion.d_mu[:, 0] = [[0.6, 0.0, 0.0], [0.0, 0.5, 0.0]]
    scene = dot_scene(prims, deformation=motion)
    cam_a = look_at_camera([0.0, 0.0, 4.0], [0.0, 0.0, 0.0])
    cam_b = look_at_camera([0.9, 0.3, 3.8], [0.0, 0.0, 0.0])
    corr = synth_correspondences(scene, cam_a, cam_b, t_a=0.0, t_b=1.0)
    assert len(corr) == 2
    for i in range(2):
        moved = scene.positions[i] + time_powers(1.0, 1) @ motion.d_mu[i]
        xb, yb = oracle_projection(cam_b, moved)[:2]
        xa, ya = oracle_projection(cam_a, scene.positions[i])[:2]
        row = corr.pairs[np.argmin(np.abs(corr.pairs[:, 0] - xa))]
        assert row[1] == pytest.approx(ya, abs=1e-9)
        assert row[2] == pytest.approx(xb, abs=1e-9)
        assert row[3] == pytest.approx(yb, abs=1e-9)


def test_ground_truth_renders_self_consistent():
    """The oracle pairs sampled on GT color renders stay below the ME floor."""
    scene = spread_scene()
    cam_a = look_at_camera([0.0, 0.5, 4.0], [0.0, 0.0, 0.0], fx=40.0, width=48, height=48)
    cam_b = look_at_camera([1.2, 0.5, 3.8], [0.0, 0.0, 0.0], fx=40.0, width=48, height=48)
    corr = synth_correspondences(scene, cam_a, cam_b)
    img_a = rasterize(scene, cam_a).image
    img_b = rasterize(scene, cam_b).image
    assert matching_error(img_a, img_b, corr) < 0.005


# ---------------------------------------------------------------------------
# correspondence files
# ---------------------------------------------------------------------------


def test_round_trip_preserves_every_pair(tmp_path):
    rng = np.random.default_rng(9)
    pairs = rng.uniform(0, 20, size=(17, 4))
    corr = CorrespondenceSet("view00", "view07", pairs)
    path = tmp_path / "corr.txt"
    save_correspondences(path, corr)
    loaded = load_correspondences(path)
    assert (loaded.id_a, loaded.id_b) == ("view00", "view07")
    np.testing.assert_array_equal(loaded.pairs, corr.pairs)


def test_load_rejects_empty_file(tmp_path):
    path = tmp_path / "corr.txt"
    path.write_text("")
    with pytest.raises(ValueError, match="header"):
        load_correspondences(path)


def test_load_rejects_header_only(tmp_path):
    path = tmp_path / "corr.txt"
    path.write_text("pair a b\n")
    with pytest.raises(ValueError, match="no correspondence pairs"):
        load_correspondences(path)


def test_load_rejects_bad_header(tmp_path):
    path = tmp_path / "corr.txt"
    path.write_text("pairs a b\n1 2 3 4\n")
    with pytest.raises(ValueError, match=r":1: expected header"):
        load_correspondences(path)


def test_load_rejects_wrong_field_count(tmp_path):
    path = tmp_path / "corr.txt"
    path.write_text("pair a b\n1 2 3 4\n5 6 7\n")
    with pytest.raises(ValueError, match=r":3: expected 4 coordinates"):
        load_correspondences(path)


def test_load_rejects_non_numeric(tmp_path):
    path = tmp_path / "corr.txt"
    path.write_text("pair a b\n1 2 three 4\n")
    with pytest.raises(ValueError, match=r":2: non-numeric"):
        load_correspondences(path)


def test_load_rejects_non_finite(tmp_path):
    path = tmp_path / "corr.txt"
    path.write_text("pair a b\n1 2 inf 4\n")
    with pytest.raises(ValueError, match=r":2: non-finite"):
        load_correspondences(path)


def test_load_rejects_negative_coordinates(tmp_path):
    path = tmp_path / "corr.txt"
    path.write_text("pair a b\n1 2 3 4\n-1 2 3 4\n")
    with pytest.raises(ValueError, match=r":3: negative"):
        load_correspondences(path)


def test_load_checks_bounds_when_given(tmp_path):
    path = tmp_path / "corr.txt"
    path.write_text("pair a b\n5 5 30 5\n")
    loaded = load_correspondences(path, bounds_a=(16, 16), bounds_b=(16, 32))
    assert len(loaded) == 1
    with pytest.raises(ValueError, match=r":2: coordinate out of bounds for view B"):
        load_correspondences(path, bounds_a=(16, 16), bounds_b=(16, 16))


def test_load_skips_comments_and_blank_lines(tmp_path):
    path = tmp_path / "corr.txt"
    path.write_text("# matches\npair a b\n\n1 2 3 4\n# done\n")
    assert len(load_correspondences(path)) == 1


def test_load_missing_file():
    with pytest.raises(ValueError, match="cannot read"):
        load_correspondences("/nonexistent/corr.txt")


def test_psnr_identity_is_infinite():
    img = np.random.default_rng(0).uniform(0, 1, (3, 8, 8))
    assert metrics.psnr(img, img) == float("inf")


def test_psnr_constant_offset_oracle():
    a = np.zeros((4, 4))
    b = np.full((4, 4), 0.1)
    assert metrics.psnr(a, b) == pytest.approx(20.0, abs=1e-12)
    expected = 20.0 + 10.0 * math.log10(4.0)
    assert metrics.psnr(a, b, peak=2.0) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize(
    "a,b,kwargs,match",
    [
        (np.zeros((2, 2)), np.zeros((2, 3)), {}, "shape mismatch"),
        (np.zeros(0), np.zeros(0), {}, "empty"),
        (np.full((2, 2), np.nan), np.zeros((2, 2)), {}, "finite"),
        (np.zeros((2, 2)), np.zeros((2, 2)), {"peak": 0.0}, "peak"),
    ],
)
def test_psnr_rejections(a, b, kwargs, match):
    with pytest.raises(ValueError, match=match):
        metrics.psnr(a, b, **kwargs)
