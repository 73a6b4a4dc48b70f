import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from epivo.correspondence import Correspondences
from epivo.errors import GenerationError
from epivo.geometry import (
    CameraModel,
    Pose,
    essential_from_pose,
    fundamental_from_essential,
    homogeneous,
    line_residuals,
    mean_sampson,
    rotation_exp,
    rotation_log,
    sampson_distance,
)
from epivo.sim import (
    NoiseConfig,
    apply_pose_perturbation,
    calibration_residual,
    depth_to_disparity,
    disparity_to_depth,
    fit_isotropic_sigma,
    generate_scene,
    labeled_pair,
    perturb,
    perturb_pose,
    pseudo_ground_truth,
    stereo_depths,
)


@pytest.fixture(scope="module")
def scene():
    return generate_scene(100, 3, motion="random", rot_max=0.1, seed=3)


def _grid_corr(n, rng, cam):
    x1 = rng.uniform([0, 0], [cam.width, cam.height], (n, 2))
    return Correspondences(x1, x1 + rng.normal(size=(n, 2)) * 5)


def test_generation_is_deterministic():
    a, b = generate_scene(50, 3, seed=9), generate_scene(50, 3, seed=9)
    np.testing.assert_array_equal(a.points3d, b.points3d)
    for pa, pb in zip(a.trajectory, b.trajectory):
        np.testing.assert_array_equal(pa.matrix(), pb.matrix())
    assert not np.array_equal(a.points3d, generate_scene(50, 3, seed=10).points3d)


def test_static_scene_has_coincident_correspondences():
    s = generate_scene(30, 2, motion="static", seed=0)
    corr, _ = s.correspondences(0)
    assert s.degenerate
    np.testing.assert_allclose(corr.x1, corr.x2, atol=1e-9)


def test_x_translation_is_epipolar_exact():
    s = generate_scene(100, 2, motion="lateral", rot_max=0.0, seed=1)
    rel = s.relative_pose(0)
    assert abs(abs(rel.t[0]) - np.linalg.norm(rel.t)) < 1e-12
    corr, _ = s.correspondences(0)
    E = essential_from_pose(rel)
    x1, x2 = homogeneous(s.cam.normalize(corr.x1)), homogeneous(s.cam.normalize(corr.x2))
    assert np.abs(np.einsum("ni,ij,nj->n", x2, E, x1)).max() < 1e-10


def test_generation_errors():
    with pytest.raises(GenerationError):
        generate_scene(100, 1)
    with pytest.raises(GenerationError):
        generate_scene(4, 2)


def test_visibility_invariant(scene):
    for k, ids in enumerate(scene.frame_points):
        for f in (k, k + 1):
            z = scene.trajectory[f].apply(scene.points3d[ids])[:, 2]
            assert np.all(z > 0)


def test_zero_noise_is_identity(scene, rng):
    corr, _ = scene.correspondences(0)
    out = perturb(corr, NoiseConfig(sigma_p=0.0), scene.cam, 5)
    np.testing.assert_array_equal(out.x1, corr.x1)
    np.testing.assert_array_equal(out.x2, corr.x2)


def test_projection_noise_std_and_isotropy(rng):
    cam = CameraModel.default()
    corr = _grid_corr(10_000, rng, cam)
    out = perturb(corr, NoiseConfig(sigma_p=1.0), cam, 11)
    d = out.x1 - corr.x1
    assert np.all(np.abs(d.std(0) - 1.0) < 0.03)
    C = np.cov(d.T)
    assert abs(C[0, 1]) / np.sqrt(C[0, 0] * C[1, 1]) < 0.05
    assert fit_isotropic_sigma(d) == pytest.approx(1.0, rel=0.03)


def test_matching_noise_variance(rng):
    cam = CameraModel.default()
    x = rng.uniform(0, 300, (10_000, 2))
    corr = Correspondences(x, x, descriptor_distance=np.full(10_000, 2.0))
    out = perturb(corr, NoiseConfig(sigma_p=0.0, alpha=1.5, beta=1.0), cam, 2)
    # variance alpha * d + beta = 4 per axis
    assert (out.x2 - x).var(0) == pytest.approx([4.0, 4.0], rel=0.05)


def test_calibration_residual_shape():
    cam = CameraModel.default()
    c = np.array([cam.cx, cam.cy])
    np.testing.assert_array_equal(calibration_residual(c, cam, 0.1, 0.0), [0.0, 0.0])
    x = c + np.array([[10.0, 0.0], [20.0, 0.0]])
    d = np.linalg.norm(calibration_residual(x, cam, 0.1, 0.0), axis=1)
    r2 = (cam.normalize(x) ** 2).sum(1)
    np.testing.assert_allclose(d, 0.1 * r2 * np.linalg.norm(x - c, axis=1), rtol=1e-12)
    assert d[1] / d[0] == pytest.approx(8.0)  # r^2 * |x| doubles in both factors


def test_perturb_is_deterministic_and_order_preserving(scene):
    corr, _ = scene.correspondences(0)
    cfg = NoiseConfig(sigma_p=2.0)
    a, b = perturb(corr, cfg, scene.cam, 4), perturb(corr, cfg, scene.cam, 4)
    assert a.equals(b)
    assert np.all(np.linalg.norm(a.x1 - corr.x1, axis=1) < 20)


def test_perturb_pose(scene):
    p = scene.relative_pose(0)
    same = perturb_pose(p, NoiseConfig(), 3)
    np.testing.assert_array_equal(same.matrix(), p.matrix())
    q = apply_pose_perturbation(p, [0.0, 0.0, 0.1], np.zeros(3))
    np.testing.assert_allclose(rotation_log(p.R.T @ q.R), [0, 0, 0.1], atol=1e-9)
    noisy = perturb_pose(p, NoiseConfig(delta_theta_max=0.05, delta_t_max=0.1), 3)
    assert np.all(np.abs(rotation_log(p.R.T @ noisy.R)) <= 0.05 + 1e-12)
    assert np.all(np.abs(noisy.t - p.t) <= 0.1 + 1e-12)
    corr, _ = scene.correspondences(0)
    E2 = essential_from_pose(q)
    assert mean_sampson(E2, scene.cam.normalize(corr.x1), scene.cam.normalize(corr.x2)) > 0


def test_pseudo_gt_examples(scene, rng):
    corr, _ = scene.correspondences(0)
    pose = scene.relative_pose(0)
    same = pseudo_ground_truth(corr, pose, scene.cam)
    np.testing.assert_allclose(same.x1, corr.x1, atol=1e-8)
    np.testing.assert_allclose(same.x2, corr.x2, atol=1e-8)

    noisy = perturb(corr, NoiseConfig(sigma_p=2.0), scene.cam, 1)
    F = fundamental_from_essential(essential_from_pose(pose), scene.cam)
    before = line_residuals(F, noisy.x1, noisy.x2)
    gt = pseudo_ground_truth(noisy, pose, scene.cam)
    after = line_residuals(F, gt.x1, gt.x2)
    assert max(before[0].mean(), before[1].mean()) > 0.1
    assert max(after[0].max(), after[1].max()) < 1e-9
    assert np.all(sampson_distance(F, gt.x1, gt.x2) < sampson_distance(F, noisy.x1, noisy.x2))


@settings(max_examples=25)
@given(st.floats(0.0, 5.0), st.integers(0, 10_000))
def test_pseudo_gt_properties(sigma, seed):
    s = generate_scene(30, 2, motion="random", rot_max=0.1, seed=seed % 7)
    corr, _ = s.correspondences(0)
    pose = s.relative_pose(0)
    noisy = perturb(corr, NoiseConfig(sigma_p=sigma, beta=1.0, k1_err=0.01), s.cam, seed)
    gt = pseudo_ground_truth(noisy, pose, s.cam)
    E = essential_from_pose(pose)
    assert sampson_distance(E, s.cam.normalize(gt.x1), s.cam.normalize(gt.x2)).max() < 1e-12
    again = pseudo_ground_truth(gt, pose, s.cam)
    assert np.abs(again.stacked - gt.stacked).max() < 1e-9


def test_pseudo_gt_degenerate_passthrough():
    cam = CameraModel(fx=1, fy=1, cx=0, cy=0, width=2, height=2)
    pose = Pose(np.eye(3), [0.0, 0.0, 1.0])
    # forward motion: the epipole is the origin, where the line vanishes
    corr = Correspondences([[0.0, 0.0], [0.3, 0.1]], [[0.0, 0.0], [0.5, 0.2]])
    out, bad = pseudo_ground_truth(corr, pose, cam, return_mask=True)
    assert bad.tolist() == [True, False]
    np.testing.assert_array_equal(out.x1[0], [0.0, 0.0])


def test_stereo_depths():
    cam = CameraModel(fx=100, fy=100, cx=0, cy=0, baseline=0.5)
    assert depth_to_disparity(10.0, cam) == 5.0
    z = np.array([3.3, 7.1, 42.0])
    np.testing.assert_allclose(disparity_to_depth(depth_to_disparity(z, cam), cam), z, rtol=1e-12)


def test_stereo_matches_projection(scene):
    sd = stereo_depths(scene, 0)
    Xc = scene.trajectory[0].apply(scene.points3d[sd.point_ids])
    cam = scene.cam
    u_left = cam.fx * Xc[:, 0] / Xc[:, 2] + cam.cx
    u_right = cam.fx * (Xc[:, 0] - cam.baseline) / Xc[:, 2] + cam.cx
    np.testing.assert_allclose(sd.disparity, u_left - u_right, rtol=1e-10)
    assert np.all(sd.depth > 0)


def test_labeled_pair(scene):
    lp = labeled_pair(scene, 1, NoiseConfig(sigma_p=1.0), 7)
    assert len(lp.noisy) == len(lp.clean) == len(lp.pseudo_gt) == len(lp.depths)
    E = essential_from_pose(lp.true_pose)
    x1, x2 = scene.cam.normalize(lp.pseudo_gt.x1), scene.cam.normalize(lp.pseudo_gt.x2)
    assert np.abs(np.einsum("ni,ij,nj->n", homogeneous(x2), E, homogeneous(x1))).max() < 1e-6
