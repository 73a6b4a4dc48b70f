import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation as SciRot

from epivo.errors import (
    CalibrationError,
    DegenerateLineError,
    DegenerateTranslationError,
    InvalidRotationError,
)
from epivo.geometry import (
    CameraModel,
    Pose,
    check_rotation,
    epipolar_lines,
    essential_from_pose,
    fundamental_from_essential,
    homogeneous,
    line_residuals,
    matrix_correlation,
    mean_sampson,
    project_to_line,
    rotation_angle,
    rotation_exp,
    rotation_log,
    sampson_distance,
    skew,
)
from epivo.sim import generate_scene

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
vec3 = arrays(np.float64, 3, elements=finite)
small_rotvec = arrays(np.float64, 3, elements=st.floats(-1.5, 1.5))


def test_skew_examples():
    np.testing.assert_array_equal(skew([1, 0, 0]), [[0, 0, 0], [0, 0, -1], [0, 1, 0]])
    np.testing.assert_array_equal(skew([0, 0, 0]), np.zeros((3, 3)))
    np.testing.assert_array_equal(skew([1, 2, 3]) @ [4, 5, 6], [-3, 6, -3])


@given(vec3, vec3)
def test_skew_is_cross_product(v, w):
    S = skew(v)
    np.testing.assert_array_equal(S + S.T, 0)
    np.testing.assert_allclose(S @ w, np.cross(v, w), atol=1e-9 * (1 + np.abs(v).max() * np.abs(w).max()))


def test_essential_examples():
    np.testing.assert_array_equal(essential_from_pose(Pose(np.eye(3), [1, 0, 0])), skew([1, 0, 0]))
    with pytest.raises(DegenerateTranslationError):
        essential_from_pose(Pose(np.eye(3), np.zeros(3)))


@given(small_rotvec, arrays(np.float64, 3, elements=st.floats(-5, 5)))
def test_essential_singular_values(w, t):
    if np.linalg.norm(t) < 1e-3:
        return
    s = np.linalg.svd(essential_from_pose(Pose(rotation_exp(w), t)), compute_uv=False)
    assert s[2] / s[0] < 1e-10
    assert abs(s[0] - s[1]) / s[0] < 1e-9
    assert abs(s[0] - np.linalg.norm(t)) < 1e-9 * np.linalg.norm(t)


def test_simulated_correspondences_are_epipolar():
    scene = generate_scene(100, 2, motion="random", rot_max=0.1, seed=0)
    corr, _ = scene.correspondences(0)
    E = essential_from_pose(scene.relative_pose(0))
    x1, x2 = homogeneous(scene.cam.normalize(corr.x1)), homogeneous(scene.cam.normalize(corr.x2))
    assert np.abs((x2 @ E * x1).sum(1)).max() < 1e-10
    F = fundamental_from_essential(E, scene.cam)
    assert np.abs((homogeneous(corr.x2) @ F * homogeneous(corr.x1)).sum(1)).max() < 1e-8
    r0, r1 = line_residuals(F, corr.x1, corr.x2)
    assert max(r0.max(), r1.max()) < 1e-8


def test_fundamental_examples():
    E = essential_from_pose(Pose(rotation_exp([0.1, 0.2, 0.3]), [1, 2, 3]))
    np.testing.assert_array_equal(fundamental_from_essential(E, np.eye(3)), E)
    F = fundamental_from_essential(E, np.diag([2.0, 2.0, 1.0]))
    np.testing.assert_allclose(F[:2, :2], E[:2, :2] / 4, rtol=1e-15)
    np.testing.assert_allclose(F[:2, 2], E[:2, 2] / 2, rtol=1e-15)
    with pytest.raises(CalibrationError):
        fundamental_from_essential(E, np.diag([1.0, 0.0, 1.0]))
    with pytest.raises(CalibrationError):
        CameraModel(fx=-1, fy=1, cx=0, cy=0)


def test_epipolar_lines_examples(rng):
    l0, l1 = epipolar_lines(skew([1, 0, 0]), [0.0, 0.0], [5.0, 0.0])
    assert l1[0] == 0  # horizontal line for pure x translation
    F = rng.normal(size=(3, 3))
    x0, x1 = rng.normal(size=2), rng.normal(size=2)
    l0, l1 = epipolar_lines(F, x0, x1)
    for r in range(3):
        assert l1[r] == pytest.approx(F[r, 0] * x0[0] + F[r, 1] * x0[1] + F[r, 2], rel=1e-12)
        assert l0[r] == pytest.approx(F[0, r] * x1[0] + F[1, r] * x1[1] + F[2, r], rel=1e-12)


def test_project_to_line_examples():
    np.testing.assert_array_equal(project_to_line([0.0, 1.0], [0.0, 1.0, 0.0]), [0.0, 0.0])
    np.testing.assert_array_equal(project_to_line([3.0, 0.0], [0.0, 1.0, 0.0]), [3.0, 0.0])
    with pytest.raises(DegenerateLineError):
        project_to_line([1.0, 1.0], [0.0, 0.0, 1.0])


@given(arrays(np.float64, 2, elements=st.floats(-100, 100)),
       arrays(np.float64, 3, elements=st.floats(-10, 10)))
def test_project_to_line_properties(x, l):
    if np.hypot(l[0], l[1]) < 1e-2:
        return
    p = project_to_line(x, l)
    scale = np.hypot(l[0], l[1])
    assert abs(l[0] * p[0] + l[1] * p[1] + l[2]) / scale < 1e-9 * (1 + np.abs(x).max() + abs(l[2]) / scale)
    d = p - x
    direction = np.array([-l[1], l[0]])
    assert abs(d @ direction) < 1e-9 * (1 + np.abs(x).max()) * scale
    np.testing.assert_allclose(project_to_line(p, l), p, atol=1e-9 * (1 + np.abs(x).max() + abs(l[2])))


def test_sampson_hand_example():
    # E x1 = (0, -1, 0) and E^T x2 = (0, 1, -1): numerator 1, denominator 1 + 1
    E = skew([1, 0, 0])
    x1, x2 = np.array([0.0, 0.0, 1.0]), np.array([0.0, 1.0, 1.0])
    Ex1, Etx2 = E @ x1, E.T @ x2
    brute = (x2 @ E @ x1) ** 2 / (Ex1[0] ** 2 + Ex1[1] ** 2 + Etx2[0] ** 2 + Etx2[1] ** 2)
    assert brute == 0.5
    assert sampson_distance(E, x1[:2], x2[:2]) == 0.5


def test_sampson_brute_force(rng):
    E = rng.normal(size=(3, 3))
    x1, x2 = rng.normal(size=(10, 2)), rng.normal(size=(10, 2))
    d = sampson_distance(E, x1, x2)
    for i in range(10):
        a, b = np.append(x1[i], 1.0), np.append(x2[i], 1.0)
        Ea, Etb = E @ a, E.T @ b
        want = (b @ E @ a) ** 2 / (Ea[0] ** 2 + Ea[1] ** 2 + Etb[0] ** 2 + Etb[1] ** 2)
        assert d[i] == pytest.approx(want, rel=1e-12)


def test_sampson_degenerate_is_masked():
    E = skew([0.0, 0.0, 1.0])
    # x1 at the epipole (origin): E x1 = 0 and E^T x2 = 0 for x2 at the origin
    d = sampson_distance(E, np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([[0.0, 0.0], [0.0, 1.0]]))
    assert d.mask.tolist() == [True, False]
    assert np.isfinite(d.data).all()
    assert sampson_distance(E, [0.0, 0.0], [0.0, 0.0]) is np.ma.masked
    assert mean_sampson(E, [[0.0, 0.0]], [[0.0, 0.0]]) == 0.0


def test_sampson_decreases_after_projection(rng):
    scene = generate_scene(80, 2, motion="random", rot_max=0.1, seed=1)
    corr, _ = scene.correspondences(0)
    F = fundamental_from_essential(essential_from_pose(scene.relative_pose(0)), scene.cam)
    x2n = corr.x2 + rng.normal(size=corr.x2.shape)
    before = sampson_distance(F, corr.x1, x2n).mean()
    _, l1 = epipolar_lines(F, corr.x1, x2n)
    after = sampson_distance(F, corr.x1, project_to_line(x2n, l1)).mean()
    assert after < before


@given(small_rotvec)
def test_rotation_exp_log_round_trip(v):
    R = rotation_exp(v)
    check_rotation(R)
    np.testing.assert_allclose(rotation_log(R), v, atol=1e-9)
    # independent oracle
    np.testing.assert_allclose(R, SciRot.from_rotvec(v).as_matrix(), atol=1e-12)


def test_rotation_examples():
    np.testing.assert_array_equal(rotation_exp([0, 0, 0]), np.eye(3))
    np.testing.assert_allclose(rotation_exp([0, 0, np.pi / 2]),
                               [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)
    assert rotation_angle(rotation_exp([0, 0, 3.1])) == pytest.approx(3.1, abs=1e-12)
    # near-pi logarithm keeps the axis
    v = np.array([0.0, 0.6, 0.8]) * (np.pi - 1e-7)
    np.testing.assert_allclose(rotation_log(rotation_exp(v)), v, atol=1e-6)


def test_rotation_validation():
    with pytest.raises(InvalidRotationError):
        check_rotation(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(InvalidRotationError):
        check_rotation(np.eye(3) * (1 + 1e-6))
    with pytest.raises(InvalidRotationError):
        Pose(np.diag([1.0, 1.0, 1.01]), [1.0, 0, 0])
    with pytest.raises(DegenerateTranslationError):
        Pose(np.eye(3), [2.0, 0, 0], scale_free=True)


@given(small_rotvec, vec3, small_rotvec, vec3)
def test_pose_algebra(w1, t1, w2, t2):
    a, b = Pose(rotation_exp(w1), t1), Pose(rotation_exp(w2), t2)
    np.testing.assert_allclose((a @ b).matrix(), a.matrix() @ b.matrix(), atol=1e-9 * (1 + np.abs(t1).max() + np.abs(t2).max()))
    np.testing.assert_allclose((a @ a.inverse()).matrix(), np.eye(4), atol=1e-9 * (1 + np.abs(t1).max()))


def test_matrix_correlation_scale_and_sign(rng):
    A = rng.normal(size=(3, 3))
    assert matrix_correlation(A, -3 * A) == pytest.approx(1.0, abs=1e-15)
    assert matrix_correlation(np.eye(3), skew([1, 2, 3])) == 0.0
