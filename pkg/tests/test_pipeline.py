import numpy as np
import pytest

from epivo.correspondence import Correspondences
from epivo.errors import PipelineStageError, ScaleFailureError
from epivo.geometry import Pose, rotation_angle
from epivo.pipeline import (
    PipelineConfig,
    estimate_pair,
    evaluate,
    recover_scale,
    run_sequence,
    scene_truth,
    simulated_frames,
)
from epivo.sim import generate_scene, stereo_depths


@pytest.fixture(scope="module")
def scene():
    return generate_scene(80, 5, motion="forward", rot_max=0.03, seed=11, descriptor_dim=64)


def _angle_deg(a, b):
    return np.degrees(np.arccos(np.clip(a @ b / np.linalg.norm(a) / np.linalg.norm(b), -1, 1)))


def test_zero_noise_pair(scene):
    frames = simulated_frames(scene)
    truth = scene.relative_pose(0)
    for solver in ("multi", "weighted-svd", "ransac", "eight_point"):
        cfg = PipelineConfig(refinement=False, solver=solver, scale=False)
        pose, hyp, diag = estimate_pair(frames[0], frames[1], cfg, truth=truth)
        assert np.degrees(rotation_angle(pose.R.T @ truth.R)) < 1e-6, solver
        assert _angle_deg(pose.t, truth.t) < 1e-6, solver
        assert np.linalg.norm(pose.t) == pytest.approx(1.0)
        assert diag["matches"] >= 8


def test_oracle_refinement_diagnostics(scene):
    frames = simulated_frames(scene, sigma_px=1.0, seed=2)
    truth = scene.relative_pose(1)
    _, _, diag = estimate_pair(frames[1], frames[2], PipelineConfig(), truth=truth)
    assert diag["refined"]
    assert diag["sampson_after"] <= diag["sampson_before"]


def test_too_few_matches_is_a_matcher_error(scene):
    frames = simulated_frames(scene)
    few = Correspondences(np.zeros((3, 2)), np.zeros((3, 2)))
    with pytest.raises(PipelineStageError) as info:
        estimate_pair(frames[0], frames[1], PipelineConfig(refinement=False), matches=few)
    assert info.value.stage == "matcher"


def test_recover_scale(scene):
    corr, ids = scene.correspondences(0)
    truth = scene.relative_pose(0)
    z = stereo_depths(scene, 0, ids).depth
    unit = Pose(truth.R, truth.t / np.linalg.norm(truth.t), scale_free=True)
    got = recover_scale(unit, corr, z, scene.cam)
    assert np.linalg.norm(got.t) == pytest.approx(np.linalg.norm(truth.t), rel=1e-6)
    assert recover_scale(unit, corr, z, scene.cam, scale_free=True) is unit
    # 20% wildly wrong depths: the median barely moves, the mean would not
    bad = z.copy()
    idx = np.random.default_rng(0).choice(z.size, z.size // 5, replace=False)
    bad[idx] *= 5.0
    got = recover_scale(unit, corr, bad, scene.cam)
    assert np.linalg.norm(got.t) == pytest.approx(np.linalg.norm(truth.t), rel=0.02)
    with pytest.raises(ScaleFailureError):
        recover_scale(unit, corr, np.full(z.size, np.nan), scene.cam)


def test_sequence_zero_noise(scene):
    truth, rels = scene_truth(scene)
    res = run_sequence(simulated_frames(scene), PipelineConfig(refinement=False), truths=rels)
    assert res.failed == () and res.metric_scale
    rep = evaluate(res, truth, rels)
    assert rep.ate < 1e-4 and rep.ape < 1e-4 and rep.rre < 1e-6
    assert len(rep.per_frame) == scene.n_frames - 1


def test_failed_pair_reuses_previous_motion(scene):
    frames = simulated_frames(scene)
    good, _ = scene.correspondences(0)
    z = stereo_depths(scene, 0, scene.correspondences(0)[1]).depth
    few = Correspondences(np.zeros((2, 2)), np.zeros((2, 2)))
    pairs = [(good, z), (few, None), (good, z), (good, z)]
    res = run_sequence(frames, PipelineConfig(refinement=False), pairs=pairs)
    assert res.failed == (1,)
    np.testing.assert_array_equal(res.relatives[1].matrix(), res.relatives[0].matrix())
    assert "matcher" in res.diagnostics[1]["error"]


def test_noisy_sequence_is_reasonable(scene):
    truth, rels = scene_truth(scene)
    frames = simulated_frames(scene, sigma_px=1.0, seed=3)
    rep = evaluate(run_sequence(frames, PipelineConfig(), truths=rels), truth, rels)
    assert rep.rre < 0.5
    assert rep.sampson_after <= rep.sampson_before
