"""Synthetic scenes, the four-part correspondence noise model and
epipolar pseudo ground truth.

Everything here takes an explicit seed; there is no global random state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .correspondence import Correspondences
from .errors import GenerationError
from .geometry import (
    CameraModel,
    Pose,
    epipolar_lines,
    essential_from_pose,
    fundamental_from_essential,
    rotation_exp,
)
from .matcher import DescriptorSet

MOTIONS = ("forward", "random", "lateral", "static")


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


@dataclass(frozen=True)
class NoiseConfig:
    """Correspondence and pose perturbation parameters.

    ``sigma_p`` is in pixels; matching noise has per-axis variance
    ``alpha * d + beta`` (pixels squared) for descriptor distance ``d``;
    ``k1_err``/``k2_err`` are the distortion coefficient errors.
    """

    sigma_p: float = 1.0
    delta_theta_max: float = 0.0
    delta_t_max: float = 0.0
    alpha: float = 0.0
    beta: float = 0.0
    k1_err: float = 0.0
    k2_err: float = 0.0

    def __post_init__(self):
        for name in ("sigma_p", "alpha", "beta", "delta_theta_max", "delta_t_max"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0")
        if not (np.isfinite(self.k1_err) and np.isfinite(self.k2_err)):
            raise ValueError("distortion errors must be finite")


@dataclass(frozen=True, eq=False)
class Scene:
    """World points observed along a camera trajectory.

    ``trajectory[k]`` maps world coordinates into camera ``k``.
    ``frame_points[k]`` lists the ids of points visible in both frames
    ``k`` and ``k + 1``.
    """

    points3d: np.ndarray
    cam: CameraModel
    trajectory: tuple
    rng_seed: int
    descriptor_dim: int = 256
    descriptor_norm: float = 4.0
    descriptor_noise: float = 0.25
    frame_points: tuple = field(default=(), repr=False)
    degenerate: bool = False

    @property
    def n_frames(self) -> int:
        return len(self.trajectory)

    def relative_pose(self, k: int) -> Pose:
        """Pose mapping camera ``k`` coordinates into camera ``k + 1``."""
        return self.trajectory[k + 1] @ self.trajectory[k].inverse()

    def camera_to_world(self) -> list[Pose]:
        return [T.inverse() for T in self.trajectory]

    def world_descriptors(self) -> np.ndarray:
        d = _rng(self.rng_seed, 101).normal(size=(len(self.points3d), self.descriptor_dim))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return self.descriptor_norm * d

    def view_descriptors(self, frame: int) -> np.ndarray:
        noise = _rng(self.rng_seed, 202, frame).normal(size=(len(self.points3d), self.descriptor_dim))
        scale = self.descriptor_noise * self.descriptor_norm / np.sqrt(self.descriptor_dim)
        return self.world_descriptors() + scale * noise

    def visible(self, frame: int) -> np.ndarray:
        Xc = self.trajectory[frame].apply(self.points3d)
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = self.cam.project(Xc)
        ok = (Xc[:, 2] > 0.1) & (uv[:, 0] >= 0) & (uv[:, 0] < self.cam.width)
        return np.flatnonzero(ok & (uv[:, 1] >= 0) & (uv[:, 1] < self.cam.height))

    def observe(self, frame: int, ids=None) -> np.ndarray:
        ids = self.visible(frame) if ids is None else np.asarray(ids)
        return self.cam.project(self.trajectory[frame].apply(self.points3d[ids]))

    def descriptor_set(self, frame: int, ids=None) -> tuple[DescriptorSet, np.ndarray]:
        """Descriptors of the given (default: every visible) point in ``frame``
        and their point ids."""
        ids = self.visible(frame) if ids is None else np.asarray(ids)
        return DescriptorSet(self.view_descriptors(frame)[ids], self.observe(frame, ids)), ids

    def keypoint_ids(self, frame: int) -> np.ndarray:
        """Points tracked into the neighbouring frame pairs, the natural
        keypoint budget of ``frame``."""
        parts = []
        if frame > 0:
            parts.append(self.frame_points[frame - 1])
        if frame < self.n_frames - 1:
            parts.append(self.frame_points[frame])
        return np.unique(np.concatenate(parts)) if parts else np.empty(0, dtype=np.int64)

    def correspondences(self, k: int) -> tuple[Correspondences, np.ndarray]:
        """Exact correspondences between frames ``k`` and ``k + 1`` and their point ids."""
        ids = np.asarray(self.frame_points[k])
        da = self.view_descriptors(k)[ids]
        db = self.view_descriptors(k + 1)[ids]
        c = Correspondences(
            self.observe(k, ids),
            self.observe(k + 1, ids),
            descriptor_distance=np.linalg.norm(da - db, axis=1),
        )
        return c, ids


def _trajectory(n_frames, motion, step, rot_max, rng):
    c2w = [Pose.identity()]
    for _ in range(n_frames - 1):
        if motion == "static":
            d = np.zeros(3)
            dR = np.eye(3)
        else:
            if motion == "forward":
                d = np.array([*rng.uniform(-0.1, 0.1, 2), 1.0])
            elif motion == "lateral":
                d = np.array([1.0, 0.0, 0.0])
            else:
                d = rng.normal(size=3)
            d = step * d / np.linalg.norm(d)
            dR = rotation_exp(rng.uniform(-rot_max, rot_max, 3)) if motion != "lateral" else np.eye(3)
        c2w.append(c2w[-1] @ Pose(dR, d))
    return [T.inverse() for T in c2w]


def generate_scene(n_points: int = 100, n_frames: int = 2, cam: CameraModel | None = None,
                   motion: str = "forward", step: float = 1.0, rot_max: float = 0.02,
                   depth_range=(4.0, 30.0), seed: int = 0, descriptor_dim: int = 256,
                   min_shared: int = 8) -> Scene:
    """Sample ``n_points`` in the frustum of each frame but the last.

    Points seeded from frame ``k`` that stay visible in ``k + 1`` become that
    pair's correspondences.  ``motion="static"`` gives coincident poses and a
    scene flagged ``degenerate``.
    """
    if motion not in MOTIONS:
        raise ValueError(f"motion must be one of {MOTIONS}")
    if n_frames < 2:
        raise GenerationError("a scene needs at least two frames")
    if n_points < min_shared:
        raise GenerationError(f"need at least {min_shared} points per frame pair")
    cam = cam or CameraModel.default()
    rng = _rng(seed, 0)
    traj = _trajectory(n_frames, motion, step, rot_max, rng)
    zmin, zmax = depth_range
    blocks = []
    for k in range(n_frames - 1):
        uv = rng.uniform([0, 0], [cam.width, cam.height], size=(n_points, 2))
        z = rng.uniform(zmin, zmax, n_points)
        Xc = np.column_stack([cam.normalize(uv) * z[:, None], z])
        blocks.append(traj[k].inverse().apply(Xc))
    pts = np.vstack(blocks)
    scene = Scene(pts, cam, tuple(traj), int(seed), descriptor_dim=descriptor_dim,
                  degenerate=motion == "static")
    frame_points = []
    for k in range(n_frames - 1):
        block = np.arange(k * n_points, (k + 1) * n_points)
        ids = np.intersect1d(block, np.intersect1d(scene.visible(k), scene.visible(k + 1)))
        if ids.size < min_shared:
            raise GenerationError(f"frames {k}-{k + 1} share only {ids.size} visible points")
        frame_points.append(ids)
    object.__setattr__(scene, "frame_points", tuple(frame_points))
    return scene


# ---------------------------------------------------------------------------
# Noise model
# ---------------------------------------------------------------------------


def calibration_residual(x, cam: CameraModel, k1_err: float, k2_err: float) -> np.ndarray:
    """Pixel displacement from using distortion ``(k1 + k1_err, k2 + k2_err)``.

    ``x (k1' r^2 + k2' r^4) - x (k1 r^2 + k2 r^4)`` with ``x`` measured from
    the principal point and ``r`` in normalized coordinates.
    """
    x = np.asarray(x, dtype=float)
    r2 = (cam.normalize(x) ** 2).sum(-1)
    c = np.array([cam.cx, cam.cy])
    return (x - c) * (k1_err * r2 + k2_err * r2**2)[..., None]


def perturb(clean: Correspondences, cfg: NoiseConfig, cam: CameraModel,
            seed: int) -> Correspondences:
    """Add projection, matching and calibration noise to both endpoints."""
    rng = _rng(seed, 303)
    n = len(clean)
    var_m = cfg.alpha * clean.descriptor_distance + cfg.beta
    out = []
    for x in (clean.x1, clean.x2):
        eps = cfg.sigma_p * rng.standard_normal((n, 2))
        eps += np.sqrt(var_m)[:, None] * rng.standard_normal((n, 2))
        if cfg.k1_err or cfg.k2_err:
            eps += calibration_residual(x, cam, cfg.k1_err, cfg.k2_err)
        out.append(x + eps)
    return clean.with_points(*out)


def apply_pose_perturbation(pose: Pose, delta_theta, delta_t) -> Pose:
    """``R' = R exp([dtheta]x)``, ``t' = t + dt``."""
    return Pose(pose.R @ rotation_exp(delta_theta), pose.t + np.asarray(delta_t, dtype=float))


def perturb_pose(pose: Pose, cfg: NoiseConfig, seed: int) -> Pose:
    rng = _rng(seed, 404)
    dtheta = rng.uniform(-cfg.delta_theta_max, cfg.delta_theta_max, 3)
    dt = rng.uniform(-cfg.delta_t_max, cfg.delta_t_max, 3)
    return apply_pose_perturbation(pose, dtheta, dt)


def fit_isotropic_sigma(displacements) -> float:
    """Standard deviation of the best zero-mean isotropic Gaussian fit."""
    d = np.asarray(displacements, dtype=float)
    if d.size == 0:
        return 0.0
    return float(np.sqrt(np.mean(d**2)))


# ---------------------------------------------------------------------------
# Pseudo ground truth
# ---------------------------------------------------------------------------


def _project_rows(x, l):
    n2 = l[:, 0] ** 2 + l[:, 1] ** 2
    ok = n2 > 0
    r = np.where(ok, (x[:, 0] * l[:, 0] + x[:, 1] * l[:, 1] + l[:, 2]) / np.where(ok, n2, 1.0), 0.0)
    return x - r[:, None] * l[:, :2], ok


def pseudo_ground_truth(noisy: Correspondences, true_pose: Pose, cam: CameraModel,
                        return_mask: bool = False):
    """Snap both endpoints onto their epipolar lines under the true pose.

    The second-image point moves onto ``F x1``, then the first-image point
    moves onto ``F^T x2'`` using the already corrected ``x2'``; the pair then
    satisfies ``x2'^T F x1' = 0`` exactly (to rounding), and a second pass is
    a no-op.  Pairs with a degenerate line are passed through unchanged;
    ``return_mask=True`` also returns the boolean mask of those pairs.
    """
    F = fundamental_from_essential(essential_from_pose(true_pose), cam)
    if len(noisy) == 0:
        return (noisy, np.zeros(0, dtype=bool)) if return_mask else noisy
    _, l2 = epipolar_lines(F, noisy.x1, noisy.x2)
    x2, ok2 = _project_rows(noisy.x2, l2)
    l1, _ = epipolar_lines(F, noisy.x1, x2)
    x1, ok1 = _project_rows(noisy.x1, l1)
    bad = ~(ok1 & ok2)
    x1[bad] = noisy.x1[bad]
    x2[bad] = noisy.x2[bad]
    out = noisy.with_points(x1, x2)
    return (out, bad) if return_mask else out


# ---------------------------------------------------------------------------
# Stereo depth
# ---------------------------------------------------------------------------


class StereoDepth(NamedTuple):
    point_ids: np.ndarray
    depth: np.ndarray
    disparity: np.ndarray


def depth_to_disparity(z, cam: CameraModel):
    return cam.fx * cam.baseline / np.asarray(z, dtype=float)


def disparity_to_depth(d, cam: CameraModel):
    return cam.fx * cam.baseline / np.asarray(d, dtype=float)


def stereo_depths(scene: Scene, frame: int, ids=None) -> StereoDepth:
    """Exact left-camera depths of visible points plus the implied disparity.

    Points behind the camera are dropped.
    """
    ids = scene.visible(frame) if ids is None else np.asarray(ids)
    z = scene.trajectory[frame].apply(scene.points3d[ids])[:, 2]
    keep = z > 0
    ids, z = ids[keep], z[keep]
    return StereoDepth(ids, z, depth_to_disparity(z, scene.cam))


@dataclass(frozen=True, eq=False)
class LabeledPair:
    noisy: Correspondences
    clean: Correspondences
    pseudo_gt: Correspondences
    true_pose: Pose
    depths: np.ndarray
    cam: CameraModel

    def __post_init__(self):
        n = len(self.noisy)
        if not (len(self.clean) == n == len(self.pseudo_gt) == len(self.depths)):
            raise ValueError("labeled pair lists must have equal length")


def labeled_pair(scene: Scene, k: int, cfg: NoiseConfig, seed: int) -> LabeledPair:
    clean, ids = scene.correspondences(k)
    noisy = perturb(clean, cfg, scene.cam, seed)
    pose = scene.relative_pose(k)
    depths = stereo_depths(scene, k, ids).depth
    return LabeledPair(noisy, clean, pseudo_ground_truth(noisy, pose, scene.cam), pose,
                       depths, scene.cam)
