"""Frame-pair estimation, metric scale and sequence runs.

A pair goes through matching, optional diffusion refinement, 3-D lifting
and node scoring, essential-matrix estimation, decomposition with a
chirality check and, when depth is known, stereo scale recovery.  Any
failure is re-raised as :class:`PipelineStageError` naming the stage.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffusion, graph as graph_mod, matcher, solvers
from .correspondence import Correspondences
from .errors import (
    EpivoError,
    MissingInputError,
    NoValidMatchError,
    PipelineStageError,
    ScaleFailureError,
)
from .geometry import CameraModel, Pose, essential_from_pose, sampson_distance
from .metrics import (
    MetricsReport,
    Trajectory,
    absolute_metrics,
    chain,
    cumulative_ate,
    relative_metrics,
)

log = logging.getLogger(__name__)

SOLVERS = ("multi", "weighted-svd", "ransac", "eight_point")
SCORERS = ("residual", "mp")
MIN_MATCHES = 5


@dataclass(frozen=True, eq=False)
class Frame:
    """One image's inputs: keypoint descriptors (with pixel locations),
    optional per-keypoint stereo depth and optional patches."""

    cam: CameraModel
    descriptors: matcher.DescriptorSet | None = None
    depths: np.ndarray | None = None
    patches: np.ndarray | None = None
    index: int = 0

    def __post_init__(self):
        if self.depths is not None:
            d = np.array(self.depths, dtype=float).reshape(-1)
            if self.descriptors is not None and d.size != self.descriptors.n:
                raise ValueError("one depth per keypoint required")
            d.setflags(write=False)
            object.__setattr__(self, "depths", d)


@dataclass(frozen=True, eq=False)
class PipelineConfig:
    tau: float = matcher.DEFAULT_TAU
    sinkhorn_iterations: int = matcher.DEFAULT_ITERATIONS
    temperature: float = matcher.DEFAULT_TEMPERATURE
    top_k: int | None = None
    refinement: bool = True
    # "oracle" (needs the true pose), an object with ``predict``, or None
    denoiser: object = "oracle"
    schedule: diffusion.NoiseSchedule = field(default_factory=diffusion.NoiseSchedule.linear)
    start_t: int = 25
    stochastic: bool = False
    sigma_px: float = 1.0
    solver: str = "multi"
    scorer: str = "residual"
    k: int = graph_mod.DEFAULT_K
    m: int = 5
    ransac: solvers.RansacConfig | None = None
    init_iterations: int = 200
    scale: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}")
        if self.scorer not in SCORERS:
            raise ValueError(f"scorer must be one of {SCORERS}")
        self.schedule.check_step(self.start_t)
        if self.k < 1 or self.m < 1:
            raise ValueError("k and m must be >= 1")

    def ransac_for(self, cam: CameraModel, iterations: int | None = None) -> solvers.RansacConfig:
        if self.ransac is not None:
            cfg = self.ransac
        else:
            thr = solvers.inlier_threshold_for(self.sigma_px, 0.5 * (cam.fx + cam.fy), 2.0)
            cfg = solvers.RansacConfig(inlier_threshold=thr, seed=self.seed)
        return replace(cfg, iterations=iterations) if iterations else cfg


class _Stage:
    """Context manager re-raising failures tagged with the stage name."""

    def __init__(self, name, frame):
        self.name = name
        self.frame = frame

    def __enter__(self):
        return self

    def __exit__(self, et, exc, tb):
        if exc is None or isinstance(exc, PipelineStageError):
            return False
        if isinstance(exc, (EpivoError, ValueError, np.linalg.LinAlgError)):
            raise PipelineStageError(self.name, exc, self.frame) from exc
        return False


def _mean_sampson(e, cam, corr) -> float:
    if len(corr) == 0:
        return 0.0
    d = sampson_distance(e, cam.normalize(corr.x1), cam.normalize(corr.x2))
    return float(d.mean()) if d.count() else 0.0


def _resolve_denoiser(config: PipelineConfig, truth: Pose | None, cam: CameraModel):
    den = config.denoiser
    if den is None:
        return None
    if isinstance(den, str):
        if den != "oracle":
            raise ValueError(f"unknown denoiser {den!r}")
        if truth is None:
            raise MissingInputError("the oracle denoiser needs the true relative pose")
        return diffusion.geometric_oracle_denoiser(truth, cam, config.sigma_px)
    return den


def match_frames(frame_a: Frame, frame_b: Frame, config: PipelineConfig):
    """Correspondences between two frames and the depth of each first-frame keypoint."""
    if frame_a.descriptors is None or frame_b.descriptors is None:
        raise MissingInputError("frames carry no descriptors and no matches were given")
    corr = matcher.match(frame_a.descriptors, frame_b.descriptors, config.tau,
                         config.sinkhorn_iterations, config.temperature,
                         frame_a.patches, frame_b.patches, config.top_k)
    depths = None
    if frame_a.depths is not None and len(corr):
        depths = frame_a.depths[corr.pairs[:, 0]]
    return corr, depths


def recover_scale(pose: Pose, correspondences: Correspondences, depths, cam: CameraModel,
                  scale_free: bool = False, method: str = "dlt") -> Pose:
    """Scale ``t`` by the median ratio of stereo depth to triangulated depth.

    ``scale_free=True`` returns the pose unchanged (monocular mode).
    """
    if scale_free:
        return pose if pose.scale_free else Pose(pose.R, pose.t, scale_free=True)
    z = np.asarray(depths, dtype=float).reshape(-1)
    if z.size != len(correspondences):
        raise ValueError("one depth per correspondence required")
    unit = pose.unit() if np.linalg.norm(pose.t) > 0 else pose
    X = solvers.triangulate(unit, cam.normalize(correspondences.x1),
                            cam.normalize(correspondences.x2), method)
    w = X[:, 3]
    with np.errstate(divide="ignore", invalid="ignore"):
        zt = np.where(w > 0, X[:, 2] / np.where(w > 0, w, 1.0), np.nan)
    ok = np.isfinite(zt) & (zt > 0) & np.isfinite(z) & (z > 0)
    if not ok.any():
        raise ScaleFailureError("no point has positive triangulated and stereo depth")
    s = float(np.median(z[ok] / zt[ok]))
    return Pose(unit.R, s * unit.t, scale_free=False)


def _solve(corr, depths, cam, config, frame):
    x1, x2 = cam.normalize(corr.x1), cam.normalize(corr.x2)
    diag = {}
    if config.solver == "eight_point":
        with _Stage("solver", frame):
            return solvers.eight_point(x1, x2), diag
    if config.solver == "ransac":
        with _Stage("solver", frame):
            hyp = solvers.ransac_estimate(x1, x2, config.ransac_for(cam))
        diag["inliers"] = int(hyp.inliers.sum())
        return hyp, diag
    with _Stage("graph", frame):
        lift_depth = depths if depths is not None else np.ones(len(corr))
        g = graph_mod.build_graph(corr, lift_depth, cam, config.k, with_2d=False)
        e0 = solvers.ransac_estimate(cam.normalize(g.correspondences.x1),
                                     cam.normalize(g.correspondences.x2),
                                     config.ransac_for(cam, config.init_iterations)).e
        mode = "residual" if config.scorer == "residual" else "message_passing"
        g = g.with_weights(graph_mod.score_nodes(g, e0, cam, mode))
    diag["graph_nodes"] = g.n
    diag["graph_edges"] = int(g.edges.shape[0])
    with _Stage("solver", frame):
        if config.solver == "weighted-svd":
            a = solvers.DesignMatrix.build(cam.normalize(g.correspondences.x1),
                                           cam.normalize(g.correspondences.x2))
            hyp = solvers.weighted_svd_solve(a, g.weights)[0]
        else:
            hyps, sel = solvers.multi_hypothesis(g, cam, config.m)
            hyp = hyps[sel]
            diag["hypotheses"] = len(hyps)
            diag["selected"] = sel
    return hyp, diag


def estimate_pair(frame_a: Frame, frame_b: Frame, config: PipelineConfig = PipelineConfig(),
                  matches: Correspondences | None = None, match_depths=None,
                  truth: Pose | None = None, frame_index: int | None = None):
    """Relative pose of ``frame_b`` w.r.t. ``frame_a``.

    Returns ``(pose, hypothesis, diagnostics)`` where ``pose`` maps
    ``frame_a`` camera coordinates into ``frame_b``'s (``X_b = R X_a + t``).
    ``t`` is unit length unless stereo depth fixes its scale.  ``truth``
    (same convention) feeds the oracle denoiser and the before/after
    refinement Sampson figures.
    """
    cam = frame_a.cam
    fi = frame_index if frame_index is not None else frame_b.index
    with _Stage("matcher", fi):
        if matches is None:
            corr, depths = match_frames(frame_a, frame_b, config)
        else:
            corr = matches
            depths = None if match_depths is None else np.asarray(match_depths, dtype=float)
        if len(corr) < MIN_MATCHES:
            raise NoValidMatchError(f"only {len(corr)} matches survive (need {MIN_MATCHES})")
    diag = {"frame": fi, "matches": len(corr), "solver": config.solver, "scorer": config.scorer}

    refined = corr
    if config.refinement and config.denoiser is not None:
        with _Stage("refine", fi):
            den = _resolve_denoiser(config, truth, cam)
            seed = [config.seed, fi]
            refined = diffusion.refine(corr, den, config.schedule, config.start_t, seed, cam,
                                       config.sigma_px, config.stochastic)
    diag["refined"] = refined is not corr

    hyp, sdiag = _solve(refined, depths, cam, config, fi)
    diag.update(sdiag)
    with _Stage("pose", fi):
        pose = solvers.recover_pose(hyp.e, cam.normalize(refined.x1), cam.normalize(refined.x2))
    if config.scale and depths is not None:
        with _Stage("scale", fi):
            pose = recover_scale(pose, refined, depths, cam)

    ref_e = essential_from_pose(truth) if truth is not None else hyp.e
    diag["sampson_before"] = _mean_sampson(ref_e, cam, corr)
    diag["sampson_after"] = _mean_sampson(ref_e, cam, refined)
    diag["sampson"] = _mean_sampson(hyp.e, cam, refined)
    return pose, hyp, diag


# ---------------------------------------------------------------------------
# Sequences
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SequenceResult:
    trajectory: Trajectory
    relatives: tuple  # epipolar-form relative poses, one per pair
    diagnostics: tuple
    failed: tuple  # indices of pairs that used the constant-velocity fallback
    metric_scale: bool


def run_sequence(frames, config: PipelineConfig = PipelineConfig(), truths=None,
                 pairs=None) -> SequenceResult:
    """Estimate every consecutive pair and chain the results.

    ``truths[k]`` (optional) is the true relative pose of pair ``k``.
    ``pairs[k]`` (optional) is a precomputed ``(correspondences, depths)``
    for pair ``k`` that replaces matching.  A pair that fails reuses the
    previous relative pose (identity with a unit forward step for the first
    pair) and is reported in ``failed``.
    """
    frames = list(frames)
    rels, diags, failed = [], [], []
    metric = True
    for k in range(len(frames) - 1):
        truth = truths[k] if truths is not None else None
        matches, depths = pairs[k] if pairs is not None else (None, None)
        try:
            pose, _, diag = estimate_pair(frames[k], frames[k + 1], config, matches, depths,
                                          truth=truth, frame_index=k + 1)
        except PipelineStageError as exc:
            log.warning("pair %d failed in stage %s: %s; reusing previous motion", k,
                        exc.stage, exc.cause)
            pose = rels[-1] if rels else Pose(np.eye(3), np.array([0.0, 0.0, -1.0]), scale_free=True)
            diag = {"frame": k + 1, "matches": 0, "error": f"{exc.stage}: {exc.cause}",
                    "sampson": 0.0, "sampson_before": 0.0, "sampson_after": 0.0}
            failed.append(k)
        metric &= not pose.scale_free
        rels.append(pose)
        diags.append(diag)
    traj = chain([p.inverse() for p in rels])
    return SequenceResult(traj, tuple(rels), tuple(diags), tuple(failed), metric)


def evaluate(result: SequenceResult, truth: Trajectory, truth_relatives=None,
             alignment: str | None = None) -> MetricsReport:
    """Metrics of a sequence run against the true camera-to-world trajectory."""
    alignment = alignment or ("rigid" if result.metric_scale else "similarity")
    if truth_relatives is None:
        truth_relatives = [p.inverse() for p in truth.relatives()]
    ab = absolute_metrics(result.trajectory, truth, alignment)
    cum = cumulative_ate(result.trajectory, truth, alignment)
    rows = []
    rel_errs = []
    for k, (est, tr, diag) in enumerate(zip(result.relatives, truth_relatives, result.diagnostics)):
        r = relative_metrics(est, tr)
        rel_errs.append(r)
        rows.append({"frame": k + 1, "rre_deg": r.rre, "rte_m": r.rte, "rte_angle_deg": r.rte_angle,
                     "sampson": diag.get("sampson", 0.0), "cum_ate_m": float(cum[k + 1]),
                     "sampson_before": diag.get("sampson_before", 0.0),
                     "sampson_after": diag.get("sampson_after", 0.0),
                     "failed": k in result.failed})
    mean = (lambda xs: float(np.mean(xs)) if len(xs) else 0.0)
    refined = any(d.get("refined") for d in result.diagnostics)
    return MetricsReport(
        rre=mean([r.rre for r in rel_errs]), rte=mean([r.rte for r in rel_errs]),
        rte_angle=mean([r.rte_angle for r in rel_errs]),
        sampson=mean([row["sampson"] for row in rows]),
        ate=ab.ate, ape=ab.ape, ape_r=ab.ape_r, alignment=alignment, per_frame=rows,
        sampson_before=mean([row["sampson_before"] for row in rows]),
        sampson_after=mean([row["sampson_after"] for row in rows]) if refined
        else mean([row["sampson_before"] for row in rows]),
        failed_frames=tuple(k + 1 for k in result.failed),
    )


def simulated_frames(scene, sigma_px: float = 0.0, seed: int = 0,
                     budget: int | None = None) -> list[Frame]:
    """Frames of a simulator scene.

    The points tracked into each frame's neighbouring pairs become keypoints
    with their view descriptors, exact stereo depth and ``sigma_px`` location
    noise.  Every frame is padded to the same ``budget`` (default: the
    largest tracked set) with unmatched distractor keypoints of unknown
    depth, as a detector with a fixed keypoint count would produce; without
    this the first and last frames would have half as many keypoints as the
    rest.
    """
    from .sim import stereo_depths

    tracked = [scene.keypoint_ids(f) for f in range(scene.n_frames)]
    budget = max(len(t) for t in tracked) if budget is None else budget
    frames = []
    for f in range(scene.n_frames):
        ds, ids = scene.descriptor_set(f, tracked[f])
        desc, loc = ds.descriptors, ds.locations
        if sigma_px > 0:
            rng = np.random.default_rng([seed, 606, f])
            loc = loc + sigma_px * rng.standard_normal(loc.shape)
        depth = stereo_depths(scene, f, ids)
        z = np.full(len(ids), np.nan)
        z[np.searchsorted(ids, depth.point_ids)] = depth.depth
        extra = budget - len(ids)
        if extra > 0:
            rng = np.random.default_rng([scene.rng_seed, 707, f])
            d = rng.standard_normal((extra, scene.descriptor_dim))
            d *= scene.descriptor_norm / np.linalg.norm(d, axis=1, keepdims=True)
            xy = rng.uniform([0, 0], [scene.cam.width, scene.cam.height], (extra, 2))
            desc = np.vstack([desc, d])
            loc = np.vstack([loc, xy])
            z = np.concatenate([z, np.full(extra, np.nan)])
        frames.append(Frame(scene.cam, matcher.DescriptorSet(desc, loc), z, index=f))
    return frames


def scene_truth(scene):
    """True camera-to-world trajectory and per-pair relative poses."""
    traj = Trajectory(tuple(scene.camera_to_world()))
    rels = [scene.relative_pose(k) for k in range(scene.n_frames - 1)]
    return traj, rels
