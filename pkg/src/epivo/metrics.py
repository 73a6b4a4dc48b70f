"""Trajectories, pose-error metrics and the staged training objectives.

Metric definitions:

* ``rre``: geodesic angle of ``R_est^T R_gt`` in degrees.
* ``rte``: ``||t_est - t_gt||`` after scaling ``t_est`` to the true length
  when the estimate is scale free; ``rte_angle`` is the angle between the
  two translation directions in degrees.
* ``ate``: RMS position error after the requested alignment (``none``,
  ``rigid`` or ``similarity``, least squares in closed form).
* ``ape``: RMS position error after anchoring only, i.e. moving the
  estimate so its first pose coincides with the true first pose.
* ``ape_r``: mean rotation angle error in degrees after the same anchoring.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import MissingInputError
from .geometry import Pose, homogeneous, line_residuals, rotation_angle, sampson_distance

ALIGNMENTS = ("none", "rigid", "similarity")


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Absolute camera-to-world poses."""

    poses: tuple
    timestamps: np.ndarray | None = None

    def __post_init__(self):
        poses = tuple(self.poses)
        if not all(isinstance(p, Pose) for p in poses):
            raise TypeError("trajectory entries must be Pose objects")
        object.__setattr__(self, "poses", poses)
        if self.timestamps is not None:
            ts = np.array(self.timestamps, dtype=float).reshape(-1)
            if ts.size != len(poses):
                raise ValueError("one timestamp per pose required")
            ts.setflags(write=False)
            object.__setattr__(self, "timestamps", ts)

    def __len__(self) -> int:
        return len(self.poses)

    def __getitem__(self, i) -> Pose:
        return self.poses[i]

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.t for p in self.poses]).reshape(-1, 3)

    @property
    def rotations(self) -> np.ndarray:
        return np.array([p.R for p in self.poses]).reshape(-1, 3, 3)

    def relatives(self) -> list[Pose]:
        """``T_rel^(k) = (T_abs^(k-1))^-1 T_abs^(k)`` for ``k = 1..n-1``."""
        return [self.poses[k - 1].inverse() @ self.poses[k] for k in range(1, len(self.poses))]

    def transformed(self, g: Pose) -> "Trajectory":
        return Trajectory(tuple(g @ p for p in self.poses), self.timestamps)


def chain(relatives: Sequence[Pose], anchor: Pose | None = None) -> Trajectory:
    """``T_abs^(k) = T_abs^(k-1) T_rel^(k)`` starting from ``anchor`` (identity)."""
    cur = anchor if anchor is not None else Pose.identity()
    out = [cur]
    for rel in relatives:
        cur = Pose.from_matrix(cur.matrix() @ rel.matrix())
        out.append(cur)
    return Trajectory(tuple(out))


# ---------------------------------------------------------------------------
# Relative errors
# ---------------------------------------------------------------------------


class RelativeError(NamedTuple):
    rre: float  # degrees
    rte: float  # metres (after scale alignment for scale-free estimates)
    rte_angle: float  # degrees between translation directions


def _angle_between(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0 if na == nb else 90.0
    c = np.clip(a @ b / (na * nb), -1.0, 1.0)
    # atan2 form keeps precision near 0 and 180 degrees
    s = np.linalg.norm(np.cross(a, b)) / (na * nb)
    return float(np.degrees(np.arctan2(s, c)))


def rotation_error(Ra, Rb) -> float:
    """Geodesic angle between two rotations in radians (exactly 0 when equal)."""
    if np.array_equal(Ra, Rb):
        return 0.0
    return rotation_angle(np.asarray(Ra).T @ np.asarray(Rb))


def relative_metrics(estimated: Pose, truth: Pose, scale_free: bool | None = None) -> RelativeError:
    scale_free = estimated.scale_free if scale_free is None else scale_free
    rre = float(np.degrees(rotation_error(estimated.R, truth.R)))
    t = estimated.t
    if scale_free:
        n = np.linalg.norm(t)
        t = t * (np.linalg.norm(truth.t) / n) if n > 0 else t
    rte = float(np.linalg.norm(t - truth.t))
    return RelativeError(rre, rte, _angle_between(estimated.t, truth.t))


# ---------------------------------------------------------------------------
# Absolute errors
# ---------------------------------------------------------------------------


class Alignment(NamedTuple):
    scale: float
    R: np.ndarray
    t: np.ndarray

    def apply(self, P) -> np.ndarray:
        return self.scale * np.asarray(P) @ self.R.T + self.t


def umeyama(src, dst, with_scale: bool = False) -> Alignment:
    """Least-squares ``(s, R, t)`` minimising ``sum ||dst - (s R src + t)||^2``."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    a, b = src - mu_s, dst - mu_d
    C = b.T @ a / src.shape[0]
    U, S, Vt = np.linalg.svd(C)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    s = 1.0
    if with_scale:
        var = (a**2).sum() / src.shape[0]
        s = float(np.trace(np.diag(S) @ D) / var) if var > 0 else 1.0
    return Alignment(s, R, mu_d - s * R @ mu_s)


IDENTITY_ALIGNMENT = Alignment(1.0, np.eye(3), np.zeros(3))


def align(estimated: Trajectory, truth: Trajectory, alignment: str) -> Alignment:
    """Closed-form alignment, or the identity when that fits at least as well
    (the closed form carries rounding error even for a perfect fit)."""
    if alignment not in ALIGNMENTS:
        raise ValueError(f"alignment must be one of {ALIGNMENTS}")
    if alignment == "none":
        return IDENTITY_ALIGNMENT
    P, Q = estimated.positions, truth.positions
    al = umeyama(P, Q, alignment == "similarity")
    if ((al.apply(P) - Q) ** 2).sum() >= ((P - Q) ** 2).sum():
        return IDENTITY_ALIGNMENT
    return al


class AbsoluteError(NamedTuple):
    ate: float
    ape: float
    ape_r: float
    alignment: str


def _check_pair(estimated: Trajectory, truth: Trajectory):
    if len(estimated) != len(truth):
        raise ValueError(f"trajectory lengths differ: {len(estimated)} vs {len(truth)}")
    if len(truth) < 2:
        raise ValueError("trajectories need at least two poses")


def position_errors(estimated: Trajectory, truth: Trajectory, alignment: str = "none") -> np.ndarray:
    _check_pair(estimated, truth)
    al = align(estimated, truth, alignment)
    return np.linalg.norm(al.apply(estimated.positions) - truth.positions, axis=1)


def anchored(estimated: Trajectory, truth: Trajectory) -> Trajectory:
    """``estimated`` moved rigidly so that its first pose equals ``truth[0]``."""
    a, b = estimated.poses[0], truth.poses[0]
    if np.array_equal(a.matrix(), b.matrix()):
        return estimated
    return estimated.transformed(b @ a.inverse())


def absolute_metrics(estimated: Trajectory, truth: Trajectory,
                     alignment: str = "rigid") -> AbsoluteError:
    err = position_errors(estimated, truth, alignment)
    estimated = anchored(estimated, truth)
    raw = position_errors(estimated, truth, "none")
    rot = [rotation_error(a.R, b.R) for a, b in zip(estimated.poses, truth.poses)]
    return AbsoluteError(float(np.sqrt(np.mean(err**2))), float(np.sqrt(np.mean(raw**2))),
                         float(np.degrees(np.mean(rot))), alignment)


def cumulative_ate(estimated: Trajectory, truth: Trajectory, alignment: str = "rigid") -> np.ndarray:
    """RMS error over frames ``0..k`` under one alignment fitted to the whole run."""
    e2 = position_errors(estimated, truth, alignment) ** 2
    return np.sqrt(np.cumsum(e2) / np.arange(1, e2.size + 1))


# ---------------------------------------------------------------------------
# Stage objectives
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossWeights:
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0

    def __post_init__(self):
        ws = (self.w1, self.w2, self.w3)
        if min(ws) < 0 or not all(np.isfinite(ws)):
            raise ValueError("loss weights must be finite and nonnegative")
        if max(ws) == 0:
            raise ValueError("loss weights must not all be zero")


class StageLoss(NamedTuple):
    total: float
    components: dict


def svd_regularizer(e) -> float:
    """``(s1 - s2)^2 + s3^2`` of the singular values."""
    s = np.linalg.svd(np.asarray(e, dtype=float), compute_uv=False)
    return float((s[0] - s[1]) ** 2 + s[2] ** 2)


def _need(inputs, stage, *keys):
    missing = [k for k in keys if inputs.get(k) is None]
    if missing:
        raise MissingInputError(f"stage {stage} needs {', '.join(missing)}")
    return [inputs[k] for k in keys]


def stage_losses(stage: str, inputs: dict, weights: LossWeights = LossWeights()) -> StageLoss:
    """Staged objectives.

    ``F1``: ``L_samp`` from ``x1``, ``x2``, ``F``.
    ``F2``: ``w1 L_samp + w2 L_ddpm + w3 L_rec``; also needs ``eps_hat``,
    ``eps``, ``reconstructed`` and ``pseudo_gt`` (rows ``u1 v1 u2 v2``).
    ``F3``: ``w1 L_align + w2 L_epi + w3 L_svd`` from ``x1``, ``x2`` (refined),
    ``F``, the hypothesis ``e`` and normalized ``x1n``, ``x2n``; optional
    per-pair ``weights`` weight ``L_epi``.
    """
    if stage == "F1":
        x1, x2, F = _need(inputs, stage, "x1", "x2", "F")
        ls = float(sampson_distance(F, x1, x2).mean() or 0.0)
        return StageLoss(ls, {"samp": ls})
    if stage == "F2":
        x1, x2, F, eh, e, rec, pgt = _need(inputs, stage, "x1", "x2", "F", "eps_hat", "eps",
                                           "reconstructed", "pseudo_gt")
        ls = float(sampson_distance(F, x1, x2).mean() or 0.0)
        ld = float(np.mean((np.asarray(eh) - np.asarray(e)) ** 2))
        lr = float(np.mean((np.asarray(rec) - np.asarray(pgt)) ** 2))
        comps = {"samp": ls, "ddpm": ld, "rec": lr}
        return StageLoss(weights.w1 * ls + weights.w2 * ld + weights.w3 * lr, comps)
    if stage == "F3":
        x1, x2, F, e, x1n, x2n = _need(inputs, stage, "x1", "x2", "F", "e", "x1n", "x2n")
        d1, d2 = line_residuals(F, x1, x2)
        la = float(np.mean(np.concatenate([d1, d2]) ** 2))
        r = np.einsum("ni,ij,nj->n", homogeneous(x2n), np.asarray(e), homogeneous(x1n))
        w = inputs.get("weights")
        le = float(np.mean(r**2)) if w is None else float(np.sum(np.asarray(w) * r**2) / np.sum(w))
        lv = svd_regularizer(e)
        comps = {"align": la, "epi": le, "svd": lv}
        return StageLoss(weights.w1 * la + weights.w2 * le + weights.w3 * lv, comps)
    raise ValueError("stage must be F1, F2 or F3")


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

CSV_COLUMNS = ("frame", "rre_deg", "rte_m", "sampson", "cum_ate_m")
REFINEMENT_COLUMNS = ("frame", "sampson_before", "sampson_after")


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.9g}"


@dataclass(frozen=True, eq=False)
class MetricsReport:
    rre: float
    rte: float
    rte_angle: float
    sampson: float
    ate: float
    ape: float
    ape_r: float
    alignment: str
    per_frame: list = field(default_factory=list)
    sampson_before: float | None = None
    sampson_after: float | None = None
    failed_frames: tuple = ()

    def __post_init__(self):
        for name in ("rre", "rte", "rte_angle", "sampson", "ate", "ape", "ape_r"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")

    def summary(self) -> dict:
        d = {"rre_deg": self.rre, "rte_m": self.rte, "rte_angle_deg": self.rte_angle,
             "sampson": self.sampson, "ate_m": self.ate, "ape_m": self.ape,
             "ape_r_deg": self.ape_r, "alignment": self.alignment,
             "frames": len(self.per_frame), "failed_frames": len(self.failed_frames)}
        if self.sampson_before is not None:
            d["sampson_before_refine"] = self.sampson_before
            d["sampson_after_refine"] = self.sampson_after
        return d

    def to_text(self) -> str:
        lines = []
        for k, v in self.summary().items():
            lines.append(f"{k} = {v if isinstance(v, str) else _fmt(v)}")
        if self.failed_frames:
            lines.append("failed = " + " ".join(str(f) for f in self.failed_frames))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        d = self.summary()
        d["failed"] = [int(f) for f in self.failed_frames]
        d["per_frame"] = self.per_frame
        return json.dumps(d, indent=2, sort_keys=True, default=float) + "\n"

    def csv_rows(self) -> str:
        out = [",".join(CSV_COLUMNS)]
        for row in self.per_frame:
            out.append(",".join(_fmt(row[c]) for c in CSV_COLUMNS))
        return "\n".join(out) + "\n"

    def refinement_rows(self) -> str:
        out = [",".join(REFINEMENT_COLUMNS)]
        for row in self.per_frame:
            vals = [row["frame"], row.get("sampson_before", float("nan")),
                    row.get("sampson_after", float("nan"))]
            out.append(",".join(_fmt(v) for v in vals))
        return "\n".join(out) + "\n"
