"""Two-view epipolar geometry primitives.

Conventions used throughout the package:

* pixel points lift to homogeneous ``(u, v, 1)``;
* epipolar lines are ``(a, b, c)`` with ``a*u + b*v + c = 0``;
* a relative :class:`Pose` ``(R, t)`` maps camera-1 coordinates to camera-2
  coordinates, ``X2 = R @ X1 + t``, so ``x2^T E x1 = 0`` with ``E = [t]x R``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .constants import TOL
from .errors import (
    CalibrationError,
    DegenerateLineError,
    DegenerateTranslationError,
    InvalidRotationError,
)

__all__ = [
    "CameraModel",
    "Pose",
    "check_rotation",
    "essential_from_pose",
    "epipolar_lines",
    "fundamental_from_essential",
    "homogeneous",
    "line_residuals",
    "matrix_correlation",
    "mean_sampson",
    "project_to_line",
    "rotation_angle",
    "rotation_exp",
    "rotation_log",
    "sampson_distance",
    "skew",
]


def skew(v) -> np.ndarray:
    """Cross-product matrix: ``skew(v) @ w == np.cross(v, w)``."""
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _vee(m):
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def rotation_exp(axis_angle) -> np.ndarray:
    """Rodrigues formula, exact to rounding for any angle."""
    w = np.asarray(axis_angle, dtype=float).reshape(3)
    theta = float(np.linalg.norm(w))
    K = skew(w)
    if theta < 1e-8:
        # second-order series; the next terms are below 1e-24
        return np.eye(3) + K + 0.5 * K @ K
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * K @ K


def rotation_log(R) -> np.ndarray:
    """Axis-angle vector of a rotation matrix (angle in ``[0, pi]``)."""
    R = np.asarray(R, dtype=float)
    s = 0.5 * _vee(R - R.T)
    sin_t = float(np.linalg.norm(s))
    cos_t = 0.5 * (np.trace(R) - 1.0)
    theta = np.arctan2(sin_t, cos_t)
    if sin_t < 1e-6 and cos_t > 0:
        return s * (1.0 + theta**2 / 6.0)
    if cos_t > -0.99:
        return s * (theta / sin_t)
    # near pi: axis from the symmetric part, sign from the skew part
    B = 0.5 * (R + R.T) - cos_t * np.eye(3)
    k = int(np.argmax(np.diag(B)))
    axis = B[:, k] / np.sqrt(max(B[k, k], 1e-300))
    axis /= np.linalg.norm(axis)
    if axis @ s < 0:
        axis = -axis
    return axis * theta


def rotation_angle(R) -> float:
    """Geodesic angle of ``R`` in radians."""
    return float(np.linalg.norm(rotation_log(R)))


def check_rotation(R, tol: float = TOL.rotation_orthonormal) -> np.ndarray:
    R = np.array(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise InvalidRotationError("rotation must be a finite 3x3 matrix")
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol:
        raise InvalidRotationError("rotation is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > tol:
        raise InvalidRotationError("rotation determinant is not +1")
    return R


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``X -> R @ X + t``."""

    R: np.ndarray
    t: np.ndarray
    scale_free: bool = False

    def __post_init__(self):
        R = check_rotation(self.R)
        t = np.array(self.t, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise InvalidRotationError("translation must be finite")
        if self.scale_free and abs(np.linalg.norm(t) - 1.0) > TOL.unit_translation:
            raise DegenerateTranslationError("scale-free pose needs a unit translation")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T, scale_free: bool = False) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3], scale_free)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return X @ self.R.T + self.t

    def unit(self) -> "Pose":
        n = np.linalg.norm(self.t)
        if n == 0:
            raise DegenerateTranslationError("zero translation has no direction")
        return Pose(self.R, self.t / n, scale_free=True)


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics plus stereo baseline and radial distortion."""

    fx: float
    fy: float
    cx: float
    cy: float
    baseline: float = 0.5
    k1: float = 0.0
    k2: float = 0.0
    width: int = 640
    height: int = 480
    K: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise CalibrationError("focal lengths must be positive")
        if not self.baseline > 0:
            raise CalibrationError("stereo baseline must be positive")
        K = np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])
        K.setflags(write=False)
        object.__setattr__(self, "K", K)

    @classmethod
    def default(cls) -> "CameraModel":
        return cls(fx=500.0, fy=500.0, cx=320.0, cy=240.0, baseline=0.5)

    def normalize(self, pixels) -> np.ndarray:
        """Pixel coordinates (..., 2) to normalized camera coordinates (..., 2)."""
        p = np.asarray(pixels, dtype=float)
        return np.stack([(p[..., 0] - self.cx) / self.fx, (p[..., 1] - self.cy) / self.fy], axis=-1)

    def denormalize(self, xn) -> np.ndarray:
        x = np.asarray(xn, dtype=float)
        return np.stack([x[..., 0] * self.fx + self.cx, x[..., 1] * self.fy + self.cy], axis=-1)

    def project(self, X_cam) -> np.ndarray:
        X = np.asarray(X_cam, dtype=float)
        return self.denormalize(X[..., :2] / X[..., 2:3])


def homogeneous(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] == 3:
        return x
    return np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)


def essential_from_pose(pose: Pose) -> np.ndarray:
    if np.linalg.norm(pose.t) == 0:
        raise DegenerateTranslationError("essential matrix undefined for zero translation")
    return skew(pose.t) @ pose.R


def fundamental_from_essential(e, cam) -> np.ndarray:
    """``K^-T E K^-1``; ``cam`` is a :class:`CameraModel` or a 3x3 matrix."""
    K = cam.K if isinstance(cam, CameraModel) else np.asarray(cam, dtype=float)
    if K.shape != (3, 3) or not np.all(np.isfinite(K)):
        raise CalibrationError("intrinsics must be a finite 3x3 matrix")
    if abs(np.linalg.det(K)) < 1e-12 * max(1.0, np.abs(K).max()) ** 3:
        raise CalibrationError("intrinsic matrix is singular")
    Kinv = np.linalg.inv(K)
    return Kinv.T @ np.asarray(e, dtype=float) @ Kinv


def epipolar_lines(f, x0, x1):
    """Lines ``(l0, l1)`` with ``l1 = F x0`` (image 2) and ``l0 = F^T x1`` (image 1)."""
    F = np.asarray(f, dtype=float)
    h0 = homogeneous(x0)
    h1 = homogeneous(x1)
    return h1 @ F, h0 @ F.T


def project_to_line(x, l) -> np.ndarray:
    """Move ``x`` along the line normal onto ``l``.

    ``x - (l . x~) / (a^2 + b^2) * (a, b)``, which is the orthogonal
    projection for any scaling of ``l``.  Works on single points or batches.
    """
    x = np.asarray(x, dtype=float)
    l = np.asarray(l, dtype=float)
    n2 = l[..., 0] ** 2 + l[..., 1] ** 2
    if np.any(n2 <= TOL.line_norm):
        raise DegenerateLineError("line has a = b = 0")
    r = (homogeneous(x) * l).sum(axis=-1) / n2
    return x[..., :2] - r[..., None] * l[..., :2]


def sampson_distance(e_or_f, x1, x2):
    """First-order geometric error of ``x2^T M x1 = 0``.

    For batches (``x1`` of shape ``(n, 2|3)``) returns a masked array whose
    masked entries are epipole coincidences (zero denominator); ``.mean()``
    skips them.  For a single pair returns a float, or ``np.ma.masked`` when
    degenerate.
    """
    M = np.asarray(e_or_f, dtype=float)
    h1 = homogeneous(x1)
    h2 = homogeneous(x2)
    single = h1.ndim == 1
    h1 = np.atleast_2d(h1)
    h2 = np.atleast_2d(h2)
    Mx1 = h1 @ M.T
    Mtx2 = h2 @ M
    num = np.einsum("ni,ni->n", h2, Mx1) ** 2
    den = Mx1[:, 0] ** 2 + Mx1[:, 1] ** 2 + Mtx2[:, 0] ** 2 + Mtx2[:, 1] ** 2
    bad = den <= TOL.sampson_denominator
    d = np.ma.masked_array(np.where(bad, 0.0, num / np.where(bad, 1.0, den)), mask=bad)
    if single:
        return np.ma.masked if bad[0] else float(d.data[0])
    return d


def mean_sampson(e_or_f, x1, x2) -> float:
    """Mean Sampson distance over non-degenerate pairs (0.0 if none)."""
    d = sampson_distance(e_or_f, x1, x2)
    if d.count() == 0:
        return 0.0
    return float(d.mean())


def line_residuals(f, x0, x1):
    """Pixel distances of each point to its epipolar line: ``(image 1, image 2)``."""
    l0, l1 = epipolar_lines(f, x0, x1)
    r0 = np.abs((homogeneous(x0) * l0).sum(-1)) / np.hypot(l0[..., 0], l0[..., 1])
    r1 = np.abs((homogeneous(x1) * l1).sum(-1)) / np.hypot(l1[..., 0], l1[..., 1])
    return r0, r1


def matrix_correlation(a, b) -> float:
    """``|<A, B>_F| / (|A|_F |B|_F)``; 1 means equal up to scale and sign."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    return float(abs(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b)))
