"""Essential-matrix estimation and relative pose recovery.

All solvers take *normalized* camera coordinates (pixels mapped through
``K^-1``).  Hypotheses are stored as unit-Frobenius, rank-2 matrices with
equal nonzero singular values, signed so the entry of largest magnitude is
positive.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .constants import TOL
from .errors import (
    DegenerateConfigurationError,
    NonDifferentiableError,
    NoValidPoseError,
    RobustFailureError,
)
from .geometry import Pose, homogeneous, mean_sampson, sampson_distance, skew

SOLVER_TAGS = ("eight_point", "five_point", "weighted_svd")

# 90 degree rotation about z used to split E into rotations
_W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


class ConditioningWarning(UserWarning):
    """Solver inputs look like pixel coordinates rather than normalized ones."""


@dataclass(frozen=True, eq=False)
class EssentialHypothesis:
    e: np.ndarray
    sampson_score: float
    solver_tag: str
    weights_used: np.ndarray | None = None
    inliers: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.solver_tag not in SOLVER_TAGS:
            raise ValueError(f"unknown solver tag {self.solver_tag!r}")


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 1000
    inlier_threshold: float = 1e-5
    sample_size: int = 8
    seed: int = 0
    refine_rounds: int = 5
    lo_fraction: float = 0.5

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.inlier_threshold > 0:
            raise ValueError("inlier threshold must be positive")
        if self.sample_size not in (5, 8):
            raise ValueError("sample size must be 5 or 8")
        if not 0 < self.lo_fraction <= 1:
            raise ValueError("lo_fraction must lie in (0, 1]")
        if self.refine_rounds < 0:
            raise ValueError("refine_rounds must be >= 0")


def inlier_threshold_for(sigma_px: float, focal: float, k: float = 3.0) -> float:
    """Sampson threshold (normalized units) admitting ``k``-sigma pixel noise
    in both images."""
    return 2.0 * (k * sigma_px / focal) ** 2


def sign_normalize(E) -> np.ndarray:
    E = np.asarray(E, dtype=float)
    E = E / np.linalg.norm(E)
    flat = E.ravel()
    return E if flat[np.argmax(np.abs(flat))] >= 0 else -E


def enforce_essential(E) -> np.ndarray:
    """Closest matrix with singular values ``(s, s, 0)``, unit norm, sign fixed."""
    U, S, Vt = np.linalg.svd(np.asarray(E, dtype=float))
    s = 0.5 * (S[0] + S[1])
    return sign_normalize(U @ np.diag([s, s, 0.0]) @ Vt)


# ---------------------------------------------------------------------------
# Linear solvers
# ---------------------------------------------------------------------------


def _hartley(x):
    c = x.mean(axis=0)
    d = np.sqrt(((x - c) ** 2).sum(1)).mean()
    if not d > 0:
        raise DegenerateConfigurationError("all points coincide")
    s = np.sqrt(2.0) / d
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def _as_2d(x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] == 3:
        x = x[:, :2] / x[:, 2:3]
    return x.reshape(-1, 2)


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Rows ``kron(x2~, x1~)`` of the (optionally Hartley-normalized) points.

    A solution ``e`` of the normalized problem maps back through
    ``E = T2^T reshape(e) T1``.
    """

    rows: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    T1: np.ndarray
    T2: np.ndarray

    @classmethod
    def build(cls, x1, x2, normalize: bool = True) -> "DesignMatrix":
        x1 = _as_2d(x1)
        x2 = _as_2d(x2)
        if x1.shape != x2.shape:
            raise ValueError("point sets differ in size")
        if x1.shape[0] < 5:
            raise DegenerateConfigurationError("need at least 5 correspondences")
        if max(np.abs(x1).max(), np.abs(x2).max()) > 50:
            warnings.warn("solver inputs exceed normalized-coordinate range; "
                          "pass K^-1 normalized points for good conditioning",
                          ConditioningWarning, stacklevel=3)
        if normalize:
            T1, T2 = _hartley(x1), _hartley(x2)
        else:
            T1 = T2 = np.eye(3)
        h1 = homogeneous(x1) @ T1.T
        h2 = homogeneous(x2) @ T2.T
        rows = (h2[:, :, None] * h1[:, None, :]).reshape(-1, 9)
        return cls(rows, x1, x2, T1, T2)

    def denormalize(self, e) -> np.ndarray:
        return self.T2.T @ np.asarray(e).reshape(3, 3) @ self.T1


def _smallest_eigvec(M):
    lam, V = np.linalg.eigh(0.5 * (M + M.T))
    e = V[:, 0]
    if e[np.argmax(np.abs(e))] < 0:
        e = -e
        V = V.copy()
        V[:, 0] = e
    return lam, V


def _eigengap_ok(lam):
    return lam[1] - lam[0] > TOL.eigengap * max(abs(lam[-1]), np.finfo(float).tiny)


def _hypothesis(a: DesignMatrix, e, tag, weights=None):
    E = enforce_essential(a.denormalize(e))
    if weights is None:
        score = mean_sampson(E, a.x1, a.x2)
    else:
        sup = weights > 0
        score = mean_sampson(E, a.x1[sup], a.x2[sup])
    return EssentialHypothesis(E, score, tag, None if weights is None else np.array(weights))


def weighted_svd_solve(a: DesignMatrix, weights):
    """Minimize ``|diag(sqrt(w)) A e|`` over unit ``e``; also return ``de/dw``.

    ``e`` is the eigenvector of ``A^T W A`` for its smallest eigenvalue.  Its
    derivative with respect to ``w_i`` follows from first-order eigenvector
    perturbation::

        de/dw_i = -sum_k v_k (v_k . a_i)(a_i . e) / (lambda_k - lambda_0)

    Returns ``(hypothesis, e, grad)`` with ``grad`` of shape ``(9, n)``.
    """
    w = np.asarray(weights, dtype=float).reshape(-1)
    A = a.rows
    if w.shape[0] != A.shape[0]:
        raise ValueError("one weight per design-matrix row required")
    if np.any(w < 0) or not np.any(w > 0):
        raise ValueError("weights must be nonnegative and not all zero")
    M = A.T @ (w[:, None] * A)
    lam, V = _smallest_eigvec(M)
    if not _eigengap_ok(lam):
        raise NonDifferentiableError("smallest eigenvalue of A^T W A is repeated")
    e = V[:, 0]
    Vr = V[:, 1:]
    Ae = A @ e
    grad = -(Vr / (lam[1:] - lam[0])) @ (Vr.T @ A.T) * Ae[None, :]
    return _hypothesis(a, e, "weighted_svd", w), e, grad


def eight_point(x1, x2, weights=None) -> EssentialHypothesis:
    """Hartley-normalized (weighted) linear estimate with rank-2 projection."""
    n = _as_2d(x1).shape[0]
    if n < 8:
        warnings.warn(f"eight_point with {n} < 8 correspondences is underdetermined",
                      RuntimeWarning, stacklevel=2)
    a = DesignMatrix.build(x1, x2)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    M = a.rows.T @ (w[:, None] * a.rows)
    lam, V = _smallest_eigvec(M)
    if not _eigengap_ok(lam):
        raise DegenerateConfigurationError("design matrix null space has dimension > 1 "
                                           "(coplanar, collinear or duplicated points?)")
    return _hypothesis(a, V[:, 0], "eight_point", None if weights is None else w)


def sampson_refit(x1, x2, e, rounds: int = 3) -> EssentialHypothesis:
    """Iteratively reweighted eight-point fit whose weights ``1 / den_i``
    turn the algebraic cost into the Sampson cost of the previous estimate."""
    h1 = homogeneous(_as_2d(x1))
    h2 = homogeneous(_as_2d(x2))
    hyp = None
    for _ in range(rounds):
        Ex1 = h1 @ e.T
        Etx2 = h2 @ e
        den = Ex1[:, 0] ** 2 + Ex1[:, 1] ** 2 + Etx2[:, 0] ** 2 + Etx2[:, 1] ** 2
        w = 1.0 / np.maximum(den, np.median(den) * 1e-6 + TOL.sampson_denominator)
        hyp = eight_point(x1, x2, w / w.max())
        e = hyp.e
    return hyp


# ---------------------------------------------------------------------------
# Five-point solver
# ---------------------------------------------------------------------------

# monomials x^i y^j z^k of degree <= 3: cubic ones first, then the basis
_CUBIC = [(3, 0, 0), (2, 1, 0), (2, 0, 1), (1, 2, 0), (1, 1, 1),
          (1, 0, 2), (0, 3, 0), (0, 2, 1), (0, 1, 2), (0, 0, 3)]
_BASIS = [(2, 0, 0), (1, 1, 0), (1, 0, 1), (0, 2, 0), (0, 1, 1),
          (0, 0, 2), (1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 0, 0)]
_MONOS = _CUBIC + _BASIS


def _pmul(a, b):
    out = np.zeros((4, 4, 4))
    for i, j, k in zip(*np.nonzero(a)):
        out[i:, j:, k:] += a[i, j, k] * b[: 4 - i, : 4 - j, : 4 - k]
    return out


def _poly_matrix(X, Y, Z, W):
    P = np.zeros((3, 3, 4, 4, 4))
    P[:, :, 1, 0, 0] = X
    P[:, :, 0, 1, 0] = Y
    P[:, :, 0, 0, 1] = Z
    P[:, :, 0, 0, 0] = W
    return P


def _constraint_matrix(X, Y, Z, W):
    """10 x 20 coefficients of det(E) = 0 and 2 E E^T E - tr(E E^T) E = 0."""
    E = _poly_matrix(X, Y, Z, W)
    EEt = np.zeros((3, 3, 4, 4, 4))
    for r in range(3):
        for c in range(3):
            for k in range(3):
                EEt[r, c] += _pmul(E[r, k], E[c, k])
    tr = EEt[0, 0] + EEt[1, 1] + EEt[2, 2]
    eqs = []
    for r in range(3):
        for c in range(3):
            acc = np.zeros((4, 4, 4))
            for k in range(3):
                acc += 2.0 * _pmul(EEt[r, k], E[k, c])
            acc -= _pmul(tr, E[r, c])
            eqs.append(acc)
    det = (_pmul(_pmul(E[0, 0], E[1, 1]), E[2, 2]) + _pmul(_pmul(E[0, 1], E[1, 2]), E[2, 0])
           + _pmul(_pmul(E[0, 2], E[1, 0]), E[2, 1]) - _pmul(_pmul(E[0, 2], E[1, 1]), E[2, 0])
           - _pmul(_pmul(E[0, 1], E[1, 0]), E[2, 2]) - _pmul(_pmul(E[0, 0], E[1, 2]), E[2, 1]))
    eqs.append(det)
    return np.array([[p[m] for m in _MONOS] for p in eqs])


def _action_matrix(R):
    """Multiplication-by-x matrix on the quadratic-and-lower monomial basis.

    ``R`` expresses each cubic monomial as ``-R @ basis`` on the solution set.
    """
    Mx = np.zeros((10, 10))
    for row, (i, j, k) in enumerate(_BASIS):
        prod = (i + 1, j, k)
        if prod in _BASIS:
            Mx[row, _BASIS.index(prod)] = 1.0
        else:
            Mx[row] = -R[_CUBIC.index(prod)]
    return Mx


def five_point(x1, x2) -> list[EssentialHypothesis]:
    """All real essential matrices consistent with exactly five correspondences.

    The null space of the 5x9 design matrix is four dimensional; writing
    ``E = xX + yY + zZ + W`` the cubic constraints give ten equations in
    twenty monomials.  Gauss-Jordan elimination of the cubic monomials
    leaves a 10x10 multiplication matrix whose eigenvalues are the roots of
    the degree-10 univariate polynomial and whose eigenvectors carry the
    monomial values of each solution.
    """
    x1 = _as_2d(x1)
    x2 = _as_2d(x2)
    if x1.shape[0] != 5 or x2.shape[0] != 5:
        raise ValueError("five_point needs exactly five correspondences")
    h1, h2 = homogeneous(x1), homogeneous(x2)
    A = (h2[:, :, None] * h1[:, None, :]).reshape(5, 9)
    _, S, Vt = np.linalg.svd(A)
    if S[4] <= TOL.degenerate_singular * S[0]:
        raise DegenerateConfigurationError("five-point configuration is degenerate")
    X, Y, Z, W = (Vt[5 + i].reshape(3, 3) for i in range(4))
    C = _constraint_matrix(X, Y, Z, W)
    try:
        R = np.linalg.solve(C[:, :10], C[:, 10:])
    except np.linalg.LinAlgError as exc:
        raise DegenerateConfigurationError("five-point elimination failed") from exc
    lam, vecs = np.linalg.eig(_action_matrix(R))
    out = []
    for m in range(10):
        v = vecs[:, m]
        scale = np.abs(v).max()
        if abs(lam[m].imag) > 1e-8 * max(1.0, abs(lam[m].real)) or abs(v[9]) < 1e-12 * scale:
            continue
        v = (v / v[9]).real
        E = lam[m].real * X + v[7] * Y + v[8] * Z + W
        E = sign_normalize(E)
        if np.abs((h2 @ E * h1).sum(1)).max() > 1e-6:
            continue
        Ep = enforce_essential(E)
        out.append(EssentialHypothesis(Ep, mean_sampson(Ep, x1, x2), "five_point"))
    return out


# ---------------------------------------------------------------------------
# Decomposition and chirality
# ---------------------------------------------------------------------------


def decompose(e) -> list[Pose]:
    """The four ``(R, t)`` factorizations of ``E``, ``t`` unit length."""
    U, _, Vt = np.linalg.svd(np.asarray(e, dtype=float))
    if np.linalg.det(U) < 0:
        U[:, 2] *= -1
    if np.linalg.det(Vt) < 0:
        Vt[2] *= -1
    R1 = U @ _W @ Vt
    R2 = U @ _W.T @ Vt
    t = U[:, 2] / np.linalg.norm(U[:, 2])
    return [Pose(R1, t, True), Pose(R1, -t, True), Pose(R2, t, True), Pose(R2, -t, True)]


def _triangulate_midpoint(pose: Pose, x1, x2):
    d1 = homogeneous(x1)
    d2 = homogeneous(x2) @ pose.R  # R^T d2, ray direction of camera 2 in frame 1
    c2 = -pose.R.T @ pose.t
    # solve s d1 - u d2 = c2 in least squares, per point
    a = (d1 * d1).sum(1)
    b = (d1 * d2).sum(1)
    c = (d2 * d2).sum(1)
    p = d1 @ c2
    q = d2 @ c2
    den = a * c - b * b
    ok = np.abs(den) > 1e-15
    den = np.where(ok, den, 1.0)
    s = np.where(ok, (c * p - b * q) / den, 0.0)
    u = np.where(ok, (b * p - a * q) / den, 0.0)
    X = 0.5 * (s[:, None] * d1 + (c2 + u[:, None] * d2))
    Xh = np.column_stack([X, np.where(ok, 1.0, 0.0)])
    return Xh


def triangulate(pose: Pose, x1, x2, method: str = "dlt") -> np.ndarray:
    """Homogeneous points (n, 4) in camera-1 coordinates, last coordinate >= 0."""
    x1 = np.ascontiguousarray(_as_2d(x1))
    x2 = np.ascontiguousarray(_as_2d(x2))
    if method == "midpoint":
        return _triangulate_midpoint(pose, x1, x2)
    if method != "dlt":
        raise ValueError("method must be 'dlt' or 'midpoint'")
    P1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    P2 = np.hstack([pose.R, pose.t[:, None]])
    return _kernels.triangulate_dlt(P1, P2, x1, x2)


def chirality_votes(pose: Pose, x1, x2, method: str = "dlt") -> np.ndarray:
    """Boolean mask of points triangulating in front of both cameras."""
    X = triangulate(pose, x1, x2, method)
    w = X[:, 3]
    z1 = X[:, 2]
    z2 = X[:, :3] @ pose.R[2] + pose.t[2] * w
    return (w > 0) & (z1 > 0) & (z2 > 0)


def chirality_select(candidates, x1, x2, method: str = "dlt") -> Pose:
    """Candidate with the most points in front of both cameras.

    Ties go to the lower mean Sampson distance of ``[t]x R``, then to the
    earlier candidate.
    """
    x1 = _as_2d(x1)
    x2 = _as_2d(x2)
    if x1.shape[0] < 1:
        raise ValueError("need at least one correspondence")
    keys = []
    for idx, pose in enumerate(candidates):
        votes = int(chirality_votes(pose, x1, x2, method).sum())
        samp = mean_sampson(skew(pose.t) @ pose.R, x1, x2)
        keys.append((-votes, round(samp, 12), idx))
    best = min(keys)
    if best[0] == 0:
        raise NoValidPoseError("no candidate places any point in front of both cameras")
    return candidates[best[2]]


def recover_pose(e, x1, x2, method: str = "dlt") -> Pose:
    return chirality_select(decompose(e), x1, x2, method)


# ---------------------------------------------------------------------------
# RANSAC
# ---------------------------------------------------------------------------


def ransac_estimate(x1, x2, cfg: RansacConfig = RansacConfig()) -> EssentialHypothesis:
    """Hypothesize-and-verify with a Sampson inlier test and a final refit.

    Iteration ``i`` draws its sample from a generator seeded by
    ``(cfg.seed, i)``, so the best hypothesis over the first ``k``
    iterations never depends on how many iterations follow.
    """
    x1 = _as_2d(x1)
    x2 = _as_2d(x2)
    n = x1.shape[0]
    if n < cfg.sample_size:
        raise RobustFailureError(f"need at least {cfg.sample_size} correspondences, got {n}")
    hyps = []
    for it in range(cfg.iterations):
        rng = np.random.default_rng([cfg.seed, it])
        idx = rng.choice(n, cfg.sample_size, replace=False)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                if cfg.sample_size == 8:
                    hyps.append(eight_point(x1[idx], x2[idx]).e)
                else:
                    hyps.extend(h.e for h in five_point(x1[idx], x2[idx]))
        except (DegenerateConfigurationError, np.linalg.LinAlgError):
            continue
    if not hyps:
        raise RobustFailureError("every RANSAC sample was degenerate")
    Es = np.ascontiguousarray(np.stack(hyps))
    d, valid = _kernels.sampson_many(Es, np.ascontiguousarray(homogeneous(x1)),
                                     np.ascontiguousarray(homogeneous(x2)))
    inl = valid & (d < cfg.inlier_threshold)
    counts = inl.sum(1)
    if counts.max() < cfg.sample_size:
        raise RobustFailureError(f"best hypothesis has only {counts.max()} inliers")
    # hypotheses whose raw support reaches a fraction of the running best are
    # locally optimized; eligibility only looks at earlier iterations, so the
    # final support can only grow as iterations are added
    best = None
    raw_best = 0
    seen = set()
    for h in range(Es.shape[0]):
        raw_best = max(raw_best, int(counts[h]))
        if counts[h] < max(cfg.sample_size, cfg.lo_fraction * raw_best):
            continue
        key_support = inl[h].tobytes()
        if key_support in seen:
            continue
        seen.add(key_support)
        e, support = _local_optimize(x1, x2, Es[h], inl[h], cfg)
        key = (int(support.sum()), -_mean_support(e, x1, x2, support))
        if best is None or key > best[0]:
            best = (key, e, support)
    (_, neg_score), e, support = best
    return EssentialHypothesis(e, -neg_score, "eight_point", None, support)


def _mean_support(e, x1, x2, support) -> float:
    return mean_sampson(e, x1[support], x2[support])


def _local_optimize(x1, x2, e, support, cfg):
    """Refit on the support and re-classify until the support stops changing."""
    e = enforce_essential(e)
    for _ in range(cfg.refine_rounds):
        if support.sum() < 8:
            break
        try:
            fit = eight_point(x1[support], x2[support])
            fit = sampson_refit(x1[support], x2[support], fit.e)
        except DegenerateConfigurationError:
            break
        dn = sampson_distance(fit.e, x1, x2)
        new = ~np.ma.getmaskarray(dn) & (dn.filled(np.inf) < cfg.inlier_threshold)
        if new.sum() < support.sum():
            break
        e = fit.e
        if np.array_equal(new, support):
            break
        support = new
    return e, support


# ---------------------------------------------------------------------------
# Multiple hypotheses from graph weights
# ---------------------------------------------------------------------------


def hypothesis_temperatures(m: int) -> np.ndarray:
    if m < 1:
        raise ValueError("m must be >= 1")
    if m == 1:
        return np.array([1.0])
    return np.logspace(np.log10(0.5), np.log10(2.0), m)


def multi_hypothesis(graph, cam, m: int = 5):
    """Weighted-SVD hypotheses under ``w ** (1 / T)`` for log-spaced ``T``.

    Returns ``(hypotheses, selected)`` where ``selected`` indexes the
    hypothesis with the lowest mean Sampson distance weighted by the graph's
    node weights.
    """
    corr = graph.correspondences
    x1 = cam.normalize(corr.x1)
    x2 = cam.normalize(corr.x2)
    w = np.asarray(graph.weights, dtype=float)
    a = DesignMatrix.build(x1, x2)
    hyps, scores = [], []
    errors = []
    for T in hypothesis_temperatures(m):
        wt = w ** (1.0 / T)
        try:
            h, _, _ = weighted_svd_solve(a, wt)
        except (NonDifferentiableError, ValueError) as exc:
            errors.append(exc)
            continue
        d = sampson_distance(h.e, x1, x2).filled(0.0)
        scores.append(float((w * d).sum() / w.sum()))
        hyps.append(EssentialHypothesis(h.e, scores[-1], h.solver_tag, wt))
    if not hyps:
        raise NoValidPoseError(f"all {m} hypotheses failed: {errors[0] if errors else ''}")
    return hyps, int(np.argmin(scores))
