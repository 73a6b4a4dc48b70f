"""3-D lifting of correspondences and the MST + KNN correspondence graph."""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import _kernels
from .correspondence import Correspondences
from .errors import DegenerateGraphError
from .geometry import CameraModel, homogeneous, sampson_distance

log = logging.getLogger(__name__)

DEFAULT_K = 4
SCORER_MODES = ("residual", "message_passing")


class Lifted(NamedTuple):
    points: np.ndarray  # (m, 3) camera-1 coordinates
    index: np.ndarray  # source correspondence of each point
    dropped: int


def lift(correspondences: Correspondences, values, cam: CameraModel,
         mode: str = "depth") -> Lifted:
    """``P_i = z_i K^-1 x1~_i`` with ``z_i`` given directly or as ``f B / d_i``."""
    v = np.asarray(values, dtype=float).reshape(-1)
    if v.shape[0] != len(correspondences):
        raise ValueError("one depth or disparity per correspondence required")
    if mode not in ("depth", "disparity"):
        raise ValueError("mode must be 'depth' or 'disparity'")
    ok = np.isfinite(v) & (v > 0)
    dropped = int((~ok).sum())
    if dropped:
        log.info("lift: dropped %d correspondences with nonpositive %s", dropped, mode)
    idx = np.flatnonzero(ok)
    z = v[idx] if mode == "depth" else cam.fx * cam.baseline / v[idx]
    rays = homogeneous(correspondences.x1[idx]) @ np.linalg.inv(cam.K).T
    return Lifted(z[:, None] * rays, idx, dropped)


def _canon(edges) -> np.ndarray:
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    e = np.sort(e, axis=1)
    if e.shape[0] == 0:
        return e
    return np.unique(e, axis=0)


def mst_edges(points) -> np.ndarray:
    """Euclidean minimum spanning tree as a sorted ``(n - 1, 2)`` array of ``i < j`` pairs.

    Equal lengths are ordered by ``(i, j)``, which makes the tree unique.
    """
    P = np.ascontiguousarray(np.asarray(points, dtype=float))
    if P.ndim != 2 or P.shape[0] < 1:
        raise ValueError("need at least one point")
    return _canon(_kernels.prim_mst(P))


def mst_weight(points, edges) -> float:
    P = np.asarray(points, dtype=float)
    e = np.asarray(edges)
    if e.size == 0:
        return 0.0
    return float(np.linalg.norm(P[e[:, 0]] - P[e[:, 1]], axis=1).sum())


def knn_neighbors(points, k: int) -> np.ndarray:
    if k < 1:
        raise ValueError("k must be >= 1")
    P = np.ascontiguousarray(np.asarray(points, dtype=float))
    return _kernels.knn(P, int(k))


def knn_edges(points, k: int) -> np.ndarray:
    """Undirected edges from every point to its ``k`` nearest neighbours."""
    nb = knn_neighbors(points, k)
    n = nb.shape[0]
    src = np.repeat(np.arange(n), nb.shape[1])
    return _canon(np.column_stack([src, nb.ravel()]))


@dataclass(frozen=True, eq=False)
class CorrespondenceGraph:
    points: np.ndarray
    correspondences: Correspondences
    edges: np.ndarray
    tags: np.ndarray  # "mst", "knn" or "both" per edge
    weights: np.ndarray
    edges_2d: np.ndarray | None = field(default=None, repr=False)
    source_index: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def with_weights(self, weights) -> "CorrespondenceGraph":
        w = np.asarray(weights, dtype=float).reshape(-1)
        if w.shape[0] != self.n or np.any((w < 0) | (w > 1)):
            raise ValueError("weights must be one value in [0, 1] per node")
        return CorrespondenceGraph(self.points, self.correspondences, self.edges, self.tags, w,
                                   self.edges_2d, self.source_index)

    def adjacency(self) -> list[np.ndarray]:
        nbrs = [[] for _ in range(self.n)]
        for i, j in self.edges:
            nbrs[i].append(j)
            nbrs[j].append(i)
        return [np.array(sorted(v), dtype=np.int64) for v in nbrs]

    def degree(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.n)

    def is_connected(self) -> bool:
        adj = self.adjacency()
        seen = np.zeros(self.n, dtype=bool)
        stack = [0]
        seen[0] = True
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    stack.append(v)
        return bool(seen.all())


def union_edges(mst, knn):
    """Merge two edge arrays, tagging each edge by its origin."""
    mst = _canon(mst)
    knn = _canon(knn)
    all_e = _canon(np.vstack([mst, knn]))
    in_m = {tuple(e) for e in mst.tolist()}
    in_k = {tuple(e) for e in knn.tolist()}
    tags = []
    for e in map(tuple, all_e.tolist()):
        tags.append("both" if (e in in_m and e in in_k) else ("mst" if e in in_m else "knn"))
    return all_e, np.array(tags, dtype=object)


def build_graph(correspondences: Correspondences, depths, cam: CameraModel, k: int = DEFAULT_K,
                mode: str = "depth", with_2d: bool = True) -> CorrespondenceGraph:
    """Lift, then join the MST of the 3-D points with their KNN edges.

    ``with_2d`` additionally stores a KNN graph over first-image pixel
    coordinates.  Node weights start at 1.
    """
    lifted = lift(correspondences, depths, cam, mode)
    if lifted.points.shape[0] < 2:
        raise DegenerateGraphError("need at least two liftable correspondences")
    P = lifted.points
    edges, tags = union_edges(mst_edges(P), knn_edges(P, k))
    corr = correspondences[lifted.index]
    e2d = knn_edges(corr.x1, k) if with_2d else None
    return CorrespondenceGraph(P, corr, edges, tags, np.ones(P.shape[0]), e2d, lifted.index)


# ---------------------------------------------------------------------------
# Node scoring
# ---------------------------------------------------------------------------


def node_residuals(graph: CorrespondenceGraph, e_init, cam: CameraModel) -> np.ndarray:
    """Sampson residual of each node under ``e_init`` (normalized coordinates).

    Epipole-degenerate pairs get the largest finite residual of the batch.
    """
    d = sampson_distance(e_init, cam.normalize(graph.correspondences.x1),
                         cam.normalize(graph.correspondences.x2))
    fill = float(d.max()) if d.count() else 0.0
    return d.filled(fill)


def _residual_scale(d):
    pos = d[d > 0]
    if pos.size == 0:
        return 0.0
    med = float(np.median(d))
    # more than half exact: fall back to the smallest positive residual
    return med if med > 0 else float(pos.min())


def _mean_neighbors(adj, H):
    out = np.zeros_like(H)
    for i, nb in enumerate(adj):
        if nb.size:
            out[i] = H[nb].mean(axis=0)
    return out


def node_features(graph: CorrespondenceGraph, residuals) -> np.ndarray:
    """Per-node inputs to the message-passing scorer, after two rounds of
    mean-neighbour aggregation: ``(n, 12)``."""
    d = np.asarray(residuals, dtype=float)
    s = _residual_scale(d) or 1.0
    P = graph.points
    c = P - np.median(P, axis=0)
    rad = np.linalg.norm(c, axis=1)
    rad = rad / (np.median(rad) or 1.0)
    deg = graph.degree().astype(float)
    deg = deg / (deg.mean() or 1.0)
    f = np.column_stack([np.log1p(d / s), rad, deg])
    adj = graph.adjacency()
    h1 = np.hstack([f, _mean_neighbors(adj, f)])
    return np.hstack([h1, _mean_neighbors(adj, h1)])


@dataclass(frozen=True, eq=False)
class MessagePassingScorer:
    """Logistic read-out over aggregated node features."""

    coef: np.ndarray
    bias: float

    def __call__(self, features) -> np.ndarray:
        z = np.asarray(features) @ self.coef + self.bias
        return 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))


def train_mp_scorer(features, labels, l2: float = 1e-3, iterations: int = 50) -> MessagePassingScorer:
    """Fit the logistic read-out by Newton's method on stacked node features."""
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=float)
    Xb = np.hstack([X, np.ones((X.shape[0], 1))])
    w = np.zeros(Xb.shape[1])
    reg = l2 * np.eye(Xb.shape[1])
    reg[-1, -1] = 0.0
    for _ in range(iterations):
        p = 1.0 / (1.0 + np.exp(-np.clip(Xb @ w, -500, 500)))
        g = Xb.T @ (p - y) + reg @ w
        H = (Xb * (p * (1 - p))[:, None]).T @ Xb + reg + 1e-9 * np.eye(Xb.shape[1])
        step = np.linalg.solve(H, g)
        w -= step
        if np.abs(step).max() < 1e-10:
            break
    return MessagePassingScorer(w[:-1], float(w[-1]))


def planted_outlier_graph(seed: int, n_points: int = 60, outlier_frac: float = 0.2,
                          sigma_p: float = 0.5, k: int = DEFAULT_K):
    """Simulated graph with a fraction of correspondences replaced by random
    pixels; returns ``(graph, inlier_mask, true_essential, cam)``."""
    from .geometry import essential_from_pose
    from .sim import NoiseConfig, generate_scene, perturb, stereo_depths

    scene = generate_scene(n_points, 2, motion="random", rot_max=0.1, seed=seed)
    clean, ids = scene.correspondences(0)
    noisy = perturb(clean, NoiseConfig(sigma_p=sigma_p), scene.cam, seed)
    rng = np.random.default_rng([seed, 505])
    n = len(noisy)
    out = rng.choice(n, int(round(outlier_frac * n)), replace=False)
    x2 = noisy.x2.copy()
    x2[out] = rng.uniform([0, 0], [scene.cam.width, scene.cam.height], (out.size, 2))
    corr = noisy.with_points(noisy.x1, x2)
    depth = stereo_depths(scene, 0, ids).depth
    g = build_graph(corr, depth, scene.cam, k)
    inl = np.ones(n, dtype=bool)
    inl[out] = False
    return g, inl[g.source_index], essential_from_pose(scene.relative_pose(0)), scene.cam


@functools.lru_cache(maxsize=1)
def default_mp_scorer() -> MessagePassingScorer:
    """Scorer trained on a fixed set of simulated planted-outlier graphs."""
    from .solvers import ransac_estimate, RansacConfig

    feats, labels = [], []
    for seed in range(1000, 1012):
        g, inl, _, cam = planted_outlier_graph(seed)
        x1, x2 = cam.normalize(g.correspondences.x1), cam.normalize(g.correspondences.x2)
        e0 = ransac_estimate(x1, x2, RansacConfig(iterations=200, inlier_threshold=1e-5,
                                                  seed=seed)).e
        feats.append(node_features(g, node_residuals(g, e0, cam)))
        labels.append(inl.astype(float))
    return train_mp_scorer(np.vstack(feats), np.concatenate(labels))


def score_nodes(graph: CorrespondenceGraph, e_init, cam: CameraModel, mode: str = "residual",
                scorer: MessagePassingScorer | None = None) -> np.ndarray:
    """Per-node weights in ``[0, 1]``.

    ``residual``: ``exp(-d / s)`` with ``s`` the median Sampson residual.
    ``message_passing``: two rounds of neighbour averaging of node features
    followed by a logistic read-out.
    """
    if mode not in SCORER_MODES:
        raise ValueError(f"mode must be one of {SCORER_MODES}")
    if graph.n == 1:
        return np.ones(1)
    d = node_residuals(graph, e_init, cam)
    if not np.any(d > 0):
        log.warning("score_nodes: all residuals are zero; using uniform weights")
        return np.ones(graph.n)
    if mode == "residual":
        return np.exp(-d / _residual_scale(d))
    scorer = scorer or default_mp_scorer()
    return np.clip(scorer(node_features(graph, d)), 0.0, 1.0)
