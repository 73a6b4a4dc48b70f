import itertools
from collections import deque

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.sparse.csgraph import minimum_spanning_tree
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from epivo.correspondence import Correspondences
from epivo.errors import DegenerateGraphError
from epivo.geometry import CameraModel, essential_from_pose
from epivo.graph import (
    build_graph,
    knn_edges,
    lift,
    mst_edges,
    mst_weight,
    planted_outlier_graph,
    score_nodes,
)
from epivo.io import dump_graph
from epivo.sim import generate_scene, stereo_depths

# quarter-integer grids: exact distances, no near-zero gaps (the sparse-graph
# oracle reads a zero distance as a missing edge)
clouds = arrays(np.int64, st.tuples(st.integers(2, 30), st.just(3)),
                elements=st.integers(-200, 200), unique=True).map(lambda a: a / 4.0)


def _bfs_connected(n, edges):
    adj = {i: set() for i in range(n)}
    for i, j in edges:
        adj[i].add(j)
        adj[j].add(i)
    seen, q = {0}, deque([0])
    while q:
        for v in adj[q.popleft()] - seen:
            seen.add(v)
            q.append(v)
    return len(seen) == n


def _brute_knn(P, k):
    D = cdist(P, P)
    out = set()
    for i in range(len(P)):
        order = sorted((j for j in range(len(P)) if j != i), key=lambda j: (D[i, j], j))
        out |= {tuple(sorted((i, j))) for j in order[:k]}
    return out


def test_lift_examples():
    cam = CameraModel(fx=100, fy=100, cx=320, cy=240, baseline=0.5)
    c = Correspondences([[320.0, 240.0]], [[300.0, 240.0]])
    np.testing.assert_array_equal(lift(c, [10.0], cam).points, [[0.0, 0.0, 10.0]])
    np.testing.assert_allclose(lift(c, [5.0], cam, mode="disparity").points, [[0, 0, 10.0]])
    lifted = lift(Correspondences(np.zeros((3, 2)), np.zeros((3, 2))), [1.0, 0.0, -2.0], cam)
    assert lifted.dropped == 2 and lifted.index.tolist() == [0]


def test_lift_matches_simulator():
    s = generate_scene(80, 2, motion="random", seed=5)
    corr, ids = s.correspondences(0)
    P = lift(corr, stereo_depths(s, 0, ids).depth, s.cam).points
    truth = s.trajectory[0].apply(s.points3d[ids])
    assert np.abs(P - truth).max() < 1e-9


def test_mst_examples():
    P = np.array([[0.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0]])
    e = mst_edges(P)
    assert e.tolist() == [[0, 1], [1, 2]]
    assert mst_weight(P, e) == 3.0
    assert mst_edges(np.zeros((1, 3))).shape == (0, 2)


@given(arrays(np.float64, st.tuples(st.integers(2, 6), st.just(3)),
              elements=st.floats(-10, 10, allow_nan=False), unique=True))
def test_mst_exhaustive(P):
    n = len(P)
    all_e = list(itertools.combinations(range(n), 2))
    D = cdist(P, P)
    best = min(sum(D[i, j] for i, j in T) for T in itertools.combinations(all_e, n - 1)
               if _bfs_connected(n, T))
    e = mst_edges(P)
    assert len(e) == n - 1
    assert mst_weight(P, e) == pytest.approx(best, rel=1e-12, abs=1e-12)


@given(clouds)
def test_mst_against_scipy_and_invariances(P):
    e = mst_edges(P)
    ref = minimum_spanning_tree(cdist(P, P)).sum()
    assert mst_weight(P, e) == pytest.approx(ref, rel=1e-10)
    assert _bfs_connected(len(P), e)
    perm = np.random.default_rng(len(P)).permutation(len(P))
    assert mst_weight(P[perm], mst_edges(P[perm])) == pytest.approx(mst_weight(P, e), rel=1e-10)
    scaled = mst_edges(2.5 * P)
    np.testing.assert_array_equal(scaled, e)


def test_knn_examples():
    sq = np.array([[0.0, 0, 0], [2.0, 0, 0], [2.0, 1, 0], [0.0, 1, 0]])
    assert {tuple(x) for x in knn_edges(sq, 1).tolist()} == {(0, 3), (1, 2)}
    P = np.random.default_rng(0).normal(size=(5, 3))
    assert len(knn_edges(P, 4)) == 10 and len(knn_edges(P, 9)) == 10


@given(clouds, st.integers(1, 6))
def test_knn_oracles(P, k):
    got = {tuple(x) for x in knn_edges(P, k).tolist()}
    assert got == _brute_knn(P, k)
    assert got <= {tuple(x) for x in knn_edges(P, k + 1).tolist()}
    # cKDTree agrees on neighbour distances (ties may pick different indices)
    kk = min(k, len(P) - 1)
    d_ref, _ = cKDTree(P).query(P, kk + 1)
    D = cdist(P, P)
    for i in range(len(P)):
        mine = sorted(D[i, j] for a, b in got for j in ((b,) if a == i else (a,) if b == i else ()))
        assert mine[:kk] == pytest.approx(sorted(np.atleast_1d(d_ref[i]))[1:kk + 1], rel=1e-12)


@given(clouds, st.integers(1, 5))
def test_build_graph_properties(P, k):
    P = P.copy()
    P[:, 2] = np.abs(P[:, 2]) + 1.0
    cam = CameraModel(fx=1, fy=1, cx=0, cy=0, width=2, height=2)
    corr = Correspondences(P[:, :2] / P[:, 2:], P[:, :2] / P[:, 2:])
    g = build_graph(corr, P[:, 2], cam, k)
    n = g.n
    assert len(g.edges) <= (n - 1) + n * k
    assert {tuple(e) for e in mst_edges(g.points).tolist()} <= {tuple(e) for e in g.edges.tolist()}
    assert _bfs_connected(n, g.edges) and g.is_connected()
    assert np.all(g.edges[:, 0] < g.edges[:, 1])
    assert len({tuple(e) for e in g.edges.tolist()}) == len(g.edges)
    assert set(g.tags) <= {"mst", "knn", "both"}


def test_build_graph_needs_two_nodes():
    cam = CameraModel.default()
    with pytest.raises(DegenerateGraphError):
        build_graph(Correspondences([[1.0, 1.0]], [[1.0, 1.0]]), [5.0], cam)


def test_residual_weights():
    s = generate_scene(60, 2, motion="random", rot_max=0.1, seed=8)
    corr, ids = s.correspondences(0)
    E = essential_from_pose(s.relative_pose(0))
    rng = np.random.default_rng(1)
    x2 = corr.x2 + rng.normal(size=corr.x2.shape) * 0.5
    g = build_graph(corr.with_points(corr.x1, x2), stereo_depths(s, 0, ids).depth, s.cam)
    w = score_nodes(g, E, s.cam)
    assert np.all((w >= 0) & (w <= 1))
    from epivo.graph import node_residuals
    d = node_residuals(g, E, s.cam)
    # monotone: larger residual, smaller weight
    order = np.argsort(d)
    assert np.all(np.diff(w[order]) <= 1e-15)
    sigma = np.median(d)
    assert np.exp(-10 * sigma / sigma) < 1e-4
    # an outlier at 10x the median residual
    big = np.argmax(d)
    assert w[big] == pytest.approx(np.exp(-d[big] / sigma), rel=1e-12)


def test_single_node_weight():
    cam = CameraModel.default()
    g = build_graph(Correspondences([[1.0, 1.0], [5.0, 5.0]], [[2.0, 1.0], [6.0, 5.0]]),
                    [5.0, 6.0], cam)
    one = g.__class__(g.points[:1], g.correspondences[:1], np.zeros((0, 2), dtype=np.int64),
                      np.array([], dtype=object), np.ones(1))
    assert score_nodes(one, np.eye(3), cam).tolist() == [1.0]


@pytest.mark.parametrize("mode", ["residual", "message_passing"])
def test_planted_outliers_get_lower_weight(mode):
    g, inl, E, cam = planted_outlier_graph(7)
    w = score_nodes(g, E, cam, mode)
    assert w[~inl].mean() < w[inl].mean()


def test_dump_graph(tmp_path):
    g, _, _, _ = planted_outlier_graph(3, n_points=20)
    dump_graph(tmp_path / "g.txt", g)
    lines = [l for l in (tmp_path / "g.txt").read_text().splitlines() if not l.startswith("#")]
    nodes = [l for l in lines if len(l.split()) == 5]
    edges = [l for l in lines if len(l.split()) == 3]
    assert len(nodes) == g.n and len(edges) == len(g.edges)
