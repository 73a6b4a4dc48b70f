import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from epivo.errors import NoValidMatchError
from epivo.io import load_descriptor_set, save_descriptor_set
from epivo.matcher import (
    DEFAULT_TAU,
    DescriptorSet,
    cosine_similarity,
    extract_patch,
    match,
    patch_cosine_topk,
    score_matrix,
    sinkhorn,
    threshold_matches,
)


def _set(desc, loc=None):
    desc = np.asarray(desc, dtype=float)
    if loc is None:
        loc = np.arange(2 * len(desc), dtype=float).reshape(-1, 2)
    return DescriptorSet(desc, loc)


def test_score_matrix_examples(rng):
    basis = np.eye(4)
    np.testing.assert_array_equal(score_matrix(_set(basis), _set(basis)), np.eye(4))
    a, b = rng.normal(size=(1, 8)), rng.normal(size=(1, 8))
    assert score_matrix(_set(a), _set(b))[0, 0] == pytest.approx(float(a[0] @ b[0]), rel=1e-15)


def test_score_matrix_double_loop_oracle(rng):
    a, b = rng.normal(size=(5, 8)), rng.normal(size=(7, 8))
    S = score_matrix(_set(a), _set(b))
    for i in range(5):
        for j in range(7):
            assert S[i, j] == pytest.approx(sum(a[i, k] * b[j, k] for k in range(8)), rel=1e-12)
    with pytest.raises(ValueError):
        score_matrix(_set(a), _set(rng.normal(size=(3, 4))))


def test_sinkhorn_examples(rng):
    P = sinkhorn([[10.0, 0.0], [0.0, 10.0]], temperature=1.0).probs
    np.testing.assert_allclose(P, np.eye(2), atol=1e-4)
    np.testing.assert_array_equal(sinkhorn([[3.7]]).probs, [[1.0]])
    m = sinkhorn(rng.normal(size=(6, 6)), iterations=100)
    assert np.abs(m.probs.sum(1) - 1).max() < 1e-6
    assert np.abs(m.probs.sum(0) - 1).max() < 1e-6
    assert m.residual < 1e-6


def test_sinkhorn_rectangular_marginals(rng):
    m = sinkhorn(rng.normal(size=(4, 10)), iterations=200)
    np.testing.assert_allclose(m.probs.sum(1), 1.0, atol=1e-6)
    np.testing.assert_allclose(m.probs.sum(0), 0.4, atol=1e-6)
    m = sinkhorn(rng.normal(size=(10, 4)), iterations=200)
    np.testing.assert_allclose(m.probs.sum(0), 1.0, atol=1e-6)


def test_sinkhorn_rejects_bad_input():
    S = np.zeros((3, 3))
    S[1] = -np.inf
    with pytest.raises(NoValidMatchError):
        sinkhorn(S)
    with pytest.raises(ValueError):
        sinkhorn([[np.nan]])
    with pytest.raises(ValueError):
        sinkhorn(np.zeros((2, 2)), iterations=0)
    with pytest.raises(ValueError):
        sinkhorn(np.zeros((2, 2)), temperature=0.0)


scores = arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 8)),
                elements=st.floats(-5, 5, allow_nan=False))


@given(scores, st.floats(-50, 50))
def test_sinkhorn_shift_invariance(S, c):
    a = sinkhorn(S, iterations=60).probs
    b = sinkhorn(S + c, iterations=60).probs
    np.testing.assert_allclose(a, b, atol=1e-6)


@given(scores)
def test_sinkhorn_residual_non_increasing(S):
    res = sinkhorn(S, iterations=40).residuals
    assert np.all(np.diff(res) <= 1e-12 * (1 + res[:-1]))
    assert np.all(sinkhorn(S).probs >= 0)


def _near_identity(n, eps=0.02):
    P = np.full((n, n), eps / (n - 1))
    np.fill_diagonal(P, 1 - eps)
    return P


def test_threshold_examples():
    P = _near_identity(5)
    a = _set(np.eye(5))
    m = threshold_matches(P, DEFAULT_TAU, a, a)
    assert DEFAULT_TAU == 0.65
    np.testing.assert_array_equal(m.pairs, np.stack([np.arange(5)] * 2, axis=1))
    np.testing.assert_allclose(m.confidence, 0.98)
    assert len(threshold_matches(P, 1.0, a, a)) == 0
    assert len(threshold_matches(np.eye(5), 1.0, a, a)) == 0  # strict inequality


@given(arrays(np.float64, st.tuples(st.integers(1, 7), st.integers(1, 7)), elements=st.floats(0, 1)),
       st.floats(0.05, 0.95))
def test_threshold_brute_force_oracle(P, tau):
    n1, n2 = P.shape
    a, b = _set(np.ones((n1, 2))), _set(np.ones((n2, 2)))
    want = []
    for i in range(n1):
        for j in range(n2):
            if P[i, j] <= tau:
                continue
            row_best = min(jj for jj in range(n2) if P[i, jj] == P[i].max())
            col_best = min(ii for ii in range(n1) if P[ii, j] == P[:, j].max())
            if row_best == j and col_best == i:
                want.append((i, j))
    got = threshold_matches(P, tau, a, b)
    assert [tuple(p) for p in got.pairs.tolist()] == want if want else len(got) == 0
    assert np.all(got.confidence > tau)
    unfiltered = threshold_matches(P, tau, a, b, mutual=False)
    assert len(unfiltered) == int((P > tau).sum())


def test_topk_examples():
    p = np.array([[1.0, 2.0, 3.0], [1.0, 0.0, 0.0]])
    q = np.array([[1.0, 2.0, 3.0], [0.0, 1.0, 0.0]])
    sel = patch_cosine_topk(p, q, [(1, 1), (0, 0)], k=2)
    np.testing.assert_array_equal(sel.order, [1, 0])
    np.testing.assert_allclose(sel.similarity, [1.0, 0.0])


def test_topk_sort_oracle(rng):
    pa, pb = rng.normal(size=(10, 6)), rng.normal(size=(10, 6))
    pairs = np.stack([rng.permutation(10), rng.permutation(10)], axis=1)
    sel = patch_cosine_topk(pa, pb, pairs, k=3)
    sims = [float(cosine_similarity(pa[i], pb[j])) for i, j in pairs]
    want = sorted(range(10), key=lambda c: -sims[c])[:3]
    np.testing.assert_array_equal(sel.order, want)
    np.testing.assert_allclose(sel.similarity, [sims[c] for c in want], rtol=1e-12)


def test_topk_excludes_zero_patches(caplog):
    pa = np.array([[0.0, 0.0], [1.0, 0.0]])
    with caplog.at_level(logging.WARNING):
        sel = patch_cosine_topk(pa, pa, [(0, 0), (1, 1)], k=5)
    assert sel.excluded == 1 and sel.order.tolist() == [1]
    assert "zero-norm" in caplog.text


@given(arrays(np.float64, (6, 4), elements=st.floats(-3, 3)), st.integers(1, 8))
def test_topk_size_and_range(p, k):
    pairs = [(i, (i + 1) % 6) for i in range(6)]
    sel = patch_cosine_topk(p, p, pairs, k)
    valid = 6 - sel.excluded
    assert len(sel.order) == min(k, valid)
    assert np.all(np.abs(sel.similarity) <= 1.0)


def test_match_is_deterministic_and_recovers_permutation(rng):
    d = rng.normal(size=(30, 64))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    d *= 4.0
    perm = rng.permutation(30)
    loc = rng.uniform(0, 100, size=(30, 2))
    a, b = DescriptorSet(d, loc), DescriptorSet(d[perm], loc[perm])
    m1, m2 = match(a, b), match(a, b)
    np.testing.assert_array_equal(m1.pairs, m2.pairs)
    assert len(m1) == 30
    np.testing.assert_array_equal(perm[m1.pairs[:, 1]], m1.pairs[:, 0])


def test_extract_patch_pads_at_border():
    img = np.arange(16.0).reshape(4, 4)
    p = extract_patch(img, (0, 0), size=2).reshape(2, 2)
    np.testing.assert_array_equal(p, [[0, 0], [0, 0.0]])
    np.testing.assert_array_equal(extract_patch(img, (2, 2), size=2).reshape(2, 2), [[5, 6], [9, 10]])


def test_descriptor_container_round_trip(tmp_path, rng):
    ds = DescriptorSet(rng.normal(size=(4, 3)), rng.uniform(0, 640, size=(4, 2)))
    save_descriptor_set(tmp_path / "d.txt", ds)
    back = load_descriptor_set(tmp_path / "d.txt")
    np.testing.assert_array_equal(back.descriptors, ds.descriptors)
    np.testing.assert_array_equal(back.locations, ds.locations)
