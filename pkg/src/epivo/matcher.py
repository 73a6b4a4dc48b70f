"""Sparse matching: dot-product scores, Sinkhorn normalization, thresholding
and patch cosine re-ranking."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from . import _kernels
from .correspondence import Correspondences
from .errors import NoValidMatchError

log = logging.getLogger(__name__)

DEFAULT_TAU = 0.65
DEFAULT_ITERATIONS = 50
DEFAULT_TEMPERATURE = 1.0


@dataclass(frozen=True, eq=False)
class DescriptorSet:
    descriptors: np.ndarray
    locations: np.ndarray

    def __post_init__(self):
        d = np.array(self.descriptors, dtype=float)
        if d.ndim != 2:
            raise ValueError("descriptors must be an (n, dim) matrix")
        if not np.all(np.isfinite(d)):
            raise ValueError("descriptors must be finite")
        loc = np.array(self.locations, dtype=float).reshape(-1, 2)
        if loc.shape[0] != d.shape[0]:
            raise ValueError("one location per descriptor required")
        d.setflags(write=False)
        loc.setflags(write=False)
        object.__setattr__(self, "descriptors", d)
        object.__setattr__(self, "locations", loc)

    @property
    def n(self) -> int:
        return self.descriptors.shape[0]

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]


@dataclass(frozen=True, eq=False)
class MatchMatrix:
    probs: np.ndarray
    residuals: np.ndarray  # L1 row-marginal residual after each iteration

    @property
    def residual(self) -> float:
        """Largest absolute deviation of any row or column sum from its target."""
        n1, n2 = self.probs.shape
        r, c = _marginals(n1, n2)
        return float(max(np.abs(self.probs.sum(1) - r).max(), np.abs(self.probs.sum(0) - c).max()))


def _marginals(n1, n2):
    if n1 <= n2:
        return np.ones(n1), np.full(n2, n1 / n2)
    return np.full(n1, n2 / n1), np.ones(n2)


def score_matrix(a: DescriptorSet, b: DescriptorSet) -> np.ndarray:
    if a.dim != b.dim:
        raise ValueError(f"descriptor dimensions differ: {a.dim} vs {b.dim}")
    return a.descriptors @ b.descriptors.T


def sinkhorn(scores, iterations: int = DEFAULT_ITERATIONS,
             temperature: float = DEFAULT_TEMPERATURE) -> MatchMatrix:
    """Alternating row/column normalization of ``exp(scores / temperature)``.

    Runs in the log domain.  Square inputs converge to a doubly stochastic
    matrix; for rectangular inputs the smaller side's sums go to 1 and the
    larger side's to ``min(n1, n2) / max(n1, n2)``.
    """
    S = np.asarray(scores, dtype=float)
    if S.ndim != 2 or S.size == 0:
        raise ValueError("scores must be a nonempty 2-D matrix")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    if np.any(np.isnan(S)) or np.any(S == np.inf):
        raise ValueError("scores must be finite or -inf")
    if np.any(np.all(S == -np.inf, axis=1)) or np.any(np.all(S == -np.inf, axis=0)):
        raise NoValidMatchError("a row or column has no finite score")
    logits = np.ascontiguousarray(S / temperature)
    r, c = _marginals(*S.shape)
    f, g, residuals = _kernels.sinkhorn_log(logits, np.log(r), np.log(c), int(iterations))
    P = np.exp(logits + f[:, None] + g[None, :])
    return MatchMatrix(P, residuals)


def _mutual_best(P):
    # argmax returns the first maximum, i.e. ties go to the lower index
    row_best = np.argmax(P, axis=1)
    col_best = np.argmax(P, axis=0)
    return row_best, col_best


def threshold_matches(p, tau: float, a: DescriptorSet, b: DescriptorSet,
                      mutual: bool = True) -> Correspondences:
    """Keep ``(i, j)`` with ``P[i, j] > tau`` that are mutual best matches."""
    P = p.probs if isinstance(p, MatchMatrix) else np.asarray(p, dtype=float)
    if not 0 < tau <= 1:
        raise ValueError("tau must lie in (0, 1]")
    ii, jj = np.nonzero(P > tau)
    if mutual and ii.size:
        row_best, col_best = _mutual_best(P)
        keep = (row_best[ii] == jj) & (col_best[jj] == ii)
        ii, jj = ii[keep], jj[keep]
    if ii.size == 0:
        return Correspondences.empty()
    dist = np.linalg.norm(a.descriptors[ii] - b.descriptors[jj], axis=1)
    return Correspondences(
        a.locations[ii],
        b.locations[jj],
        confidence=np.clip(P[ii, jj], 0.0, 1.0),
        descriptor_distance=dist,
        pairs=np.stack([ii, jj], axis=1),
    )


class TopK(NamedTuple):
    order: np.ndarray  # indices into the candidate list, best first
    similarity: np.ndarray  # cosine similarity of each selected candidate
    excluded: int  # candidates dropped for a zero-norm patch


def cosine_similarity(p, q) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return (p * q).sum(-1) / (np.linalg.norm(p, axis=-1) * np.linalg.norm(q, axis=-1))


def patch_cosine_topk(patches_a, patches_b, pairs, k: int) -> TopK:
    """Rank candidate pairs by patch cosine similarity and keep the best ``k``.

    Sorting is stable, so equal similarities keep their candidate order.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    pa = np.asarray(patches_a, dtype=float)
    pb = np.asarray(patches_b, dtype=float)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.shape[0] == 0:
        return TopK(np.empty(0, dtype=np.int64), np.empty(0), 0)
    u = pa[pairs[:, 0]]
    v = pb[pairs[:, 1]]
    nu = np.linalg.norm(u, axis=1)
    nv = np.linalg.norm(v, axis=1)
    valid = (nu > 0) & (nv > 0)
    excluded = int((~valid).sum())
    if excluded:
        log.warning("patch_cosine_topk: %d candidates with zero-norm patches excluded", excluded)
    cand = np.flatnonzero(valid)
    sim = (u[cand] * v[cand]).sum(1) / (nu[cand] * nv[cand])
    sim = np.clip(sim, -1.0, 1.0)
    order = np.argsort(-sim, kind="stable")[:k]
    return TopK(cand[order], sim[order], excluded)


def sinusoidal_encoding(positions, n_freq: int = 8, base: float = 100.0) -> np.ndarray:
    """Fixed sin/cos features of 2-D grid positions, ``4 * n_freq`` columns."""
    pos = np.asarray(positions, dtype=float).reshape(-1, 2)
    freqs = base ** (-np.arange(n_freq) / max(n_freq, 1))
    ang = pos[:, :, None] * freqs[None, None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=2).reshape(pos.shape[0], -1)


def encode_patches(patches, positions,
                   encoding: Callable[[np.ndarray], np.ndarray] | None = sinusoidal_encoding,
                   weight: float = 1.0) -> np.ndarray:
    """Append a positional encoding to flattened patch vectors."""
    p = np.asarray(patches, dtype=float).reshape(len(positions), -1)
    if encoding is None:
        return p
    return np.hstack([p, weight * encoding(positions)])


def extract_patch(image, center, size: int = 8) -> np.ndarray:
    """Flattened ``size x size`` crop centred on ``(u, v)``, zero padded at borders."""
    img = np.asarray(image, dtype=float)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w = img.shape[:2]
    u0 = int(round(center[0])) - size // 2
    v0 = int(round(center[1])) - size // 2
    out = np.zeros((size, size, img.shape[2]))
    us = slice(max(u0, 0), min(u0 + size, w))
    vs = slice(max(v0, 0), min(v0 + size, h))
    if us.start < us.stop and vs.start < vs.stop:
        out[vs.start - v0:vs.stop - v0, us.start - u0:us.stop - u0] = img[vs, us]
    return out.ravel()


def match(a: DescriptorSet, b: DescriptorSet, tau: float = DEFAULT_TAU,
          iterations: int = DEFAULT_ITERATIONS, temperature: float = DEFAULT_TEMPERATURE,
          patches_a=None, patches_b=None, top_k: int | None = None) -> Correspondences:
    """Score, normalize, threshold and (when patches are given) cosine re-rank."""
    P = sinkhorn(score_matrix(a, b), iterations, temperature)
    m = threshold_matches(P, tau, a, b)
    if patches_a is None or patches_b is None or len(m) == 0:
        return m if top_k is None else m[np.argsort(-m.confidence, kind="stable")[:top_k]]
    qa = encode_patches(patches_a, a.locations)
    qb = encode_patches(patches_b, b.locations)
    sel = patch_cosine_topk(qa, qb, m.pairs, top_k if top_k is not None else len(m))
    out = m[sel.order]
    return Correspondences(out.x1, out.x2, out.confidence, out.descriptor_distance,
                           sel.similarity, out.pairs)
