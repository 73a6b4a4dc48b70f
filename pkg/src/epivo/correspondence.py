"""Batched pixel correspondences."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


def _col(a, n, fill):
    if a is None:
        return np.full(n, fill, dtype=float)
    a = np.asarray(a, dtype=float).reshape(-1)
    if a.shape[0] != n:
        raise ValueError(f"expected {n} values, got {a.shape[0]}")
    return a


@dataclass(frozen=True, eq=False)
class Correspondences:
    """``n`` matched pixel pairs ``x1[i] <-> x2[i]`` with per-pair metadata.

    ``confidence`` is the matching probability in ``[0, 1]``;
    ``descriptor_distance`` feeds the matching-noise variance;
    ``similarity`` is the patch cosine score when one was computed (NaN
    otherwise); ``pairs`` holds the source descriptor indices, if any.
    """

    x1: np.ndarray
    x2: np.ndarray
    confidence: np.ndarray | None = None
    descriptor_distance: np.ndarray | None = None
    similarity: np.ndarray | None = None
    pairs: np.ndarray | None = None

    def __post_init__(self):
        x1 = np.array(self.x1, dtype=float).reshape(-1, 2)
        x2 = np.array(self.x2, dtype=float).reshape(-1, 2)
        if x1.shape != x2.shape:
            raise ValueError("x1 and x2 must have the same number of points")
        if not (np.all(np.isfinite(x1)) and np.all(np.isfinite(x2))):
            raise ValueError("correspondence coordinates must be finite")
        n = x1.shape[0]
        conf = _col(self.confidence, n, 1.0)
        if np.any((conf < 0) | (conf > 1)):
            raise ValueError("confidence must lie in [0, 1]")
        dist = _col(self.descriptor_distance, n, 0.0)
        if np.any(dist < 0):
            raise ValueError("descriptor distance must be nonnegative")
        sim = _col(self.similarity, n, np.nan)
        pairs = None
        if self.pairs is not None:
            pairs = np.array(self.pairs, dtype=np.int64).reshape(-1, 2)
            if pairs.shape[0] != n:
                raise ValueError("pairs must have one row per correspondence")
        for name, arr in (("x1", x1), ("x2", x2), ("confidence", conf),
                          ("descriptor_distance", dist), ("similarity", sim), ("pairs", pairs)):
            if arr is not None:
                arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return self.x1.shape[0]

    def __getitem__(self, idx) -> "Correspondences":
        idx = np.atleast_1d(np.arange(len(self))[idx])
        return Correspondences(
            self.x1[idx],
            self.x2[idx],
            self.confidence[idx],
            self.descriptor_distance[idx],
            self.similarity[idx],
            None if self.pairs is None else self.pairs[idx],
        )

    def with_points(self, x1, x2) -> "Correspondences":
        """Same metadata, new coordinates."""
        return replace(self, x1=x1, x2=x2)

    @property
    def stacked(self) -> np.ndarray:
        """``(n, 4)`` array of ``u1 v1 u2 v2`` rows."""
        return np.hstack([self.x1, self.x2])

    @classmethod
    def empty(cls) -> "Correspondences":
        return cls(np.empty((0, 2)), np.empty((0, 2)))

    def equals(self, other: "Correspondences") -> bool:
        """Exact equality of every field (NaN == NaN)."""
        if len(self) != len(other):
            return False
        same = all(
            np.array_equal(getattr(self, f), getattr(other, f), equal_nan=True)
            for f in ("x1", "x2", "confidence", "descriptor_distance", "similarity")
        )
        if (self.pairs is None) != (other.pairs is None):
            return False
        return same and (self.pairs is None or np.array_equal(self.pairs, other.pairs))
