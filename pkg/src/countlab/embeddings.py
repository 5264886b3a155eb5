"""Token embedding sets: m unit vectors in R^d."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("one_hot", "orthonormal", "rademacher", "gaussian")


@dataclass(frozen=True)
class EmbeddingSet:
    vectors: np.ndarray
    kind: str

    def __post_init__(self):
        v = np.array(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValueError("embeddings must be an (m, d) array")
        if self.kind not in KINDS:
            raise ValueError(f"unknown embedding kind {self.kind!r}")
        norms = np.linalg.norm(v, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-9:
            raise ValueError("embedding vectors must have unit norm")
        if self.kind == "one_hot" and v.shape[1] < v.shape[0]:
            raise ValueError("one-hot embeddings need d >= m")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    @property
    def m(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    def gram(self) -> np.ndarray:
        return self.vectors @ self.vectors.T

    def max_cross_inner(self) -> float:
        """Largest signed inner product between two distinct vectors."""
        if self.m < 2:
            return 0.0
        g = self.gram()
        np.fill_diagonal(g, -np.inf)
        return float(g.max())


def one_hot(m: int, d: int | None = None) -> EmbeddingSet:
    d = m if d is None else d
    return EmbeddingSet(np.eye(m, d), "one_hot")


def orthonormal(m: int, d: int, seed: int = 0) -> EmbeddingSet:
    """Random orthonormal (generally not one-hot) vectors; needs d >= m."""
    if d < m:
        raise ValueError("orthonormal embeddings need d >= m")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((d, m)))
    return EmbeddingSet(q.T, "orthonormal")


def gaussian(m: int, d: int, seed: int = 0) -> EmbeddingSet:
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((m, d))
    return EmbeddingSet(v / np.linalg.norm(v, axis=1, keepdims=True), "gaussian")
