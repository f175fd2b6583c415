"""Embedding-space geometry diagnostics.

Two views of a representation space: anisotropy (mean pairwise cosine over
a finite sample; high values mean the space has collapsed into a narrow
cone) and mutual-kNN alignment between two paired feature sets (the
fraction of shared nearest-neighbor indices, a "similarity of similarity
structures" score). Neighborhoods use cosine distance with ties broken by
ascending index so results are reproducible everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .toymodel import LoraAdapter, ToyModel, encode

__all__ = [
    "EmbeddingSet",
    "AlignmentCurve",
    "anisotropy",
    "mutual_knn",
    "layerwise_alignment",
]


@dataclass(frozen=True)
class EmbeddingSet:
    modality: str
    ids: Tuple
    vectors: np.ndarray  # (n, d) float64

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("vectors must be a 2-d array")
        if len(self.ids) != v.shape[0]:
            raise ValueError("ids and vectors disagree on row count")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("ids must be unique")
        if not np.all(np.isfinite(v)):
            raise ValueError("vectors must be finite")
        if np.any(np.linalg.norm(v, axis=1) == 0.0):
            raise ValueError("zero-norm row in embedding set")
        object.__setattr__(self, "vectors", v)

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @staticmethod
    def from_vectors(modality: str, vectors: np.ndarray) -> "EmbeddingSet":
        return EmbeddingSet(modality, tuple(range(len(vectors))), vectors)


@dataclass(frozen=True)
class AlignmentCurve:
    layers: Tuple[int, ...]
    scores: Tuple[float, ...]
    k: int
    batch: int

    def __post_init__(self):
        if len(self.layers) != len(self.scores):
            raise ValueError("one score per layer required")
        if any(not (0.0 <= s <= 1.0) for s in self.scores):
            raise ValueError("alignment scores must lie in [0, 1]")

    @property
    def final(self) -> float:
        return self.scores[-1]


def _unit_rows(v: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm row")
    return v / norms


def anisotropy(emb: EmbeddingSet) -> float:
    """Mean cosine similarity over all unordered pairs, exact.

    Uses the identity sum_{i<j} cos(i,j) = (||sum of unit rows||^2 - n) / 2,
    which is a single pass over the data; the naive double loop is kept in
    the tests as the oracle.
    """
    n = emb.n
    if n < 2:
        raise ValueError("anisotropy needs at least 2 embeddings")
    u = _unit_rows(emb.vectors)
    s = u.sum(axis=0)
    total = (float(s @ s) - float(np.sum(u * u))) / 2.0
    value = total / (n * (n - 1) / 2.0)
    return float(np.clip(value, -1.0, 1.0))


def _knn_indices(vectors: np.ndarray, k: int) -> np.ndarray:
    """(n, k) nearest-neighbor indices by cosine distance, self excluded,
    ties by ascending index."""
    u = _unit_rows(vectors)
    dist = 1.0 - u @ u.T
    np.fill_diagonal(dist, np.inf)
    return np.argsort(dist, axis=1, kind="stable")[:, :k]


def mutual_knn(phi: EmbeddingSet, psi: EmbeddingSet, k: int) -> float:
    """Mean over rows of |kNN(phi_i) intersect kNN(psi_i)| / k for paired sets."""
    if phi.n != psi.n:
        raise ValueError("paired sets must have the same size")
    n = phi.n
    if not 1 <= k <= n - 1:
        raise ValueError(f"k must be in [1, {n - 1}]")
    nn_a = _knn_indices(phi.vectors, k)
    nn_b = _knn_indices(psi.vectors, k)
    rows = np.arange(n)[:, None]
    mask_a = np.zeros((n, n), dtype=bool)
    mask_b = np.zeros((n, n), dtype=bool)
    mask_a[rows, nn_a] = True
    mask_b[rows, nn_b] = True
    shared = np.logical_and(mask_a, mask_b).sum(axis=1)
    return float(shared.mean() / k)


def layerwise_alignment(
    model: ToyModel,
    modality_a: str,
    inputs_a: np.ndarray,
    modality_b: str,
    inputs_b: np.ndarray,
    k: int,
    adapter: Optional[LoraAdapter] = None,
) -> AlignmentCurve:
    """Mutual-kNN score per shared trunk layer for one paired batch.

    Row i of inputs_a and row i of inputs_b must describe the same
    underlying item.
    """
    b = len(inputs_a)
    if len(inputs_b) != b:
        raise ValueError("paired inputs must have the same length")
    if b <= k:
        raise ValueError("batch size must exceed k")
    _, layers_a = encode(model, modality_a, inputs_a, adapter=adapter,
                         capture_layers=True)
    _, layers_b = encode(model, modality_b, inputs_b, adapter=adapter,
                         capture_layers=True)
    scores: List[float] = []
    for la, lb in zip(layers_a, layers_b):
        scores.append(
            mutual_knn(
                EmbeddingSet.from_vectors(modality_a, la),
                EmbeddingSet.from_vectors(modality_b, lb),
                k,
            )
        )
    return AlignmentCurve(
        layers=tuple(range(len(scores))),
        scores=tuple(scores),
        k=k,
        batch=b,
    )
