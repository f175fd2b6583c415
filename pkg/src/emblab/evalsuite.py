"""Retrieval, correlation, probing, zero-shot, and clustering metrics.

Binary relevance throughout. Rankings are strict orderings per query;
whenever this module builds a ranking itself it sorts by descending cosine
with ties broken by ascending doc id, so golden-file tests are exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence, Set

import numpy as np

from .numerics import Rng

__all__ = [
    "MetricReport",
    "ndcg_at_k",
    "recall_at_k",
    "spearman",
    "rank_by_cosine",
    "linear_probe",
    "probe_loss_and_grads",
    "zeroshot_classify",
    "kmeans_nmi",
    "nmi",
    "validate_qrels",
    "load_qrels",
]

Qrels = Mapping[str, Set[str]]
Rankings = Mapping[str, Sequence[str]]

_METRIC_RANGES = {
    "ndcg": (0.0, 1.0),
    "recall": (0.0, 1.0),
    "spearman": (-1.0, 1.0),
    "accuracy": (0.0, 1.0),
    "nmi": (0.0, 1.0),
    "anisotropy": (-1.0, 1.0),
    "mutual_knn": (0.0, 1.0),
}


@dataclass(frozen=True)
class MetricReport:
    metric: str
    value: float
    n: int
    dataset: str
    k: Optional[int] = None
    seed: Optional[int] = None

    def __post_init__(self):
        base = self.metric.split("@")[0]
        if base in _METRIC_RANGES:
            lo, hi = _METRIC_RANGES[base]
            if not (lo - 1e-12 <= self.value <= hi + 1e-12):
                raise ValueError(
                    f"{self.metric} value {self.value} outside [{lo}, {hi}]"
                )


def validate_qrels(qrels: Qrels, corpus_ids) -> None:
    corpus = set(corpus_ids)
    for q, rels in qrels.items():
        missing = set(rels) - corpus
        if missing:
            raise ValueError(f"qrels for query {q!r} reference unknown docs {missing}")


def load_qrels(path) -> Dict[str, Set[str]]:
    """Qrels from a line-delimited file: ``query_id<TAB>doc_id`` per line."""
    qrels: Dict[str, Set[str]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"qrels line {lineno}: expected query<TAB>doc")
            qrels.setdefault(parts[0], set()).add(parts[1])
    return qrels


def _scored_queries(rankings: Rankings, qrels: Qrels):
    """Queries that enter the mean: non-empty qrels, ranking required."""
    for q, rels in qrels.items():
        if not rels:
            continue
        if q not in rankings:
            raise ValueError(f"query {q!r} has no ranking")
        yield q, rels


def ndcg_at_k(rankings: Rankings, qrels: Qrels, k: int) -> float:
    """Mean nDCG@k with binary gains and 1/log2(rank+1) discounts."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = []
    for q, rels in _scored_queries(rankings, qrels):
        ranked = rankings[q]
        dcg = sum(
            1.0 / math.log2(r + 1)
            for r, doc in enumerate(ranked[:k], start=1)
            if doc in rels
        )
        ideal = sum(1.0 / math.log2(r + 1) for r in range(1, min(k, len(rels)) + 1))
        scores.append(dcg / ideal)
    if not scores:
        raise ValueError("no query with relevant documents")
    return float(np.mean(scores))


def recall_at_k(rankings: Rankings, qrels: Qrels, k: int) -> float:
    """Fraction of queries with at least one relevant doc in the top k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    hits = 0
    total = 0
    for q, rels in _scored_queries(rankings, qrels):
        total += 1
        if any(doc in rels for doc in rankings[q][:k]):
            hits += 1
    if total == 0:
        raise ValueError("no query with relevant documents")
    return hits / total


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    sorted_x = x[order]
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0  # mean of 1-based ranks
        i = j + 1
    return ranks


def spearman(pred_scores, gold_scores) -> float:
    """Rank correlation with ties sharing mean ranks."""
    x = np.asarray(pred_scores, dtype=np.float64)
    y = np.asarray(gold_scores, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be 1-d and the same length")
    if len(x) < 2:
        raise ValueError("need at least 2 points")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ValueError("spearman undefined for constant input")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    return float(np.clip((rx @ ry) / math.sqrt((rx @ rx) * (ry @ ry)), -1.0, 1.0))


def rank_by_cosine(query_vecs: np.ndarray, doc_vecs: np.ndarray,
                   query_ids: Sequence[str], doc_ids: Sequence[str]) -> Dict[str, list]:
    """Per-query doc ordering by descending cosine, ties by ascending doc id."""
    order = np.argsort(np.asarray(doc_ids, dtype=object), kind="stable")
    docs = np.asarray(doc_vecs, dtype=np.float64)[order]
    ids_sorted = [doc_ids[i] for i in order]
    qn = np.linalg.norm(query_vecs, axis=1, keepdims=True)
    dn = np.linalg.norm(docs, axis=1, keepdims=True)
    if np.any(qn == 0) or np.any(dn == 0):
        raise ValueError("zero-norm vector in retrieval")
    sims = (query_vecs / qn) @ (docs / dn).T
    rankings = {}
    for qi, q in enumerate(query_ids):
        idx = np.argsort(-sims[qi], kind="stable")
        rankings[q] = [ids_sorted[j] for j in idx]
    return rankings


# ---------------------------------------------------------------------------
# linear probing
# ---------------------------------------------------------------------------

_PROBE_ITERS = 500
_PROBE_LR = 0.1
_PROBE_L2 = 1e-4


def probe_loss_and_grads(w: np.ndarray, b: np.ndarray, x: np.ndarray,
                         y: np.ndarray, l2: float = _PROBE_L2):
    """Multinomial logistic objective: mean cross entropy + l2 * sum(w^2)."""
    logits = x @ w.T + b
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    n = x.shape[0]
    loss = -float(logp[np.arange(n), y].mean()) + l2 * float(np.sum(w * w))
    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    dw = dlogits.T @ x + 2.0 * l2 * w
    db = dlogits.sum(axis=0, keepdims=True)
    return loss, dw, db


def _sample_shots(labels: np.ndarray, shots: int, rng: Rng) -> np.ndarray:
    picks = []
    for c in np.unique(labels):
        members = np.nonzero(labels == c)[0]
        if len(members) < shots:
            raise ValueError(
                f"class {int(c)} has {len(members)} examples, needs {shots}"
            )
        sel = rng.permutation(len(members))[:shots]
        picks.append(members[sel])
    return np.concatenate(picks)


def linear_probe(train_embs, train_labels, test_embs, test_labels,
                 shots: int = 16, seed: int = 0) -> float:
    """Few-shot logistic-regression accuracy on frozen embeddings.

    Exactly ``shots`` per class are drawn with the given seed; the probe is
    full-batch gradient descent from zero init (500 iterations, lr 0.1,
    L2 1e-4). Prediction ties go to the lowest class id.
    """
    x_all = np.asarray(train_embs, dtype=np.float64)
    y_all = np.asarray(train_labels)
    xt = np.asarray(test_embs, dtype=np.float64)
    yt = np.asarray(test_labels)
    classes = np.unique(y_all)
    if not set(np.unique(yt)).issubset(set(classes)):
        raise ValueError("test classes must be a subset of train classes")
    idx = _sample_shots(y_all, shots, Rng(seed))
    x = x_all[idx]
    # remap labels to contiguous [0, C) in ascending class order
    lut = {c: i for i, c in enumerate(classes.tolist())}
    y = np.asarray([lut[v] for v in y_all[idx].tolist()])
    yt_m = np.asarray([lut[v] for v in yt.tolist()])

    w = np.zeros((len(classes), x.shape[1]))
    b = np.zeros((1, len(classes)))
    for _ in range(_PROBE_ITERS):
        _, dw, db = probe_loss_and_grads(w, b, x, y)
        w -= _PROBE_LR * dw
        b -= _PROBE_LR * db
    pred = np.argmax(xt @ w.T + b, axis=1)  # argmax takes the first max
    return float(np.mean(pred == yt_m))


def zeroshot_classify(item_embs, class_prompt_embs, gold_labels) -> float:
    """Accuracy of nearest-prompt-by-cosine classification."""
    items = np.asarray(item_embs, dtype=np.float64)
    prompts = np.asarray(class_prompt_embs, dtype=np.float64)
    gold = np.asarray(gold_labels)
    if prompts.ndim != 2 or prompts.shape[0] < 1:
        raise ValueError("need at least one class prompt")
    if items.shape[1] != prompts.shape[1]:
        raise ValueError("item and prompt dims differ")
    pn = np.linalg.norm(prompts, axis=1, keepdims=True)
    if np.any(pn == 0):
        raise ValueError("zero-norm prompt")
    inorm = np.linalg.norm(items, axis=1, keepdims=True)
    if np.any(inorm == 0):
        raise ValueError("zero-norm item embedding")
    sims = (items / inorm) @ (prompts / pn).T
    pred = np.argmax(sims, axis=1)
    return float(np.mean(pred == gold))


# ---------------------------------------------------------------------------
# clustering
# ---------------------------------------------------------------------------

_KMEANS_RESTARTS = 10
_KMEANS_ITERS = 300
_KMEANS_TOL = 1e-6


def _kmeanspp_init(x: np.ndarray, k: int, rng: Rng) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    first = int(rng.integers(0, n, 1)[0])
    centers[0] = x[first]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            centers[i:] = x[int(rng.integers(0, n, 1)[0])]
            break
        u = float(rng.uniform(1)[0]) * total
        idx = int(np.searchsorted(np.cumsum(d2), u, side="right"))
        idx = min(idx, n - 1)
        centers[i] = x[idx]
        d2 = np.minimum(d2, np.sum((x - centers[i]) ** 2, axis=1))
    return centers


def _lloyd(x: np.ndarray, centers: np.ndarray):
    for _ in range(_KMEANS_ITERS):
        d2 = (
            np.sum(x * x, axis=1)[:, None]
            - 2.0 * x @ centers.T
            + np.sum(centers * centers, axis=1)[None, :]
        )
        assign = np.argmin(d2, axis=1)
        new_centers = centers.copy()
        for c in range(centers.shape[0]):
            members = x[assign == c]
            if len(members):
                new_centers[c] = members.mean(axis=0)
            else:  # relocate empty cluster to the farthest point
                new_centers[c] = x[int(np.argmax(d2.min(axis=1)))]
        shift = float(np.sum((new_centers - centers) ** 2))
        centers = new_centers
        if shift <= _KMEANS_TOL:
            break
    d2 = (
        np.sum(x * x, axis=1)[:, None]
        - 2.0 * x @ centers.T
        + np.sum(centers * centers, axis=1)[None, :]
    )
    assign = np.argmin(d2, axis=1)
    inertia = float(np.maximum(d2[np.arange(len(x)), assign], 0.0).sum())
    return assign, inertia


def kmeans_labels(x: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Best-of-10 k-means++ clustering (300 iters, tol 1e-6)."""
    if k < 1:
        raise ValueError("n_clusters must be >= 1")
    if len(x) < k:
        raise ValueError("fewer points than clusters")
    rng = Rng(seed)
    best = None
    best_inertia = math.inf
    for _ in range(_KMEANS_RESTARTS):
        centers = _kmeanspp_init(x, k, rng)
        assign, inertia = _lloyd(x, centers)
        if inertia < best_inertia:
            best, best_inertia = assign, inertia
    return best


def nmi(pred_labels, gold_labels, normalization: str = "sqrt") -> float:
    """Normalized mutual information of two labelings; 0 when either side
    has zero entropy."""
    a = np.asarray(pred_labels)
    b = np.asarray(gold_labels)
    if a.shape != b.shape:
        raise ValueError("labelings must have the same length")
    if normalization not in ("sqrt", "arithmetic"):
        raise ValueError("normalization must be 'sqrt' or 'arithmetic'")
    n = len(a)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1.0)
    pij = table / n
    pi = pij.sum(axis=1)
    qj = pij.sum(axis=0)
    mask = pij > 0
    mi = float(np.sum(pij[mask] * np.log(pij[mask] / np.outer(pi, qj)[mask])))
    h_a = -float(np.sum(pi[pi > 0] * np.log(pi[pi > 0])))
    h_b = -float(np.sum(qj[qj > 0] * np.log(qj[qj > 0])))
    if h_a == 0.0 or h_b == 0.0:
        return 0.0
    denom = math.sqrt(h_a * h_b) if normalization == "sqrt" else 0.5 * (h_a + h_b)
    return float(np.clip(mi / denom, 0.0, 1.0))


def kmeans_nmi(embs, gold_labels, n_clusters: int, seed: int,
               normalization: str = "sqrt") -> float:
    """NMI between a k-means clustering of the embeddings and gold labels."""
    x = np.asarray(embs, dtype=np.float64)
    pred = kmeans_labels(x, n_clusters, seed)
    return nmi(pred, np.asarray(gold_labels), normalization)
