"""InfoNCE losses and the contrastive refinement trainer.

The loss scores each anchor against all in-batch positives (plus, when
provided, one hard negative per row) through a temperature-scaled softmax
over cosine similarities. Three refinement strategies are supported:
low-rank adaptation of the trunk, full trunk fine-tuning, and a single
trainable linear layer on top of frozen embeddings. Token tables and
modality encoders are never trained here.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .datagen import World
from .numerics import Adam, Rng, exact_mean
from .toymodel import (
    LoraAdapter,
    ToyModel,
    embed_backward,
    embed_forward,
    encode,
    init_lora,
    merge_lora,
)

__all__ = [
    "TripletBatch",
    "CLConfig",
    "CLResult",
    "infonce",
    "cl_train",
    "make_toy_triplets",
    "load_triplets_jsonl",
]

STRATEGIES = ("lora", "full_finetune", "linear_projection")


@dataclass(frozen=True)
class TripletBatch:
    """Token-sequence triplets. ``groups`` optionally labels rows so the
    trainer can avoid same-group (false negative) collisions in a batch."""

    anchors: np.ndarray                     # (n, L) int
    positives: np.ndarray                   # (n, L) int
    hard_negatives: Optional[np.ndarray] = None
    groups: Optional[np.ndarray] = None

    def __post_init__(self):
        a, p = np.asarray(self.anchors), np.asarray(self.positives)
        if a.ndim != 2 or a.shape != p.shape:
            raise ValueError("anchors and positives must share one (n, L) shape")
        if a.shape[0] < 2:
            raise ValueError("need at least 2 triplets for in-batch negatives")
        if self.hard_negatives is not None and np.asarray(self.hard_negatives).shape != a.shape:
            raise ValueError("hard_negatives shape mismatch")
        if self.groups is not None and len(self.groups) != a.shape[0]:
            raise ValueError("groups length mismatch")

    @property
    def n(self) -> int:
        return self.anchors.shape[0]


@dataclass(frozen=True)
class CLConfig:
    strategy: str = "lora"
    temperature: float = 0.05
    steps: int = 500
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    lora_rank: int = 8
    lora_alpha: float = 16.0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")


@dataclass(frozen=True)
class CLResult:
    strategy: str
    model: ToyModel
    adapter: Optional[LoraAdapter]
    projection: Optional[Dict[str, np.ndarray]]
    trace: Tuple[float, ...] = field(default=())

    def encode(self, modality: str, inputs: np.ndarray,
               capture_layers: bool = False):
        """Embeddings under the refined model.

        The linear projection applies to the final embedding only; captured
        trunk activations are reported raw.
        """
        out = encode(self.model, modality, inputs, adapter=self.adapter,
                     capture_layers=capture_layers)
        if self.projection is None:
            return out
        if capture_layers:
            emb, layers = out
            return emb @ self.projection["w"].T + self.projection["b"], layers
        return out @ self.projection["w"].T + self.projection["b"]

    def merged_model(self) -> ToyModel:
        if self.adapter is not None:
            return merge_lora(self.model, self.adapter)
        return self.model


def _normalize_with_cache(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm embedding row")
    return x / norms, norms


def _grad_through_norm(unit: np.ndarray, norms: np.ndarray,
                       dunit: np.ndarray) -> np.ndarray:
    inner = np.sum(dunit * unit, axis=1, keepdims=True)
    return (dunit - inner * unit) / norms


def _infonce_core(anchors: np.ndarray, positives: np.ndarray, tau: float,
                  hard_negatives: Optional[np.ndarray]):
    """Loss plus gradients w.r.t. the raw (unnormalized) embeddings."""
    if tau <= 0:
        raise ValueError("temperature must be > 0")
    a = np.asarray(anchors, dtype=np.float64)
    p = np.asarray(positives, dtype=np.float64)
    if a.ndim != 2 or a.shape != p.shape:
        raise ValueError("anchor and positive embeddings must share one shape")
    hn = None
    if hard_negatives is not None:
        hn = np.asarray(hard_negatives, dtype=np.float64)
        if hn.shape != a.shape:
            raise ValueError("hard negative embeddings shape mismatch")
    n = a.shape[0]

    ua, na = _normalize_with_cache(a)
    up, npn = _normalize_with_cache(p)
    cands = up
    uh = nh = None
    if hn is not None:
        uh, nh = _normalize_with_cache(hn)
        cands = np.vstack([up, uh])

    sims = (ua @ cands.T) / tau                     # (n, m)
    m = sims.max(axis=1, keepdims=True)
    expd = np.exp(sims - m)
    z = expd.sum(axis=1, keepdims=True)
    # lse - s_ii arranged so the uniform case is exactly ln(m)
    per_anchor = np.log(z[:, 0]) + (m[:, 0] - sims[np.arange(n), np.arange(n)])
    loss = exact_mean(per_anchor)

    dsims = expd / z
    dsims[np.arange(n), np.arange(n)] -= 1.0
    dsims /= n
    dcos = dsims / tau

    dua = dcos @ cands
    dcands = dcos.T @ ua
    da = _grad_through_norm(ua, na, dua)
    dp = _grad_through_norm(up, npn, dcands[:n])
    dh = None
    if uh is not None:
        dh = _grad_through_norm(uh, nh, dcands[n:])
    return float(loss), da, dp, dh


def infonce(anchor_embs: np.ndarray, positive_embs: np.ndarray, tau: float,
            hard_neg_embs: Optional[np.ndarray] = None) -> float:
    """Mean InfoNCE over the batch, in nats.

    Candidates for anchor i are all n positives plus, when given, all n hard
    negatives; the true candidate is positive i. Rows are L2-normalized
    internally.
    """
    loss, _, _, _ = _infonce_core(anchor_embs, positive_embs, tau, hard_neg_embs)
    return loss


def infonce_with_grads(anchor_embs, positive_embs, tau, hard_neg_embs=None):
    return _infonce_core(anchor_embs, positive_embs, tau, hard_neg_embs)


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------


def _batch_indices(triplets: TripletBatch, batch: int, rng: Rng) -> np.ndarray:
    """Indices for one step. With group labels, at most one row per group is
    taken so in-batch negatives never collide with the positive's group."""
    if triplets.groups is None:
        return rng.choice(triplets.n, min(batch, triplets.n))
    groups = np.asarray(triplets.groups)
    uniq = np.unique(groups)
    order = rng.permutation(len(uniq))[: min(batch, len(uniq))]
    chosen = []
    for g in uniq[order]:
        members = np.nonzero(groups == g)[0]
        pick = members[int(rng.integers(0, len(members), 1)[0])]
        chosen.append(int(pick))
    return np.asarray(chosen, dtype=np.int64)


def cl_train(model: ToyModel, triplets: TripletBatch,
             cfg: CLConfig) -> Tuple[CLResult, List[float]]:
    """Contrastive refinement of the text path.

    lora: only adapter factors get gradients; the adapter is returned
    unmerged. full_finetune: trunk weights train, encoders and token table
    stay frozen. linear_projection: an identity-initialized output layer is
    the sole trainable. steps=0 leaves the forward pass unchanged.
    """
    rng = Rng(cfg.seed)
    work = model.copy()
    adapter = None
    projection = None
    if cfg.strategy == "lora":
        adapter = init_lora(work, cfg.lora_rank, cfg.lora_alpha, cfg.seed)
        trainables = {}
        for i in adapter.b:
            trainables[f"lora.{i}.b"] = adapter.b[i]
            trainables[f"lora.{i}.a"] = adapter.a[i]
        scope = "lora"
    elif cfg.strategy == "full_finetune":
        trainables = {
            k: v for k, v in work.params.items() if k.startswith("trunk.")
        }
        scope = "trunk"
    else:
        d = work.spec.embed_dim
        projection = {"w": np.eye(d), "b": np.zeros((1, d))}
        trainables = {"proj.w": projection["w"], "proj.b": projection["b"]}
        scope = "proj"

    trace: List[float] = []
    if cfg.steps == 0:
        return CLResult(cfg.strategy, work, adapter, projection, ()), trace

    opt = Adam(lr=cfg.lr)
    has_hn = triplets.hard_negatives is not None
    for _ in range(cfg.steps):
        idx = _batch_indices(triplets, cfg.batch_size, rng)
        anc = triplets.anchors[idx]
        pos = triplets.positives[idx]
        neg = triplets.hard_negatives[idx] if has_hn else None

        ea, ca = embed_forward(work, "text", anc, adapter)
        ep, cp = embed_forward(work, "text", pos, adapter)
        en = cn = None
        if neg is not None:
            en, cn = embed_forward(work, "text", neg, adapter)

        if scope == "proj":
            pa = ea @ projection["w"].T + projection["b"]
            pp = ep @ projection["w"].T + projection["b"]
            pn = en @ projection["w"].T + projection["b"] if en is not None else None
            loss, da, dp, dn = _infonce_core(pa, pp, cfg.temperature, pn)
            grads = {
                "proj.w": da.T @ ea + dp.T @ ep,
                "proj.b": da.sum(axis=0, keepdims=True) + dp.sum(axis=0, keepdims=True),
            }
            if dn is not None:
                grads["proj.w"] += dn.T @ en
                grads["proj.b"] += dn.sum(axis=0, keepdims=True)
        else:
            loss, da, dp, dn = _infonce_core(ea, ep, cfg.temperature, en)
            grads: Dict[str, np.ndarray] = {}
            embed_backward(work, ca, da, adapter, scope, grads)
            embed_backward(work, cp, dp, adapter, scope, grads)
            if dn is not None:
                embed_backward(work, cn, dn, adapter, scope, grads)

        trace.append(loss)
        opt.step(trainables, grads)

    result = CLResult(cfg.strategy, work, adapter, projection, tuple(trace))
    return result, trace


def make_toy_triplets(world: World, n: int, rng: Rng) -> TripletBatch:
    """Triplets from a multi-page world: anchor and positive are two distinct
    token renderings of one class; the hard negative comes from the class
    whose latent is nearest to the anchor's."""
    spec = world.spec
    if spec.text_pages < 2:
        raise ValueError("world needs text_pages >= 2 for anchor/positive pairs")
    if n < 2:
        raise ValueError("need at least 2 triplets")
    k = spec.latent_classes

    # nearest other class by latent Euclidean distance
    lat = world.class_latents
    d2 = np.sum((lat[:, None, :] - lat[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(d2, np.inf)
    nearest = np.argmin(d2, axis=1)

    classes = rng.integers(0, k, n)
    anchors = np.empty((n, spec.text_len), dtype=np.int64)
    positives = np.empty_like(anchors)
    negatives = np.empty_like(anchors)
    for i in range(n):
        c = int(classes[i])
        pages = rng.permutation(spec.text_pages)[:2]
        anchors[i] = world.token_table[c, pages[0]]
        positives[i] = world.token_table[c, pages[1]]
        nc = int(nearest[c])
        npage = int(rng.integers(0, spec.text_pages, 1)[0])
        negatives[i] = world.token_table[nc, npage]
    return TripletBatch(anchors=anchors, positives=positives,
                        hard_negatives=negatives, groups=classes)


def load_triplets_jsonl(path) -> TripletBatch:
    """Triplets from a line-delimited JSON file with fields anchor/pos/neg
    (token-id arrays; neg optional but must be consistent across lines)."""
    import json

    anchors, positives, negatives = [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            anchors.append(rec["anchor"])
            positives.append(rec["pos"])
            if "neg" in rec:
                negatives.append(rec["neg"])
    if negatives and len(negatives) != len(anchors):
        raise ValueError("neg field present on some lines but not all")
    return TripletBatch(
        anchors=np.asarray(anchors, dtype=np.int64),
        positives=np.asarray(positives, dtype=np.int64),
        hard_negatives=np.asarray(negatives, dtype=np.int64) if negatives else None,
    )
