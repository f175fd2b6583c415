"""Synthetic multimodal world with analytically tractable information content.

A world holds K latent classes. Each class renders into every observation
modality through a frozen tanh map plus Gaussian noise, and into token
sequences through a frozen lookup table: page 0 is the canonical rendering,
and further pages are paraphrase-like variants of it with a few positions
resampled (all rows pairwise distinct, so any page decodes to its class).
Samples carry the canonical page, so class and target sequence are in
bijection: H(Y) = ln K exactly and H(Y|X) is computable by Monte Carlo
against the true rendering likelihood, which is what makes quantitative
information experiments possible at desk scale.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .numerics import Rng, logsumexp

__all__ = [
    "ModalitySpec",
    "WorldSpec",
    "World",
    "Sample",
    "build_world",
    "sample_batch",
    "sample_arrays",
    "text_views",
    "decode_tokens",
    "true_info",
    "export_dataset",
]

_TOKEN_RETRIES = 200


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    obs_dim: int
    noise_sigma: float

    def __post_init__(self):
        if not self.name or self.name == "text":
            raise ValueError("modality name must be non-empty and not 'text'")
        if self.obs_dim < 1:
            raise ValueError("obs_dim must be >= 1")
        if not math.isfinite(self.noise_sigma) or self.noise_sigma < 0:
            raise ValueError("noise_sigma must be finite and >= 0")


@dataclass(frozen=True)
class WorldSpec:
    latent_classes: int
    latent_dim: int
    modalities: Tuple[ModalitySpec, ...]
    vocab_size: int
    text_len: int
    text_pages: int = 1
    page_flips: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.latent_classes < 2:
            raise ValueError("need at least 2 latent classes")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.text_len < 1:
            raise ValueError("text_len must be >= 1")
        if self.text_pages < 1:
            raise ValueError("text_pages must be >= 1")
        if not 1 <= self.page_flips <= self.text_len:
            raise ValueError("page_flips must lie in [1, text_len]")
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise ValueError("modality names must be unique")

    def modality(self, name: str) -> ModalitySpec:
        for m in self.modalities:
            if m.name == name:
                return m
        raise ValueError(f"unknown modality {name!r}")


@dataclass(frozen=True)
class World:
    """Frozen generative parameters. Immutable and safe to share."""

    spec: WorldSpec
    class_latents: np.ndarray           # (K, latent_dim), unit-norm rows
    render_w: Dict[str, np.ndarray]     # per modality (obs_dim, latent_dim)
    render_b: Dict[str, np.ndarray]     # per modality (obs_dim,)
    token_table: np.ndarray             # (K, pages, text_len) int64
    _decode: Dict[tuple, int] = field(repr=False, default_factory=dict)

    def class_means(self, modality: str) -> np.ndarray:
        """Noise-free rendering of every class, (K, obs_dim)."""
        w = self.render_w[modality]
        b = self.render_b[modality]
        return np.tanh(self.class_latents @ w.T + b)


@dataclass(frozen=True)
class Sample:
    class_id: int
    obs: Dict[str, np.ndarray]
    tokens: np.ndarray  # (text_len,) int64


def build_world(spec: WorldSpec) -> World:
    """Deterministically materialize a world from its spec."""
    k, p, l, v = spec.latent_classes, spec.text_pages, spec.text_len, spec.vocab_size
    if v**l < k * p:  # pigeonhole: not enough distinct token rows
        raise ValueError(
            f"vocab_size**text_len = {v**l} cannot host {k * p} distinct token rows"
        )
    rng = Rng(spec.seed)

    latents = rng.normal(k * spec.latent_dim).reshape(k, spec.latent_dim)
    norms = np.linalg.norm(latents, axis=1, keepdims=True)
    # a zero-norm draw is measure-zero; re-roll rather than divide by zero
    while np.any(norms < 1e-12):
        bad = norms[:, 0] < 1e-12
        latents[bad] = rng.normal(int(bad.sum()) * spec.latent_dim).reshape(
            -1, spec.latent_dim
        )
        norms = np.linalg.norm(latents, axis=1, keepdims=True)
    latents /= norms

    render_w: Dict[str, np.ndarray] = {}
    render_b: Dict[str, np.ndarray] = {}
    for m in spec.modalities:
        scale = 1.0 / math.sqrt(spec.latent_dim)
        render_w[m.name] = scale * rng.normal(m.obs_dim * spec.latent_dim).reshape(
            m.obs_dim, spec.latent_dim
        )
        render_b[m.name] = 0.1 * rng.normal(m.obs_dim)

    # page 0: one canonical row per class, all distinct
    canon = rng.integers(0, v, k * l).reshape(k, l)
    for _ in range(_TOKEN_RETRIES):
        seen: Dict[tuple, int] = {}
        dup: List[int] = []
        for i, row in enumerate(map(tuple, canon.tolist())):
            if row in seen:
                dup.append(i)
            else:
                seen[row] = i
        if not dup:
            break
        for i in dup:  # resample only colliding rows
            canon[i] = rng.integers(0, v, l)
    else:
        raise ValueError(
            f"could not draw {k} distinct token rows within the retry budget"
        )

    # further pages: paraphrase-like variants of the canonical row with
    # page_flips positions resampled, still pairwise distinct overall
    table = np.empty((k, p, l), dtype=np.int64)
    table[:, 0] = canon
    taken = {tuple(r) for r in canon.tolist()}
    for c in range(k):
        for pg in range(1, p):
            for _ in range(_TOKEN_RETRIES):
                row = canon[c].copy()
                pos = rng.permutation(l)[: spec.page_flips]
                row[pos] = rng.integers(0, v, spec.page_flips)
                key = tuple(row.tolist())
                if key not in taken:
                    taken.add(key)
                    table[c, pg] = row
                    break
            else:
                raise ValueError(
                    f"could not draw {k * p} distinct token rows within the retry budget"
                )
    decode = {
        tuple(table[c, pg].tolist()): c for c in range(k) for pg in range(p)
    }
    return World(
        spec=spec,
        class_latents=latents,
        render_w=render_w,
        render_b=render_b,
        token_table=table,
        _decode=decode,
    )


def sample_arrays(
    world: World, n: int, rng: Rng
) -> Tuple[np.ndarray, Dict[str, np.ndarray], np.ndarray]:
    """Array-form batch: (class_ids (n,), obs per modality (n, d_m), tokens (n, L)).

    Tokens are always page 0 of the class row, so tokens are deterministic
    given the class and H(Y | class) = 0.
    """
    if n < 1:
        raise ValueError("batch size must be >= 1")
    spec = world.spec
    ids = rng.integers(0, spec.latent_classes, n)
    z = world.class_latents[ids]
    obs: Dict[str, np.ndarray] = {}
    for m in spec.modalities:
        clean = np.tanh(z @ world.render_w[m.name].T + world.render_b[m.name])
        if m.noise_sigma > 0:
            clean = clean + m.noise_sigma * rng.normal(n * m.obs_dim).reshape(
                n, m.obs_dim
            )
        obs[m.name] = clean
    tokens = world.token_table[ids, 0]
    return ids, obs, tokens


def sample_batch(world: World, n: int, rng: Rng) -> List[Sample]:
    ids, obs, tokens = sample_arrays(world, n, rng)
    return [
        Sample(
            class_id=int(ids[i]),
            obs={name: obs[name][i] for name in obs},
            tokens=tokens[i],
        )
        for i in range(n)
    ]


def text_views(world: World, class_ids: np.ndarray, rng: Rng) -> np.ndarray:
    """Token views with a uniformly drawn page per row.

    With a single-page world this is the canonical row; otherwise it plays
    the role of sampling one caption variant per item.
    """
    ids = np.asarray(class_ids)
    p = world.spec.text_pages
    if p == 1:
        return world.token_table[ids, 0]
    return world.token_table[ids, rng.integers(0, p, len(ids))]


def decode_tokens(world: World, tokens: np.ndarray) -> int:
    """Map a token row back to its class id (exact, any page)."""
    key = tuple(np.asarray(tokens).ravel().tolist())
    if key not in world._decode:
        raise ValueError("token row does not belong to this world")
    return world._decode[key]


def true_info(
    world: World, modality: str, n_mc: int, rng: Rng
) -> Tuple[float, float, float]:
    """(H_Y, H_Y_given_X, I_XY) in nats for one observation modality.

    H_Y = ln K exactly. H(Y|X) is Monte Carlo over fresh samples of
    -ln p(y|x), where p(y|x) is the exact class posterior under the true
    rendering likelihood (uniform prior, isotropic Gaussian noise). This is
    oracle ground truth, independent of any learned model.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    spec = world.spec
    m = spec.modality(modality)
    h_y = math.log(spec.latent_classes)
    if m.noise_sigma == 0.0:
        return h_y, 0.0, h_y

    means = world.class_means(modality)          # (K, obs_dim)
    mean_sq = np.sum(means**2, axis=1)           # (K,)
    inv_two_var = 1.0 / (2.0 * m.noise_sigma**2)

    total = 0.0
    done = 0
    chunk = 16384
    while done < n_mc:
        b = min(chunk, n_mc - done)
        ids = rng.integers(0, spec.latent_classes, b)
        x = means[ids] + m.noise_sigma * rng.normal(b * m.obs_dim).reshape(b, m.obs_dim)
        # -||x - mu_k||^2 / (2 sigma^2); shared terms cancel in the posterior
        loglik = (2.0 * x @ means.T - mean_sq) * inv_two_var
        logpost = loglik - logsumexp(loglik, axis=1)[:, None]
        total += -float(np.sum(logpost[np.arange(b), ids]))
        done += b
    h_y_given_x = total / n_mc
    i_xy = min(max(h_y - h_y_given_x, 0.0), h_y)
    return h_y, h_y_given_x, i_xy


def export_dataset(world: World, samples: Sequence[Sample], path) -> None:
    """Line-delimited JSON dump, one line per (sample, modality)."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, s in enumerate(samples):
            for m in world.spec.modalities:
                rec = {
                    "id": i,
                    "cls": int(s.class_id),
                    "mod": m.name,
                    "obs": [float(x) for x in s.obs[m.name]],
                    "tok": [int(t) for t in s.tokens],
                }
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
