"""Desk-scale multimodal network: per-modality encoders feeding a shared
tanh trunk, a token-embedding path for text, and a position-factorized
generative head predicting the full token sequence from the pooled
embedding.

Each observation encoder ends in a softmax over the vocabulary and enters
the trunk as a probability-weighted mix of token embeddings ("soft
tokens"), so every modality lives in the same entry space as text. That is
what lets text-only refinement of the trunk act on all modalities at once.
The final trunk layer carries a fixed nonzero bias at initialization;
generative training has no reason to remove the resulting common offset,
which reproduces the collapsed, anisotropic embedding geometry that
pretrained models show in the wild.

All gradients are derived by hand and verified against central finite
differences in the test suite. Models are treated as immutable values;
training functions return new models.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .datagen import Sample, World, sample_arrays
from .numerics import Adam, Rng, exact_mean

__all__ = [
    "ModelSpec",
    "ToyModel",
    "LoraAdapter",
    "Checkpoint",
    "CheckpointError",
    "init_model",
    "init_lora",
    "encode",
    "generative_loss",
    "pretrain",
    "merge_lora",
    "soup",
    "model_to_checkpoint",
    "checkpoint_to_model",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_id",
    "stack_views",
]

TEXT = "text"


@dataclass(frozen=True)
class ModelSpec:
    modalities: Tuple[Tuple[str, int], ...]  # (name, obs_dim)
    enc_hidden: int
    trunk_dims: Tuple[int, ...]
    embed_dim: int
    vocab_size: int
    text_len: int
    init_seed: int = 0
    emb_bias_scale: float = 1.2

    def __post_init__(self):
        if not math.isfinite(self.emb_bias_scale) or self.emb_bias_scale < 0:
            raise ValueError("emb_bias_scale must be finite and >= 0")
        if self.enc_hidden < 1 or self.embed_dim < 1:
            raise ValueError("enc_hidden and embed_dim must be >= 1")
        if self.vocab_size < 2 or self.text_len < 1:
            raise ValueError("vocab_size must be >= 2 and text_len >= 1")
        if len(self.trunk_dims) < 2:
            raise ValueError("trunk needs at least 2 layers")
        if any(d < 1 for d in self.trunk_dims):
            raise ValueError("trunk widths must be >= 1")
        if self.trunk_dims[-1] != self.embed_dim:
            raise ValueError("last trunk width must equal embed_dim")
        names = [n for n, _ in self.modalities]
        if TEXT in names or len(set(names)) != len(names):
            raise ValueError("modality names must be unique and not 'text'")
        if any(d < 1 for _, d in self.modalities):
            raise ValueError("obs dims must be >= 1")

    def obs_dim(self, name: str) -> int:
        for n, d in self.modalities:
            if n == name:
                return d
        raise ValueError(f"unknown modality {name!r}")

    @property
    def n_trunk_layers(self) -> int:
        return len(self.trunk_dims)


def spec_for_world(world: World, enc_hidden: int, trunk_dims: Sequence[int],
                   init_seed: int = 0, emb_bias_scale: float = 1.2) -> ModelSpec:
    """ModelSpec matching a world's modalities and vocabulary."""
    return ModelSpec(
        modalities=tuple((m.name, m.obs_dim) for m in world.spec.modalities),
        enc_hidden=enc_hidden,
        trunk_dims=tuple(int(d) for d in trunk_dims),
        embed_dim=int(trunk_dims[-1]),
        vocab_size=world.spec.vocab_size,
        text_len=world.spec.text_len,
        init_seed=init_seed,
        emb_bias_scale=emb_bias_scale,
    )


@dataclass(frozen=True)
class ToyModel:
    spec: ModelSpec
    params: Dict[str, np.ndarray] = field(repr=False)

    def copy(self) -> "ToyModel":
        return ToyModel(self.spec, {k: v.copy() for k, v in self.params.items()})


@dataclass(frozen=True)
class LoraAdapter:
    """Low-rank delta per trunk layer: effective change is (alpha/rank) B A."""

    rank: int
    alpha: float
    b: Dict[int, np.ndarray]  # layer -> (width_i, rank), zero at init
    a: Dict[int, np.ndarray]  # layer -> (rank, width_{i-1})

    def delta(self, layer: int) -> np.ndarray:
        return (self.alpha / self.rank) * (self.b[layer] @ self.a[layer])

    def flat_delta(self) -> np.ndarray:
        return np.concatenate(
            [self.delta(i).ravel() for i in sorted(self.b.keys())]
        )


def _xavier(rng: Rng, fan_out: int, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return (2.0 * rng.uniform(fan_out * fan_in) - 1.0).reshape(fan_out, fan_in) * limit


def _trunk_in_dims(spec: ModelSpec) -> List[int]:
    return [spec.embed_dim] + list(spec.trunk_dims[:-1])


def init_model(spec: ModelSpec) -> ToyModel:
    """Xavier-uniform hidden weights, zero generative head.

    Biases are zero except the final trunk layer, whose bias is uniform on
    [-emb_bias_scale, emb_bias_scale]: a frozen-at-init common offset that
    makes the untrained embedding space anisotropic.
    """
    rng = Rng(spec.init_seed)
    p: Dict[str, np.ndarray] = {}
    p["tok.table"] = _xavier(rng, spec.vocab_size, spec.embed_dim)
    for name, obs_dim in spec.modalities:
        p[f"enc.{name}.w1"] = _xavier(rng, spec.enc_hidden, obs_dim)
        p[f"enc.{name}.b1"] = np.zeros((1, spec.enc_hidden))
        p[f"enc.{name}.w2"] = _xavier(rng, spec.vocab_size, spec.enc_hidden)
        p[f"enc.{name}.b2"] = np.zeros((1, spec.vocab_size))
    in_dims = _trunk_in_dims(spec)
    for i, (w_out, w_in) in enumerate(zip(spec.trunk_dims, in_dims)):
        p[f"trunk.{i}.w"] = _xavier(rng, w_out, w_in)
        p[f"trunk.{i}.b"] = np.zeros((1, w_out))
    last = spec.n_trunk_layers - 1
    p[f"trunk.{last}.b"][:] = spec.emb_bias_scale * (
        2.0 * rng.uniform(spec.trunk_dims[-1]) - 1.0
    ).reshape(1, -1)
    p["head.w"] = np.zeros((spec.text_len * spec.vocab_size, spec.embed_dim))
    p["head.b"] = np.zeros((1, spec.text_len * spec.vocab_size))
    return ToyModel(spec, p)


def init_lora(model: ToyModel, rank: int, alpha: float, seed: int) -> LoraAdapter:
    """Fresh adapter: B zero (attach-time no-op), A ~ N(0, 1/rank)."""
    if rank < 1 or alpha <= 0:
        raise ValueError("rank must be >= 1 and alpha > 0")
    rng = Rng(seed)
    spec = model.spec
    in_dims = _trunk_in_dims(spec)
    b: Dict[int, np.ndarray] = {}
    a: Dict[int, np.ndarray] = {}
    for i, (w_out, w_in) in enumerate(zip(spec.trunk_dims, in_dims)):
        b[i] = np.zeros((w_out, rank))
        a[i] = rng.normal(rank * w_in).reshape(rank, w_in) / math.sqrt(rank)
    return LoraAdapter(rank=rank, alpha=alpha, b=b, a=a)


def _check_adapter(model: ToyModel, adapter: LoraAdapter) -> None:
    spec = model.spec
    in_dims = _trunk_in_dims(spec)
    for i, (w_out, w_in) in enumerate(zip(spec.trunk_dims, in_dims)):
        if adapter.b[i].shape != (w_out, adapter.rank):
            raise ValueError(f"adapter B shape mismatch at trunk layer {i}")
        if adapter.a[i].shape != (adapter.rank, w_in):
            raise ValueError(f"adapter A shape mismatch at trunk layer {i}")


# ---------------------------------------------------------------------------
# forward / backward primitives
# ---------------------------------------------------------------------------


def _trunk_weight(params, i: int, adapter: Optional[LoraAdapter]) -> np.ndarray:
    w = params[f"trunk.{i}.w"]
    if adapter is not None:
        w = w + adapter.delta(i)
    return w


def _modal_forward(params: Dict[str, np.ndarray], spec: ModelSpec, modality: str,
                   inputs: np.ndarray) -> Tuple[np.ndarray, dict]:
    """Inputs -> trunk entry point. Returns (z0, cache).

    Text pools its token embeddings; observation modalities produce a
    softmax over the vocabulary and enter as that soft-token mix of the
    same embedding table.
    """
    if modality == TEXT:
        tokens = np.asarray(inputs)
        if tokens.ndim != 2 or tokens.shape[1] != spec.text_len:
            raise ValueError(f"text input must be (n, {spec.text_len}) token ids")
        if tokens.min() < 0 or tokens.max() >= spec.vocab_size:
            raise ValueError("token id out of range")
        emb = params["tok.table"][tokens]          # (n, L, d_e)
        z0 = emb.mean(axis=1)
        return z0, {"tokens": tokens}
    obs_dim = spec.obs_dim(modality)
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != obs_dim:
        raise ValueError(f"{modality} input must be (n, {obs_dim})")
    h = np.tanh(x @ params[f"enc.{modality}.w1"].T + params[f"enc.{modality}.b1"])
    logits = h @ params[f"enc.{modality}.w2"].T + params[f"enc.{modality}.b2"]
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    probs = e / e.sum(axis=1, keepdims=True)
    z0 = probs @ params["tok.table"]
    return z0, {"x": x, "h": h, "probs": probs}


def _modal_backward(params, spec: ModelSpec, modality: str, cache: dict,
                    dz0: np.ndarray, grads: Dict[str, np.ndarray]) -> None:
    if modality == TEXT:
        tokens = cache["tokens"]
        n, l = tokens.shape
        dtab = grads.setdefault("tok.table", np.zeros_like(params["tok.table"]))
        demb = np.repeat(dz0 / l, l, axis=0)       # (n*L, d_e)
        np.add.at(dtab, tokens.reshape(-1), demb)
        return
    x, h, probs = cache["x"], cache["h"], cache["probs"]
    dtab = grads.setdefault("tok.table", np.zeros_like(params["tok.table"]))
    dtab += probs.T @ dz0
    dprobs = dz0 @ params["tok.table"].T
    dlogits = probs * (dprobs - np.sum(dprobs * probs, axis=1, keepdims=True))
    _accum(grads, f"enc.{modality}.w2", dlogits.T @ h)
    _accum(grads, f"enc.{modality}.b2", dlogits.sum(axis=0, keepdims=True))
    dh = dlogits @ params[f"enc.{modality}.w2"]
    da = dh * (1.0 - h * h)
    _accum(grads, f"enc.{modality}.w1", da.T @ x)
    _accum(grads, f"enc.{modality}.b1", da.sum(axis=0, keepdims=True))


def _trunk_forward(params, spec: ModelSpec, z0: np.ndarray,
                   adapter: Optional[LoraAdapter]) -> List[np.ndarray]:
    """Returns activations [z0, z1, ..., zT]; zT is the embedding."""
    zs = [z0]
    for i in range(spec.n_trunk_layers):
        w = _trunk_weight(params, i, adapter)
        zs.append(np.tanh(zs[-1] @ w.T + params[f"trunk.{i}.b"]))
    return zs


def _trunk_backward(params, spec: ModelSpec, zs: List[np.ndarray],
                    dz_top: np.ndarray, adapter: Optional[LoraAdapter],
                    scope: str, grads: Dict[str, np.ndarray]) -> np.ndarray:
    """Backprop through the trunk. scope selects which grads to record:
    'all' or 'trunk' records trunk weights, 'lora' records adapter B/A,
    'none' records nothing. Returns dz0."""
    dz = dz_top
    for i in reversed(range(spec.n_trunk_layers)):
        z_out, z_in = zs[i + 1], zs[i]
        da = dz * (1.0 - z_out * z_out)
        dw = da.T @ z_in
        if scope in ("all", "trunk"):
            _accum(grads, f"trunk.{i}.w", dw)
            _accum(grads, f"trunk.{i}.b", da.sum(axis=0, keepdims=True))
        elif scope == "lora":
            s = adapter.alpha / adapter.rank
            _accum(grads, f"lora.{i}.b", s * (dw @ adapter.a[i].T))
            _accum(grads, f"lora.{i}.a", s * (adapter.b[i].T @ dw))
        dz = da @ _trunk_weight(params, i, adapter)
    return dz


def _accum(grads: Dict[str, np.ndarray], key: str, value: np.ndarray) -> None:
    if key in grads:
        grads[key] += value
    else:
        grads[key] = value


def embed_forward(model: ToyModel, modality: str, inputs: np.ndarray,
                  adapter: Optional[LoraAdapter] = None) -> Tuple[np.ndarray, dict]:
    """Embedding plus the cache needed for embed_backward."""
    params = model.params
    z0, mcache = _modal_forward(params, model.spec, modality, inputs)
    zs = _trunk_forward(params, model.spec, z0, adapter)
    return zs[-1], {"modality": modality, "mcache": mcache, "zs": zs}


def embed_backward(model: ToyModel, cache: dict, demb: np.ndarray,
                   adapter: Optional[LoraAdapter], scope: str,
                   grads: Dict[str, np.ndarray]) -> None:
    """Accumulate parameter grads for d(loss)/d(embedding) = demb.

    scope: 'all' (modal path + trunk), 'trunk', or 'lora'.
    """
    params = model.params
    dz0 = _trunk_backward(params, model.spec, cache["zs"], demb, adapter,
                          scope, grads)
    if scope == "all":
        _modal_backward(params, model.spec, cache["modality"], cache["mcache"],
                        dz0, grads)


def encode(model: ToyModel, modality: str, inputs: np.ndarray,
           adapter: Optional[LoraAdapter] = None, capture_layers: bool = False):
    """Embed a batch. With capture_layers, also return every trunk activation."""
    if adapter is not None:
        _check_adapter(model, adapter)
    z0, _ = _modal_forward(model.params, model.spec, modality, inputs)
    zs = _trunk_forward(model.params, model.spec, z0, adapter)
    if capture_layers:
        return zs[-1], zs[1:]
    return zs[-1]


def _gen_loss_grads(model: ToyModel, source: str, inputs: np.ndarray,
                    tokens: np.ndarray, adapter: Optional[LoraAdapter] = None,
                    scope: str = "all") -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean per-token cross entropy of the generative head, with grads."""
    spec = model.spec
    params = model.params
    tokens = np.asarray(tokens)
    if tokens.min() < 0 or tokens.max() >= spec.vocab_size:
        raise ValueError("token id out of range")
    emb, cache = embed_forward(model, source, inputs, adapter)
    n = emb.shape[0]
    logits = (emb @ params["head.w"].T + params["head.b"]).reshape(
        n, spec.text_len, spec.vocab_size
    )
    m = logits.max(axis=2, keepdims=True)
    shifted = logits - m
    lse = np.log(np.exp(shifted).sum(axis=2, keepdims=True))
    logp = shifted - lse
    rows = np.arange(n)[:, None]
    cols = np.arange(spec.text_len)[None, :]
    loss = exact_mean(-logp[rows, cols, tokens])

    grads: Dict[str, np.ndarray] = {}
    dlogits = np.exp(logp)
    dlogits[rows, cols, tokens] -= 1.0
    dlogits /= n * spec.text_len
    dflat = dlogits.reshape(n, -1)
    if scope == "all":
        grads["head.w"] = dflat.T @ emb
        grads["head.b"] = dflat.sum(axis=0, keepdims=True)
    demb = dflat @ params["head.w"]
    embed_backward(model, cache, demb, adapter, scope, grads)
    return loss, grads


def generative_loss(model: ToyModel, batch: Sequence[Sample],
                    source_modality: str) -> float:
    """Mean cross entropy (nats per token) of predicting the batch's tokens
    from the given source modality."""
    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    tokens = np.stack([s.tokens for s in batch])
    inputs = tokens if source_modality == TEXT else stack_views(batch, source_modality)
    loss, _ = _gen_loss_grads(model, source_modality, inputs, tokens, scope="none")
    return loss


def stack_views(batch: Sequence[Sample], modality: str) -> np.ndarray:
    if modality == TEXT:
        return np.stack([s.tokens for s in batch])
    return np.stack([s.obs[modality] for s in batch])


def pretrain(model: ToyModel, world: World, source_modalities: Sequence[str],
             steps: int, lr: float, batch: int, rng: Rng) -> Tuple[ToyModel, List[float]]:
    """Adam on the generative loss averaged over the listed source modalities.

    Each step draws one paired batch from the world; every source modality
    predicts the same canonical target tokens from its own view. On
    multi-page worlds the text-source input is a uniformly drawn page
    (caption-variant augmentation); the target stays the canonical page.
    """
    if not source_modalities:
        raise ValueError("source_modalities must be non-empty")
    if steps < 0:
        raise ValueError("steps must be >= 0")
    spec = model.spec
    world_names = {m.name for m in world.spec.modalities}
    for src in source_modalities:
        if src != TEXT:
            spec.obs_dim(src)  # raises on unknown
            if src not in world_names:
                raise ValueError(f"world has no modality {src!r}")

    out = model.copy()
    if steps == 0:
        return out, []
    opt = Adam(lr=lr)
    trace: List[float] = []
    n_src = len(source_modalities)
    pages = world.spec.text_pages
    for _ in range(steps):
        ids, obs, tokens = sample_arrays(world, batch, rng)
        total = 0.0
        grads: Dict[str, np.ndarray] = {}
        for src in source_modalities:
            if src == TEXT:
                if pages > 1:
                    inputs = world.token_table[ids, rng.integers(0, pages, batch)]
                else:
                    inputs = tokens
            else:
                inputs = obs[src]
            loss, g = _gen_loss_grads(out, src, inputs, tokens, scope="all")
            total += loss
            for k, v in g.items():
                _accum(grads, k, v)
        for k in grads:
            grads[k] /= n_src
        trace.append(total / n_src)
        opt.step(out.params, grads)
    return out, trace


def merge_lora(model: ToyModel, adapter: LoraAdapter) -> ToyModel:
    """Materialize W + (alpha/rank) B A into a new model."""
    _check_adapter(model, adapter)
    out = model.copy()
    for i in range(model.spec.n_trunk_layers):
        out.params[f"trunk.{i}.w"] += adapter.delta(i)
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


class CheckpointError(Exception):
    """Raised for malformed or truncated checkpoint files."""


@dataclass(frozen=True)
class Checkpoint:
    spec: ModelSpec
    tensors: Dict[str, np.ndarray]
    meta: Dict[str, str]


_MAGIC = b"LCOC"
_VERSION = 1


def _spec_to_lines(spec: ModelSpec) -> Dict[str, str]:
    return {
        "spec.modalities": ",".join(f"{n}:{d}" for n, d in spec.modalities),
        "spec.enc_hidden": str(spec.enc_hidden),
        "spec.trunk_dims": ",".join(str(d) for d in spec.trunk_dims),
        "spec.embed_dim": str(spec.embed_dim),
        "spec.vocab_size": str(spec.vocab_size),
        "spec.text_len": str(spec.text_len),
        "spec.init_seed": str(spec.init_seed),
        "spec.emb_bias_scale": repr(spec.emb_bias_scale),
    }


def _spec_from_lines(kv: Dict[str, str]) -> ModelSpec:
    try:
        mods = tuple(
            (part.split(":")[0], int(part.split(":")[1]))
            for part in kv["spec.modalities"].split(",")
            if part
        )
        return ModelSpec(
            modalities=mods,
            enc_hidden=int(kv["spec.enc_hidden"]),
            trunk_dims=tuple(int(x) for x in kv["spec.trunk_dims"].split(",")),
            embed_dim=int(kv["spec.embed_dim"]),
            vocab_size=int(kv["spec.vocab_size"]),
            text_len=int(kv["spec.text_len"]),
            init_seed=int(kv["spec.init_seed"]),
            emb_bias_scale=float(kv["spec.emb_bias_scale"]),
        )
    except (KeyError, IndexError, ValueError) as exc:
        raise CheckpointError(f"bad spec block: {exc}") from exc


def _header_block(ckpt: Checkpoint) -> bytes:
    kv = dict(_spec_to_lines(ckpt.spec))
    for k, v in ckpt.meta.items():
        kv[f"meta.{k}"] = str(v)
    lines = [f"{k}={kv[k]}" for k in sorted(kv)]
    return "\n".join(lines).encode("utf-8")


def model_to_checkpoint(model: ToyModel, stage: str, seed: int,
                        steps: int, parents: Iterable[str] = ()) -> Checkpoint:
    meta = {
        "stage": stage,
        "seed": str(seed),
        "steps": str(steps),
        "parents": ",".join(parents),
    }
    return Checkpoint(
        spec=model.spec,
        tensors={k: v.copy() for k, v in model.params.items()},
        meta=meta,
    )


def checkpoint_to_model(ckpt: Checkpoint) -> ToyModel:
    return ToyModel(ckpt.spec, {k: v.copy() for k, v in ckpt.tensors.items()})


def checkpoint_id(ckpt: Checkpoint) -> str:
    """Content hash over spec and tensors (meta excluded)."""
    h = hashlib.sha256()
    spec_text = "\n".join(f"{k}={v}" for k, v in sorted(_spec_to_lines(ckpt.spec).items()))
    h.update(spec_text.encode("utf-8"))
    for name in sorted(ckpt.tensors):
        h.update(name.encode())
        h.update(np.ascontiguousarray(ckpt.tensors[name], dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def soup(checkpoints: Sequence[Checkpoint]) -> Checkpoint:
    """Uniform parameter average of checkpoints sharing one ModelSpec.

    Summands are sorted elementwise before adding so the result is bitwise
    invariant to the order of the argument list.
    """
    if len(checkpoints) < 2:
        raise ValueError("soup needs at least 2 checkpoints")
    spec = checkpoints[0].spec
    names = set(checkpoints[0].tensors)
    for c in checkpoints[1:]:
        if c.spec != spec:
            raise ValueError("checkpoint specs differ")
        if set(c.tensors) != names:
            raise ValueError("checkpoint tensor names differ")
    tensors: Dict[str, np.ndarray] = {}
    for name in names:
        stack = np.stack([c.tensors[name] for c in checkpoints])
        stack = np.sort(stack, axis=0)
        tensors[name] = stack.sum(axis=0) / len(checkpoints)
    meta = {
        "stage": "soup",
        "seed": "",
        "steps": "0",
        "parents": ",".join(checkpoint_id(c) for c in checkpoints),
    }
    return Checkpoint(spec=spec, tensors=tensors, meta=meta)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    header = _header_block(ckpt)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<H", _VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(ckpt.tensors)))
        for name in sorted(ckpt.tensors):
            t = np.ascontiguousarray(ckpt.tensors[name], dtype="<f8")
            if t.ndim != 2:
                raise ValueError(f"tensor {name!r} is not 2-d")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<II", t.shape[0], t.shape[1]))
            fh.write(t.tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != _MAGIC:
            raise CheckpointError("bad magic: not a checkpoint file")
        (version,) = struct.unpack("<H", _read_exact(fh, 2, "version"))
        if version != _VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", _read_exact(fh, 4, "header length"))
        header = _read_exact(fh, hlen, "header").decode("utf-8")
        kv: Dict[str, str] = {}
        for line in header.splitlines():
            if "=" not in line:
                raise CheckpointError(f"malformed header line {line!r}")
            k, _, v = line.partition("=")
            kv[k] = v
        spec = _spec_from_lines(kv)
        meta = {k[5:]: v for k, v in kv.items() if k.startswith("meta.")}
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, nlen, "tensor name").decode("utf-8")
            rows, cols = struct.unpack("<II", _read_exact(fh, 8, "tensor shape"))
            raw = _read_exact(fh, rows * cols * 8, f"tensor {name!r}")
            tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(rows, cols).copy()
        if fh.read(1):
            raise CheckpointError("trailing bytes after last tensor")
        if not all(np.all(np.isfinite(t)) for t in tensors.values()):
            raise CheckpointError("checkpoint contains non-finite values")
    return Checkpoint(spec=spec, tensors=tensors, meta=meta)
