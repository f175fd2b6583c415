"""Run configuration: line-oriented ``key = value`` files with namespaced,
fully documented keys. Unknown keys are rejected; resolved values (defaults
included) are materialized into every run's provenance record.
"""

from __future__ import annotations

from typing import Dict, List, Tuple

from .datagen import ModalitySpec, WorldSpec
from .toymodel import ModelSpec

__all__ = ["ConfigError", "RunConfig", "REGISTRY", "parse_modality_list"]


class ConfigError(ValueError):
    """Bad config key, value, or file."""


# key -> (type, default, help)
REGISTRY: Dict[str, Tuple[type, object, str]] = {
    "seed": (int, 1, "base seed; per-run seeds derive from it"),
    "world.K": (int, 64, "number of latent classes"),
    "world.dz": (int, 8, "latent dimension"),
    "world.modalities": (str, "img:24:0.1,aud:20:0.3,vid:28:0.45",
                         "comma list of name:obs_dim:noise_sigma"),
    "world.V": (int, 32, "vocabulary size"),
    "world.L": (int, 6, "token sequence length"),
    "world.pages": (int, 4, "token renderings per class (page 0 canonical)"),
    "world.page_flips": (int, 2, "positions resampled in non-canonical pages"),
    "model.enc_hidden": (int, 32, "encoder hidden width"),
    "model.trunk": (str, "48,32", "trunk layer widths; last equals embed dim"),
    "model.emb_bias": (float, 1.2, "init scale of the final trunk bias"),
    "pretrain.steps": (int, 3000, "generative pretraining steps"),
    "pretrain.lr": (float, 1e-3, "pretraining learning rate"),
    "pretrain.batch": (int, 64, "pretraining batch size"),
    "pretrain.sources": (str, "text,img,aud,vid",
                         "source modalities for generative training"),
    "cl.strategy": (str, "lora", "lora | full_finetune | linear_projection"),
    "cl.tau": (float, 0.2, "contrastive temperature"),
    "cl.lr": (float, 1e-3, "contrastive learning rate"),
    "cl.steps": (int, 1000, "contrastive steps"),
    "cl.batch": (int, 32, "contrastive batch size"),
    "cl.triplets": (int, 4096, "size of the generated triplet source"),
    "lora.r": (int, 8, "adapter rank"),
    "lora.alpha": (float, 16.0, "adapter scale"),
    "eval.n": (int, 512, "held-out items per retrieval/probe evaluation"),
    "eval.aniso_n": (int, 1024, "sample size for anisotropy estimates"),
    "eval.k": (int, 10, "neighborhood size for mutual-kNN"),
    "eval.align_batch": (int, 512, "paired batch size for alignment curves"),
    "eval.shots": (int, 16, "shots per class for linear probing"),
    "fig.seeds": (int, 5, "seeds for the fig1/fig2 replications"),
    "grsl.budgets": (str, "250,500,1000,2000,4000",
                     "pretraining step budgets for the scaling study"),
    "grsl.cl_steps": (int, 500, "contrastive steps per scaling point"),
    "grsl.modality": (str, "vid", "modality scored in the scaling study"),
    "seadoc.base_steps": (int, 2000, "shared pretraining steps"),
    "seadoc.extra_steps": (int, 1500, "continued pretraining on the hard modality"),
    "seadoc.hard_mod": (str, "vid", "hard (high-noise) modality"),
    "seadoc.seeds": (int, 5, "seeds for the protocol comparison"),
    "bound.K": (int, 16, "world classes for the bound study"),
    "bound.modality": (str, "img:12:0.2", "single modality for the bound study"),
    "bound.V": (int, 16, "vocab size for the bound study"),
    "bound.L": (int, 4, "text length for the bound study"),
    "bound.pages": (int, 2, "token pages for the bound study"),
    "bound.enc_hidden": (int, 16, "encoder width for the bound study"),
    "bound.trunk": (str, "24,16", "trunk widths for the bound study"),
    "bound.pretrain_steps": (int, 1500, "pretraining steps per bound run"),
    "bound.pretrain_lr": (float, 2e-3, "pretraining lr per bound run"),
    "bound.pretrain_batch": (int, 32, "pretraining batch per bound run"),
    "bound.cl_steps": (int, 300, "contrastive steps per bound run"),
    "bound.cl_batch": (int, 16, "contrastive batch per bound run"),
    "bound.lora_r": (int, 4, "adapter rank per bound run"),
    "bound.lora_alpha": (float, 8.0, "adapter scale per bound run"),
    "bound.triplets": (int, 1024, "triplet source size per bound run"),
    "bound.N": (int, 16, "candidate-set size N of the evaluated loss"),
    "bound.heldout_batches": (int, 16, "held-out batches for the risk estimate"),
    "bound.n": (int, 1024, "sample count n entering the penalty term"),
    "bound.delta": (float, 0.05, "confidence parameter delta"),
    "bound.sigma_q": (float, 0.01, "posterior std over the adapter delta"),
    "bound.sigma_p": (float, 0.1, "prior std over the adapter delta"),
    "bound.seeds": (int, 40, "seeded runs in the bound sweep"),
    "bound.gen_source": (str, "text", "source whose generative loss feeds I_P"),
}


def _coerce(key: str, raw: str):
    typ, _, _ = REGISTRY[key]
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc


def parse_modality_list(raw: str) -> Tuple[ModalitySpec, ...]:
    mods: List[ModalitySpec] = []
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        bits = part.split(":")
        if len(bits) != 3:
            raise ConfigError(f"modality entry {part!r} is not name:dim:sigma")
        try:
            mods.append(ModalitySpec(bits[0], int(bits[1]), float(bits[2])))
        except ValueError as exc:
            raise ConfigError(f"bad modality entry {part!r}: {exc}") from exc
    if not mods:
        raise ConfigError("modality list is empty")
    return tuple(mods)


class RunConfig:
    """Resolved configuration: defaults, then file, then overrides."""

    def __init__(self, values: Dict[str, object]):
        self._values = values

    @staticmethod
    def load(path=None, overrides: Dict[str, str] | None = None) -> "RunConfig":
        values = {k: d for k, (_, d, _) in REGISTRY.items()}
        if path is not None:
            try:
                text = open(path, "r", encoding="utf-8").read()
            except OSError as exc:
                raise ConfigError(f"cannot read config file: {exc}") from exc
            for lineno, line in enumerate(text.splitlines(), start=1):
                stripped = line.strip()
                if not stripped or stripped.startswith("#"):
                    continue
                if "=" not in stripped:
                    raise ConfigError(f"line {lineno}: expected key = value")
                key, _, raw = stripped.partition("=")
                key = key.strip()
                if key not in REGISTRY:
                    raise ConfigError(f"line {lineno}: unknown key {key!r}")
                values[key] = _coerce(key, raw.strip())
        for key, raw in (overrides or {}).items():
            if key not in REGISTRY:
                raise ConfigError(f"unknown key {key!r}")
            values[key] = _coerce(key, str(raw))
        return RunConfig(values)

    def __getitem__(self, key: str):
        if key not in self._values:
            raise ConfigError(f"unknown key {key!r}")
        return self._values[key]

    def as_dict(self) -> Dict[str, object]:
        return dict(sorted(self._values.items()))

    # ---- derived objects ----

    def world_spec(self, seed: int) -> WorldSpec:
        return WorldSpec(
            latent_classes=self["world.K"],
            latent_dim=self["world.dz"],
            modalities=parse_modality_list(self["world.modalities"]),
            vocab_size=self["world.V"],
            text_len=self["world.L"],
            text_pages=self["world.pages"],
            page_flips=self["world.page_flips"],
            seed=seed,
        )

    def trunk_dims(self) -> Tuple[int, ...]:
        try:
            dims = tuple(int(x) for x in str(self["model.trunk"]).split(","))
        except ValueError as exc:
            raise ConfigError(f"bad model.trunk: {self['model.trunk']!r}") from exc
        return dims

    def bound_world_spec(self, seed: int) -> WorldSpec:
        return WorldSpec(
            latent_classes=self["bound.K"],
            latent_dim=6,
            modalities=parse_modality_list(self["bound.modality"]),
            vocab_size=self["bound.V"],
            text_len=self["bound.L"],
            text_pages=self["bound.pages"],
            page_flips=2,
            seed=seed,
        )

    def bound_trunk_dims(self) -> Tuple[int, ...]:
        return tuple(int(x) for x in str(self["bound.trunk"]).split(","))


def describe_keys() -> str:
    lines = []
    for key in sorted(REGISTRY):
        typ, default, help_text = REGISTRY[key]
        lines.append(f"{key} ({typ.__name__}, default {default!r}): {help_text}")
    return "\n".join(lines)
