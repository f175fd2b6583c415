"""End-to-end experiment pipelines behind the CLI's replicate commands.

Every pipeline is a pure function of its RunConfig: seeds derive from the
configured base seed, outputs carry no timestamps, and rerunning with the
same config reproduces byte-identical CSV/JSON files.
"""

from __future__ import annotations

import hashlib
import json
import os
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import RunConfig
from .contrastive import CLConfig, CLResult, cl_train, make_toy_triplets
from .datagen import World, build_world, sample_arrays, text_views
from .evalsuite import (
    MetricReport,
    kmeans_nmi,
    linear_probe,
    ndcg_at_k,
    rank_by_cosine,
    recall_at_k,
    spearman,
    zeroshot_classify,
)
from .geometry import EmbeddingSet, anisotropy, layerwise_alignment
from .numerics import Rng, cosine
from .theory import (
    BoundCheckConfig,
    ScalingPoint,
    bound_check,
    grsl_fit,
)
from .toymodel import (
    ToyModel,
    _gen_loss_grads,
    encode,
    init_model,
    pretrain,
    spec_for_world,
)

__all__ = [
    "write_csv",
    "write_json",
    "write_provenance",
    "sha256_file",
    "metric_suite",
    "run_fig_phenomena",
    "run_fig1",
    "run_fig2",
    "run_table4",
    "run_grsl",
    "run_bound_sweep",
    "run_seadoc_protocol",
]


# ---------------------------------------------------------------------------
# deterministic writers
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    return str(value)


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_provenance(out_dir, command: str, cfg: RunConfig,
                     inputs: Sequence[str] = ()) -> None:
    record = {
        "command": command,
        "config": {k: _fmt(v) for k, v in cfg.as_dict().items()},
        "inputs": {str(p): sha256_file(p) for p in sorted(map(str, inputs))},
    }
    write_json(os.path.join(out_dir, "provenance.json"), record)


# ---------------------------------------------------------------------------
# shared building blocks
# ---------------------------------------------------------------------------


def build_pretrained(cfg: RunConfig, seed: int) -> Tuple[World, ToyModel, List[float]]:
    world = build_world(cfg.world_spec(seed))
    model = init_model(
        spec_for_world(
            world,
            enc_hidden=cfg["model.enc_hidden"],
            trunk_dims=cfg.trunk_dims(),
            init_seed=seed,
            emb_bias_scale=cfg["model.emb_bias"],
        )
    )
    sources = [s.strip() for s in str(cfg["pretrain.sources"]).split(",") if s.strip()]
    model, trace = pretrain(
        model, world, sources,
        steps=cfg["pretrain.steps"], lr=cfg["pretrain.lr"],
        batch=cfg["pretrain.batch"], rng=Rng(seed * 31 + 1),
    )
    return world, model, trace

def refine(cfg: RunConfig, world: World, model: ToyModel, seed: int,
           strategy: Optional[str] = None,
           steps: Optional[int] = None) -> Tuple[CLResult, List[float]]:
    triplets = make_toy_triplets(world, cfg["cl.triplets"], Rng(seed * 31 + 2))
    clcfg = CLConfig(
        strategy=strategy or str(cfg["cl.strategy"]),
        temperature=cfg["cl.tau"],
        steps=cfg["cl.steps"] if steps is None else steps,
        lr=cfg["cl.lr"],
        batch_size=cfg["cl.batch"],
        seed=seed * 31 + 3,
        lora_rank=cfg["lora.r"],
        lora_alpha=cfg["lora.alpha"],
    )
    return cl_train(model, triplets, clcfg)


def _modality_names(world: World) -> List[str]:
    return [m.name for m in world.spec.modalities]


def _views(world: World, n: int, rng: Rng):
    ids, obs, _ = sample_arrays(world, n, rng)
    return ids, {"text": text_views(world, ids, rng), **obs}


def _encode_with(model_or_result, modality: str, inputs):
    if isinstance(model_or_result, CLResult):
        return model_or_result.encode(modality, inputs)
    return encode(model_or_result, modality, inputs)


def retrieval_instance(model_or_result, world: World, modality: str, n: int,
                       seed: int):
    """Cross-modal retrieval: text-view queries against an observation corpus;
    every same-class document is relevant."""
    rng = Rng(seed)
    ids, views = _views(world, n, rng)
    q = _encode_with(model_or_result, "text", views["text"])
    d = _encode_with(model_or_result, modality, views[modality])
    qids = [f"q{i:04d}" for i in range(n)]
    dids = [f"d{i:04d}" for i in range(n)]
    rankings = rank_by_cosine(q, d, qids, dids)
    qrels = {
        qids[i]: {dids[j] for j in range(n) if ids[j] == ids[i]}
        for i in range(n)
    }
    return rankings, qrels


def metric_suite(model_or_result, world: World, cfg: RunConfig,
                 seed: int, dataset: str) -> List[MetricReport]:
    """Retrieval, STS-style correlation, probing, zero-shot, and clustering
    metrics for one model on held-out draws."""
    n = cfg["eval.n"]
    k_classes = world.spec.latent_classes
    reports: List[MetricReport] = []

    for mod in _modality_names(world):
        rankings, qrels = retrieval_instance(model_or_result, world, mod, n,
                                             seed * 97 + 11)
        reports.append(MetricReport("recall@1", recall_at_k(rankings, qrels, 1),
                                    n, f"{dataset}/{mod}", k=1, seed=seed))
        reports.append(MetricReport("ndcg@10", ndcg_at_k(rankings, qrels, 10),
                                    n, f"{dataset}/{mod}", k=10, seed=seed))

    # similarity correlation: latent cosine is the gold similarity of a pair
    rng = Rng(seed * 97 + 12)
    ids, views = _views(world, n, rng)
    emb_text = _encode_with(model_or_result, "text", views["text"])
    half = n // 2
    gold, pred = [], []
    lat = world.class_latents
    for i in range(half):
        a, b = i, half + i
        gold.append(cosine(lat[ids[a]], lat[ids[b]]))
        pred.append(cosine(emb_text[a], emb_text[b]))
    reports.append(MetricReport("spearman", spearman(pred, gold), half,
                                f"{dataset}/text-sts", seed=seed))

    # per-modality probing / zero-shot / clustering on observation embeddings
    shots = cfg["eval.shots"]
    rng_tr = Rng(seed * 97 + 13)
    n_train = k_classes * (shots + 8)
    ids_tr, obs_tr, _ = sample_arrays(world, n_train, rng_tr)
    rng_te = Rng(seed * 97 + 14)
    ids_te, obs_te, _ = sample_arrays(world, n, rng_te)
    prompts = _encode_with(model_or_result, "text", world.token_table[:, 0])
    for mod in _modality_names(world):
        tr = _encode_with(model_or_result, mod, obs_tr[mod])
        te = _encode_with(model_or_result, mod, obs_te[mod])
        acc = linear_probe(tr, ids_tr, te, ids_te, shots=shots, seed=seed)
        reports.append(MetricReport("accuracy", acc, n, f"{dataset}/{mod}-probe",
                                    seed=seed))
        zs = zeroshot_classify(te, prompts, ids_te)
        reports.append(MetricReport("accuracy", zs, n, f"{dataset}/{mod}-zeroshot",
                                    seed=seed))
        nmi_val = kmeans_nmi(te, ids_te, k_classes, seed=seed)
        reports.append(MetricReport("nmi", nmi_val, n, f"{dataset}/{mod}-cluster",
                                    seed=seed))
    return reports


# ---------------------------------------------------------------------------
# replicate pipelines
# ---------------------------------------------------------------------------


def run_fig_phenomena(cfg: RunConfig) -> Dict[str, list]:
    """Shared runs behind the anisotropy and alignment replications.

    For each shipped seed: pretrain, text-only low-rank refinement, then
    held-out anisotropy per modality and layer-wise text/non-text alignment,
    both before and after refinement.
    """
    base = cfg["seed"]
    aniso_rows, align_rows = [], []
    for seed in range(base, base + cfg["fig.seeds"]):
        world, pre_model, _ = build_pretrained(cfg, seed)
        result, _ = refine(cfg, world, pre_model, seed)
        merged = result.merged_model()

        rng = Rng(seed * 31 + 4)
        _, views = _views(world, cfg["eval.aniso_n"], rng)
        for mod, x in views.items():
            pre = anisotropy(EmbeddingSet.from_vectors(mod, encode(pre_model, mod, x)))
            post = anisotropy(EmbeddingSet.from_vectors(mod, encode(merged, mod, x)))
            rel = (pre - post) / abs(pre)
            aniso_rows.append([seed, mod, pre, post, rel])

        rng2 = Rng(seed * 31 + 5)
        _, views2 = _views(world, cfg["eval.align_batch"], rng2)
        k = cfg["eval.k"]
        for mod in _modality_names(world):
            curves = {
                "pre": layerwise_alignment(pre_model, "text", views2["text"],
                                           mod, views2[mod], k),
                "post": layerwise_alignment(merged, "text", views2["text"],
                                            mod, views2[mod], k),
            }
            for stage, curve in curves.items():
                for layer, score in zip(curve.layers, curve.scores):
                    align_rows.append([seed, mod, stage, layer, score])
    return {"anisotropy": aniso_rows, "alignment": align_rows}


def run_fig1(cfg: RunConfig, out_dir) -> dict:
    rows = run_fig_phenomena(cfg)["anisotropy"]
    write_csv(os.path.join(out_dir, "fig1_anisotropy.csv"),
              ["seed", "modality", "pre", "post", "rel_decrease"], rows)
    by_seed: Dict[int, bool] = {}
    for seed, mod, pre, post, rel in rows:
        by_seed[seed] = by_seed.get(seed, True) and rel >= 0.2
    summary = {
        "seeds": sorted(by_seed),
        "seeds_with_all_modalities_reduced_20pct": sum(by_seed.values()),
        "min_rel_decrease": min(r[4] for r in rows),
    }
    write_json(os.path.join(out_dir, "summary.json"), summary)
    return summary


def run_fig2(cfg: RunConfig, out_dir) -> dict:
    rows = run_fig_phenomena(cfg)["alignment"]
    write_csv(os.path.join(out_dir, "fig2_alignment.csv"),
              ["seed", "modality", "stage", "layer", "mutual_knn"], rows)
    last_layer = max(r[3] for r in rows)
    final: Dict[Tuple[int, str], Dict[str, float]] = {}
    for seed, mod, stage, layer, score in rows:
        if layer == last_layer:
            final.setdefault((seed, mod), {})[stage] = score
    increases = {f"{seed}/{mod}": v["post"] - v["pre"]
                 for (seed, mod), v in sorted(final.items())}
    seeds = sorted({s for s, _ in final})
    all_up = {
        s: all(v["post"] > v["pre"] for (sd, _), v in final.items() if sd == s)
        for s in seeds
    }
    summary = {
        "final_layer": last_layer,
        "increase_by_run": increases,
        "seeds_with_all_modalities_increased": sum(all_up.values()),
        "seeds": seeds,
    }
    write_json(os.path.join(out_dir, "summary.json"), summary)
    return summary


def run_table4(cfg: RunConfig, out_dir) -> dict:
    """One pretrained model refined under each training strategy, scored with
    the full metric suite side by side. No ordering is asserted."""
    seed = cfg["seed"]
    world, pre_model, _ = build_pretrained(cfg, seed)
    rows = []
    summary: Dict[str, Dict[str, float]] = {}
    for strategy in ("lora", "full_finetune", "linear_projection"):
        result, _ = refine(cfg, world, pre_model, seed, strategy=strategy)
        reports = metric_suite(result, world, cfg, seed, dataset=strategy)
        for r in reports:
            rows.append([strategy, r.metric, r.dataset, r.value, r.n, r.seed])
        summary[strategy] = {f"{r.dataset}:{r.metric}": r.value for r in reports}
    write_csv(os.path.join(out_dir, "table4_strategies.csv"),
              ["strategy", "metric", "dataset", "value", "n", "seed"], rows)
    write_json(os.path.join(out_dir, "summary.json"), summary)
    return summary


def run_grsl(cfg: RunConfig, out_dir) -> dict:
    """Scaling study: models pretrained for increasing budgets, identically
    refined, scored on held-out retrieval."""
    seed = cfg["seed"]
    budgets = [int(b) for b in str(cfg["grsl.budgets"]).split(",")]
    modality = str(cfg["grsl.modality"])
    world = build_world(cfg.world_spec(seed))
    points: List[ScalingPoint] = []
    rows = []
    for budget in budgets:
        model = init_model(
            spec_for_world(world, enc_hidden=cfg["model.enc_hidden"],
                           trunk_dims=cfg.trunk_dims(), init_seed=seed,
                           emb_bias_scale=cfg["model.emb_bias"])
        )
        sources = [s.strip() for s in str(cfg["pretrain.sources"]).split(",")]
        model, _ = pretrain(model, world, sources, budget, cfg["pretrain.lr"],
                            cfg["pretrain.batch"], Rng(seed * 31 + 1))
        _, obs, tokens = sample_arrays(world, 2048, Rng(seed * 31 + 6))
        per_tok, _ = _gen_loss_grads(model, modality, obs[modality], tokens,
                                     scope="none")
        lg_seq = per_tok * world.spec.text_len
        result, _ = refine(cfg, world, model, seed, steps=cfg["grsl.cl_steps"])
        rankings, qrels = retrieval_instance(result, world, modality,
                                             cfg["eval.n"], seed * 31 + 7)
        r1 = recall_at_k(rankings, qrels, 1)
        points.append(ScalingPoint(f"steps{budget}", lg_seq, False, r1))
        rows.append([f"steps{budget}", lg_seq, "lower", r1])
    fit = grsl_fit(points)
    write_csv(os.path.join(out_dir, "grsl_points.csv"),
              ["model_id", "gen_score", "gen_direction", "rep_score"], rows)
    summary = {"fit": fit, "modality": modality, "budgets": budgets}
    write_json(os.path.join(out_dir, "summary.json"), summary)
    return summary


def run_bound_sweep(cfg: RunConfig, out_dir) -> dict:
    """Seeded end-to-end runs of the generalization-bound check."""
    rows = []
    holds = 0
    n_seeds = cfg["bound.seeds"]
    base = cfg["seed"]
    for i in range(n_seeds):
        seed = base + i
        world = build_world(cfg.bound_world_spec(seed))
        model = init_model(
            spec_for_world(world, enc_hidden=cfg["bound.enc_hidden"],
                           trunk_dims=cfg.bound_trunk_dims(), init_seed=seed,
                           emb_bias_scale=cfg["model.emb_bias"])
        )
        model, _ = pretrain(model, world, ["text"] + _modality_names(world),
                            cfg["bound.pretrain_steps"], cfg["bound.pretrain_lr"],
                            cfg["bound.pretrain_batch"], Rng(seed * 7 + 1))
        triplets = make_toy_triplets(world, cfg["bound.triplets"], Rng(seed * 7 + 2))
        clcfg = CLConfig(strategy="lora", steps=cfg["bound.cl_steps"],
                         lr=cfg["cl.lr"], batch_size=cfg["bound.cl_batch"],
                         temperature=cfg["cl.tau"], seed=seed * 7 + 3,
                         lora_rank=cfg["bound.lora_r"],
                         lora_alpha=cfg["bound.lora_alpha"])
        result, _ = cl_train(model, triplets, clcfg)
        bcfg = BoundCheckConfig(
            eval_batch_n=cfg["bound.N"],
            heldout_batches=cfg["bound.heldout_batches"],
            n_samples=cfg["bound.n"],
            delta=cfg["bound.delta"],
            sigma_q=cfg["bound.sigma_q"],
            sigma_p=cfg["bound.sigma_p"],
            gen_source=str(cfg["bound.gen_source"]),
            seed=seed * 7 + 4,
        )
        report = bound_check(model, result, world, triplets, clcfg.temperature,
                             bcfg)
        holds += report.holds
        rows.append([seed, report.empirical_pop_risk, report.bound,
                     report.holds, report.i_p, report.eps_p, report.kl,
                     report.train_risk, report.lg_per_seq])
    write_csv(os.path.join(out_dir, "bound_runs.csv"),
              ["seed", "empirical_pop_risk", "bound", "holds", "i_p", "eps_p",
               "kl", "train_risk", "lg_per_seq"], rows)
    summary = {
        "runs": n_seeds,
        "holds": holds,
        "hold_fraction": holds / n_seeds,
        "delta": cfg["bound.delta"],
    }
    write_json(os.path.join(out_dir, "summary.json"), summary)
    return summary


def run_seadoc_protocol(cfg: RunConfig, out_dir) -> dict:
    """Continued generative pretraining on the hard modality before the same
    refinement, compared against refining directly."""
    hard = str(cfg["seadoc.hard_mod"])
    base = cfg["seed"]
    rows = []
    wins = 0
    for seed in range(base, base + cfg["seadoc.seeds"]):
        world = build_world(cfg.world_spec(seed))
        model = init_model(
            spec_for_world(world, enc_hidden=cfg["model.enc_hidden"],
                           trunk_dims=cfg.trunk_dims(), init_seed=seed,
                           emb_bias_scale=cfg["model.emb_bias"])
        )
        sources = [s.strip() for s in str(cfg["pretrain.sources"]).split(",")]
        common, _ = pretrain(model, world, sources, cfg["seadoc.base_steps"],
                             cfg["pretrain.lr"], cfg["pretrain.batch"],
                             Rng(seed * 31 + 1))
        variant, _ = pretrain(common, world, [hard, "text"],
                              cfg["seadoc.extra_steps"], cfg["pretrain.lr"],
                              cfg["pretrain.batch"], Rng(seed * 31 + 8))
        scores = {}
        for arm, m in (("baseline", common), ("continued-pretrain", variant)):
            result, _ = refine(cfg, world, m, seed)
            rankings, qrels = retrieval_instance(result, world, hard,
                                                 cfg["eval.n"], seed * 31 + 9)
            scores[arm] = ndcg_at_k(rankings, qrels, 10)
            rows.append([seed, arm, scores[arm]])
        wins += scores["continued-pretrain"] >= scores["baseline"]
    write_csv(os.path.join(out_dir, "seadoc_protocol.csv"),
              ["seed", "arm", "ndcg@10"], rows)
    summary = {
        "hard_modality": hard,
        "seeds": cfg["seadoc.seeds"],
        "continued_pretrain_at_least_baseline": wins,
    }
    write_json(os.path.join(out_dir, "summary.json"), summary)
    return summary
