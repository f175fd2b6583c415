"""Command-line surface.

Every command takes --config/--set/--seed/--out-dir, writes a provenance
record plus its outputs into the out dir, and exits 0 on success, 1 on
validation errors, 2 on I/O or file-format errors. Reruns with identical
config and inputs produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import os
import sys


def _apply_thread_cap() -> None:
    cap = os.environ.get("LCO_THREADS")
    if cap:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


# must run before numpy spins up its thread pools
_apply_thread_cap()

import numpy as np  # noqa: E402

from .config import ConfigError, RunConfig, describe_keys  # noqa: E402
from .contrastive import CLConfig, cl_train, load_triplets_jsonl, make_toy_triplets  # noqa: E402
from .datagen import build_world, sample_batch, export_dataset  # noqa: E402
from .emdump import EmbDumpError, read_emb, write_emb  # noqa: E402
from .evalsuite import (  # noqa: E402
    load_qrels,
    ndcg_at_k,
    rank_by_cosine,
    recall_at_k,
    validate_qrels,
)
from .geometry import EmbeddingSet, anisotropy, mutual_knn  # noqa: E402
from .numerics import Rng  # noqa: E402
from .pipelines import (  # noqa: E402
    build_pretrained,
    metric_suite,
    run_bound_sweep,
    run_fig1,
    run_fig2,
    run_grsl,
    run_seadoc_protocol,
    run_table4,
    write_csv,
    write_json,
    write_provenance,
)
from .theory import grsl_fit, load_scaling_points_csv  # noqa: E402
from .toymodel import (  # noqa: E402
    CheckpointError,
    checkpoint_id,
    checkpoint_to_model,
    load_checkpoint,
    model_to_checkpoint,
    save_checkpoint,
    soup,
)

_REPLICATES = ("fig1", "fig2", "table4", "grsl", "bound", "seadoc-protocol")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    parser.add_argument("--seed", type=int, help="override the base seed")
    parser.add_argument("--out-dir", default=None, help="output directory")


def _resolve(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return RunConfig.load(args.config, overrides)


def _out_dir(args, command: str) -> str:
    out = args.out_dir or os.path.join("runs", command)
    os.makedirs(out, exist_ok=True)
    return out


def _inputs_of(args) -> list:
    paths = []
    if getattr(args, "config", None):
        paths.append(args.config)
    for attr in ("ckpt", "emb", "points", "triplets", "infile",
                 "queries_emb", "docs_emb", "qrels"):
        value = getattr(args, attr, None)
        if value is None:
            continue
        paths.extend(value if isinstance(value, list) else [value])
    return paths


def cmd_gen_world(args) -> None:
    cfg = _resolve(args)
    out = _out_dir(args, "gen-world")
    world = build_world(cfg.world_spec(cfg["seed"]))
    samples = sample_batch(world, cfg["eval.n"], Rng(cfg["seed"] * 31 + 10))
    export_dataset(world, samples, os.path.join(out, "world_sample.jsonl"))
    write_provenance(out, "gen-world", cfg, _inputs_of(args))
    write_json(os.path.join(out, "summary.json"), {
        "classes": world.spec.latent_classes,
        "modalities": [m.name for m in world.spec.modalities],
        "samples": cfg["eval.n"],
    })
    print(f"world sample written to {out}")


def cmd_pretrain(args) -> None:
    cfg = _resolve(args)
    out = _out_dir(args, "pretrain")
    world, model, trace = build_pretrained(cfg, cfg["seed"])
    ckpt = model_to_checkpoint(model, stage="pretrained", seed=cfg["seed"],
                               steps=cfg["pretrain.steps"])
    path = os.path.join(out, "pretrained.lcoc")
    save_checkpoint(ckpt, path)
    write_csv(os.path.join(out, "loss_trace.csv"), ["step", "loss"],
              [[i, v] for i, v in enumerate(trace)])
    write_provenance(out, "pretrain", cfg, _inputs_of(args))
    write_json(os.path.join(out, "summary.json"), {
        "checkpoint": "pretrained.lcoc",
        "checkpoint_id": checkpoint_id(ckpt),
        "final_loss": trace[-1] if trace else None,
        "steps": cfg["pretrain.steps"],
    })
    print(f"pretrained checkpoint written to {path}")


def cmd_cl_train(args) -> None:
    cfg = _resolve(args)
    out = _out_dir(args, "cl-train")
    ckpt = load_checkpoint(args.ckpt)
    model = checkpoint_to_model(ckpt)
    world = build_world(cfg.world_spec(cfg["seed"]))
    if args.triplets:
        triplets = load_triplets_jsonl(args.triplets)
    else:
        triplets = make_toy_triplets(world, cfg["cl.triplets"],
                                     Rng(cfg["seed"] * 31 + 2))
    clcfg = CLConfig(
        strategy=str(cfg["cl.strategy"]), temperature=cfg["cl.tau"],
        steps=cfg["cl.steps"], lr=cfg["cl.lr"], batch_size=cfg["cl.batch"],
        seed=cfg["seed"] * 31 + 3, lora_rank=cfg["lora.r"],
        lora_alpha=cfg["lora.alpha"],
    )
    result, trace = cl_train(model, triplets, clcfg)
    refined = result.merged_model()
    refined_ckpt = model_to_checkpoint(refined, stage=f"cl-{clcfg.strategy}",
                                       seed=cfg["seed"], steps=clcfg.steps,
                                       parents=[checkpoint_id(ckpt)])
    path = os.path.join(out, "refined.lcoc")
    save_checkpoint(refined_ckpt, path)
    write_csv(os.path.join(out, "loss_trace.csv"), ["step", "loss"],
              [[i, v] for i, v in enumerate(trace)])
    summary = {
        "strategy": clcfg.strategy,
        "checkpoint": "refined.lcoc",
        "checkpoint_id": checkpoint_id(refined_ckpt),
        "final_loss": trace[-1] if trace else None,
    }
    if result.adapter is not None:
        ad = result.adapter
        tensors = {}
        for i in sorted(ad.b):
            tensors[f"lora.{i}.b"] = ad.b[i]
            tensors[f"lora.{i}.a"] = ad.a[i]
        adapter_ckpt = type(refined_ckpt)(
            spec=refined_ckpt.spec, tensors=tensors,
            meta={"stage": "adapter", "seed": str(cfg["seed"]),
                  "steps": str(clcfg.steps),
                  "parents": checkpoint_id(ckpt),
                  "rank": str(ad.rank), "alpha": repr(ad.alpha)},
        )
        save_checkpoint(adapter_ckpt, os.path.join(out, "adapter.lcoc"))
        summary["adapter"] = "adapter.lcoc"
    write_provenance(out, "cl-train", cfg, _inputs_of(args))
    write_json(os.path.join(out, "summary.json"), summary)
    print(f"refined checkpoint written to {path}")


def cmd_soup(args) -> None:
    cfg = _resolve(args)
    out = _out_dir(args, "soup")
    ckpts = [load_checkpoint(p) for p in args.ckpt]
    mixed = soup(ckpts)
    path = os.path.join(out, "soup.lcoc")
    save_checkpoint(mixed, path)
    write_provenance(out, "soup", cfg, _inputs_of(args))
    write_json(os.path.join(out, "summary.json"), {
        "checkpoint": "soup.lcoc",
        "checkpoint_id": checkpoint_id(mixed),
        "parents": mixed.meta["parents"].split(","),
    })
    print(f"souped checkpoint written to {path}")


def cmd_analyze(args) -> None:
    cfg = _resolve(args)
    out = _out_dir(args, "analyze")
    dumps = [read_emb(p) for p in args.emb]
    rows = []
    if args.metric == "anisotropy":
        for path, (tag, vectors) in zip(args.emb, dumps):
            emb = EmbeddingSet.from_vectors(tag, vectors)
            rows.append(["anisotropy", tag, len(vectors), "", anisotropy(emb)])
    else:
        if len(dumps) != 2:
            raise ConfigError("mutual-knn needs exactly two --emb dumps")
        (tag_a, va), (tag_b, vb) = dumps
        score = mutual_knn(EmbeddingSet.from_vectors(tag_a, va),
                           EmbeddingSet.from_vectors(tag_b, vb), cfg["eval.k"])
        rows.append(["mutual_knn", f"{tag_a}|{tag_b}", len(va), cfg["eval.k"],
                     score])
    write_csv(os.path.join(out, "analysis.csv"),
              ["metric", "modality", "n", "k", "value"], rows)
    write_provenance(out, "analyze", cfg, _inputs_of(args))
    write_json(os.path.join(out, "summary.json"),
               {r[0] + ":" + str(r[1]): r[4] for r in rows})
    for r in rows:
        print(f"{r[0]}[{r[1]}] = {r[4]}")


def cmd_eval(args) -> None:
    cfg = _resolve(args)
    out = _out_dir(args, "eval")
    if args.queries_emb or args.docs_emb or args.qrels:
        if not (args.queries_emb and args.docs_emb and args.qrels):
            raise ConfigError(
                "external retrieval needs --queries-emb, --docs-emb and --qrels"
            )
        _, q = read_emb(args.queries_emb)
        _, d = read_emb(args.docs_emb)
        qrels = load_qrels(args.qrels)
        qids = [f"q{i}" for i in range(len(q))]
        dids = [f"d{i}" for i in range(len(d))]
        validate_qrels(qrels, dids)
        unknown = set(qrels) - set(qids)
        if unknown:
            raise ConfigError(f"qrels reference unknown queries {sorted(unknown)}")
        rankings = rank_by_cosine(q, d, qids, dids)
        k = cfg["eval.k"]
        rows = [
            ["recall@1", "external", recall_at_k(rankings, qrels, 1), len(q), 1,
             cfg["seed"]],
            [f"ndcg@{k}", "external", ndcg_at_k(rankings, qrels, k), len(q), k,
             cfg["seed"]],
        ]
        write_csv(os.path.join(out, "metrics.csv"),
                  ["metric", "dataset", "value", "n", "k", "seed"], rows)
        write_provenance(out, "eval", cfg, _inputs_of(args))
        write_json(os.path.join(out, "summary.json"),
                   {f"{r[1]}:{r[0]}": r[2] for r in rows})
        print(f"2 retrieval metrics written to {out}")
        return
    if not args.ckpt:
        raise ConfigError("eval needs --ckpt (or the three external-dump flags)")
    ckpt = load_checkpoint(args.ckpt)
    model = checkpoint_to_model(ckpt)
    world = build_world(cfg.world_spec(cfg["seed"]))
    reports = metric_suite(model, world, cfg, cfg["seed"], dataset="eval")
    rows = [[r.metric, r.dataset, r.value, r.n, r.k if r.k is not None else "",
             r.seed] for r in reports]
    write_csv(os.path.join(out, "metrics.csv"),
              ["metric", "dataset", "value", "n", "k", "seed"], rows)
    write_provenance(out, "eval", cfg, _inputs_of(args))
    write_json(os.path.join(out, "summary.json"),
               {f"{r.dataset}:{r.metric}": r.value for r in reports})
    print(f"{len(reports)} metrics written to {out}")


def cmd_grsl(args) -> None:
    cfg = _resolve(args)
    out = _out_dir(args, "grsl")
    if args.points:
        points = load_scaling_points_csv(args.points)
        fit = grsl_fit(points)
        write_provenance(out, "grsl", cfg, _inputs_of(args))
        write_json(os.path.join(out, "summary.json"), {"fit": fit,
                                                       "points": len(points)})
        print(f"fit on {len(points)} points: spearman {fit['spearman']:.3f}")
        return
    summary = run_grsl(cfg, out)
    write_provenance(out, "grsl", cfg, _inputs_of(args))
    print(f"scaling fit: spearman {summary['fit']['spearman']:.3f}")


def cmd_bound(args) -> None:
    cfg = _resolve(args)
    out = _out_dir(args, "bound")
    summary = run_bound_sweep(cfg, out)
    write_provenance(out, "bound", cfg, _inputs_of(args))
    print(f"bound held in {summary['holds']}/{summary['runs']} runs")


def cmd_import_emb(args) -> None:
    cfg = _resolve(args)
    out = _out_dir(args, "import-emb")
    tag, vectors = read_emb(args.infile)
    dest = os.path.join(out, "imported.emb")
    write_emb(dest, tag, vectors.astype(np.float32))
    write_provenance(out, "import-emb", cfg, _inputs_of(args))
    write_json(os.path.join(out, "summary.json"), {
        "modality": tag, "count": int(vectors.shape[0]),
        "dim": int(vectors.shape[1]), "output": "imported.emb",
    })
    print(f"imported {vectors.shape[0]} x {vectors.shape[1]} embeddings ({tag})")


def cmd_replicate(args) -> None:
    cfg = _resolve(args)
    out = _out_dir(args, f"replicate-{args.pipeline}")
    runner = {
        "fig1": run_fig1,
        "fig2": run_fig2,
        "table4": run_table4,
        "grsl": run_grsl,
        "bound": run_bound_sweep,
        "seadoc-protocol": run_seadoc_protocol,
    }[args.pipeline]
    summary = runner(cfg, out)
    write_provenance(out, f"replicate {args.pipeline}", cfg, _inputs_of(args))
    print(f"replicate {args.pipeline} finished; outputs in {out}")
    for key, value in sorted(summary.items()):
        if not isinstance(value, (dict, list)):
            print(f"  {key} = {value}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emblab",
        description="Toy lab for cross-modal embedding geometry, contrastive "
                    "refinement, and generalization-bound experiments.",
        epilog="Config keys:\n" + describe_keys(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "gen-world", help="build a world and export a sample",
        description="JSONL: world_sample.jsonl with fields id,cls,mod,obs,tok.",
    )
    _add_common(p)
    p.set_defaults(fn=cmd_gen_world)

    p = sub.add_parser(
        "pretrain", help="generative pretraining run",
        description="CSV: loss_trace.csv with header step,loss. Writes "
                    "pretrained.lcoc.",
    )
    _add_common(p)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser(
        "cl-train", help="contrastive refinement of a checkpoint",
        description="CSV: loss_trace.csv with header step,loss. Writes "
                    "refined.lcoc (adapter merged) and, for the low-rank "
                    "strategy, adapter.lcoc.",
    )
    _add_common(p)
    p.add_argument("--ckpt", required=True, help="input checkpoint")
    p.add_argument("--triplets", help="optional triplet JSONL (anchor/pos/neg)")
    p.set_defaults(fn=cmd_cl_train)

    p = sub.add_parser(
        "soup", help="average checkpoints",
        description="Writes soup.lcoc, the uniform parameter average.",
    )
    _add_common(p)
    p.add_argument("--ckpt", action="append", required=True,
                   help="checkpoint path (repeat at least twice)")
    p.set_defaults(fn=cmd_soup)

    p = sub.add_parser(
        "analyze", help="geometry metrics on .emb dumps",
        description="CSV: analysis.csv with header metric,modality,n,k,value.",
    )
    _add_common(p)
    p.add_argument("--emb", action="append", required=True,
                   help="embedding dump (repeat for mutual-knn)")
    p.add_argument("--metric", choices=["anisotropy", "mutual-knn"],
                   default="anisotropy")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser(
        "eval", help="metric suite for a checkpoint",
        description="CSV: metrics.csv with header "
                    "metric,dataset,value,n,k,seed. With --queries-emb, "
                    "--docs-emb and --qrels, scores external dumps instead "
                    "of a checkpoint.",
    )
    _add_common(p)
    p.add_argument("--ckpt", help="checkpoint to score on the config world")
    p.add_argument("--queries-emb", help="query embedding dump")
    p.add_argument("--docs-emb", help="document embedding dump")
    p.add_argument("--qrels", help="qrels file: query_id<TAB>doc_id per line")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser(
        "grsl", help="scaling study, or fit an existing points CSV",
        description="CSV: grsl_points.csv with header "
                    "model_id,gen_score,gen_direction,rep_score (also the "
                    "accepted --points input format).",
    )
    _add_common(p)
    p.add_argument("--points", help="CSV: model_id,gen_score,gen_direction,rep_score")
    p.set_defaults(fn=cmd_grsl)

    p = sub.add_parser(
        "bound", help="seeded sweep of the generalization bound",
        description="CSV: bound_runs.csv with header seed,empirical_pop_risk,"
                    "bound,holds,i_p,eps_p,kl,train_risk,lg_per_seq.",
    )
    _add_common(p)
    p.set_defaults(fn=cmd_bound)

    p = sub.add_parser(
        "import-emb", help="validate and re-emit an .emb dump",
        description="Validates the dump format and writes imported.emb.",
    )
    _add_common(p)
    p.add_argument("--in", dest="infile", required=True)
    p.set_defaults(fn=cmd_import_emb)

    p = sub.add_parser(
        "replicate", help="end-to-end experiment pipelines",
        description="CSV per pipeline: fig1_anisotropy.csv "
                    "(seed,modality,pre,post,rel_decrease); fig2_alignment.csv "
                    "(seed,modality,stage,layer,mutual_knn); "
                    "table4_strategies.csv (strategy,metric,dataset,value,n,"
                    "seed); grsl_points.csv (model_id,gen_score,gen_direction,"
                    "rep_score); bound_runs.csv (seed,empirical_pop_risk,bound,"
                    "holds,i_p,eps_p,kl,train_risk,lg_per_seq); "
                    "seadoc_protocol.csv (seed,arm,ndcg@10).",
    )
    _add_common(p)
    p.add_argument("pipeline", choices=_REPLICATES)
    p.set_defaults(fn=cmd_replicate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.fn(args)
    except (CheckpointError, EmbDumpError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
