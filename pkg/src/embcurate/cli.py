"""Command-line interface.

Subcommands mirror the pipeline stages so each can also run standalone:
synthgen, embed, reduce, cluster-kmeans, cluster-rac, metrics, curate,
report, and pipeline. The pipeline reads a TOML config; every setting can be
overridden on the command line (flag > file > default).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .clustering import read_clustering, write_clustering
from .corpus import (Corpus, read_embeddings, read_metadata, write_embeddings,
                     write_metadata)
from .curation import curate, random_baseline
from .embedders import embed_corpus, pool_activations
from .kmeans import kmeans_sweep
from .metrics import MetricsReport, checkpoint_sweep
from .pipeline import (DEFAULT_EPSILON_BY_MODEL, DEFAULT_EPSILON_GRID,
                       PipelineConfig, run_pipeline)
from .rac import Dendrogram, build_dendrogram, epsilon_sweep
from .reducers import apply_pca, apply_rp, fit_pca, fit_rp, load_reducer, save_reducer
from .report import emit_report
from .synthetic import SyntheticSpec, generate, noise_embeddings


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _write_sidecar(csv_path: Path, provenance: dict) -> None:
    with open(csv_path.with_suffix(".meta.json"), "w", encoding="utf-8") as fh:
        json.dump(provenance, fh, sort_keys=True)
        fh.write("\n")


def _cmd_synthgen(args) -> int:
    out = Path(args.out)
    (out / "embeddings").mkdir(parents=True, exist_ok=True)
    spec = SyntheticSpec(
        n=args.n, d=args.d, k_true=args.k_true, seed=args.seed,
        sigma_between=args.sigma_between, sigma_within=args.sigma_within,
        blob_sigma=args.blob_sigma, center_rank=args.center_rank,
        num_sources=args.num_sources, source_purity=args.source_purity,
        duplicate_fraction=args.duplicate_fraction,
        checkpoint_steps=tuple(args.steps),
        token_range=(args.token_range[0], args.token_range[1]),
    )
    planted = generate(spec)
    write_metadata(out / "metadata.jsonl", planted.corpus.records)
    write_embeddings(out / "embeddings" / "planted.emb", planted.embeddings)
    np.save(out / "planted_labels.npy", planted.labels)
    if args.with_noise:
        write_embeddings(out / "embeddings" / "noise.emb",
                         noise_embeddings(args.n, args.d, args.seed + 1))
    print(f"wrote {args.n} examples to {out}")
    return 0


def _cmd_embed(args) -> int:
    table = read_embeddings(args.table)
    exclude = set(args.exclude_ids) if args.exclude_ids else None
    if args.activations:
        rows = []
        for path in sorted(Path(args.activations).glob("*.emb")):
            rows.append(pool_activations(read_embeddings(path)))
        if not rows:
            raise SystemExit(f"no .emb activation files under {args.activations}")
        out = np.stack(rows)
    else:
        sequences = []
        with open(args.docs, "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    sequences.append(json.loads(line)["tokens"])
        out = embed_corpus(sequences, table, exclude=exclude, threads=args.threads)
    write_embeddings(args.out, out)
    print(f"embedded {out.shape[0]} rows at dim {out.shape[1]} -> {args.out}")
    return 0


def _cmd_reduce(args) -> int:
    x = read_embeddings(args.emb)
    degenerate: list[int] = []
    if args.scheme == "pca":
        if x.shape[0] > args.fit_sample:
            rng = np.random.Generator(np.random.PCG64(args.seed))
            sample = x[np.sort(rng.choice(x.shape[0], args.fit_sample, replace=False))]
        else:
            sample = x
        model = fit_pca(sample, args.k)
        y = apply_pca(model, x, degenerate_rows=degenerate)
    else:
        model = fit_rp(x.shape[1], args.k, args.seed)
        y = apply_rp(model, x, degenerate_rows=degenerate)
    write_embeddings(args.out, y)
    if args.model_out:
        save_reducer(args.model_out, model)
    if degenerate:
        print(f"warning: {len(degenerate)} degenerate rows mapped to e1",
              file=sys.stderr)
    print(f"reduced {x.shape[1]} -> {args.k} dims for {x.shape[0]} rows")
    return 0


def _cmd_apply_reducer(args) -> int:
    x = read_embeddings(args.emb)
    model = load_reducer(args.model)
    from .reducers import PcaModel
    if isinstance(model, PcaModel):
        y = apply_pca(model, x)
    else:
        y = apply_rp(model, x)
    write_embeddings(args.out, y)
    return 0


def _cmd_cluster_kmeans(args) -> int:
    x = read_embeddings(args.emb)
    clusterings = kmeans_sweep(
        x, args.avg_size, min_factor=args.min_factor, max_factor=args.max_factor,
        max_iters=args.max_iters, seed=args.seed,
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for clustering in clusterings:
        if args.model:
            clustering.provenance["model"] = args.model
        size = clustering.provenance["avg_size"]
        path = out_dir / f"{args.model or 'clusters'}.kmeans{size}.csv"
        write_clustering(path, clustering)
        _write_sidecar(path, clustering.provenance)
        print(f"{path}: {clustering.num_clusters} clusters")
    return 0


def _cmd_cluster_rac(args) -> int:
    x = read_embeddings(args.emb)
    epsilon = args.epsilon
    if epsilon is None and not args.epsilon_grid and args.model:
        epsilon = DEFAULT_EPSILON_BY_MODEL.get(args.model)
    if args.dendrogram and Path(args.dendrogram).exists() and not args.rebuild:
        dendro = Dendrogram.load(args.dendrogram)
    else:
        eps_max = max(args.epsilon_grid) if args.epsilon_grid else epsilon
        if eps_max is None:
            raise SystemExit("need --epsilon, --epsilon-grid, or a known --model")
        dendro = build_dendrogram(x, eps_max, threads=args.threads)
        if args.dendrogram:
            dendro.save(args.dendrogram)
    if args.epsilon_grid:
        epsilon, clustering = epsilon_sweep(dendro, args.epsilon_grid,
                                            args.required_clusters)
        print(f"epsilon sweep selected {epsilon}")
    elif epsilon is None:
        raise SystemExit("need --epsilon, --epsilon-grid, or a known --model")
    else:
        clustering = dendro.cut(epsilon)
    if args.model:
        clustering.provenance["model"] = args.model
    write_clustering(args.out, clustering)
    _write_sidecar(Path(args.out), clustering.provenance)
    print(f"{args.out}: {clustering.num_clusters} clusters at epsilon {epsilon}")
    return 0


def _cmd_metrics(args) -> int:
    records = read_metadata(args.metadata)
    corpus = Corpus(records=records)
    tables = {step: corpus.loss_table(step) for step in corpus.checkpoint_steps}
    clusterings = []
    for path in args.clusters:
        path = Path(path)
        sidecar = path.with_suffix(".meta.json")
        if sidecar.exists():
            with open(sidecar, "r", encoding="utf-8") as fh:
                provenance = json.load(fh)
        else:
            provenance = {"model": path.stem}
        _, clustering = read_clustering(path, provenance)
        clusterings.append(clustering)
    report = checkpoint_sweep(clusterings, tables, sources=corpus.sources())
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.to_csv(out_dir / "metrics.csv")
    report.to_json(out_dir / "metrics.json")
    print(f"wrote {len(report.rows)} metric rows to {out_dir}")
    return 0


def _cmd_curate(args) -> int:
    records = read_metadata(args.metadata)
    token_counts = np.array([r.token_count for r in records], dtype=np.int64)
    ids = [r.id for r in records]
    if args.baseline:
        plan = random_baseline(token_counts, args.budget_tokens, args.seed,
                               allow_overshoot=args.allow_overshoot,
                               example_ids=ids)
    else:
        x = read_embeddings(args.emb)
        dendro = Dendrogram.load(args.dendrogram)
        plan = curate(x, token_counts, dendro, args.epsilon_grid,
                      args.budget_tokens, by_count=args.by_count,
                      allow_overshoot=args.allow_overshoot, example_ids=ids)
    plan.save(args.out)
    eps = "baseline" if plan.epsilon is None else f"epsilon {plan.epsilon}"
    print(f"{args.out}: {len(plan.example_ids)} examples, "
          f"{plan.token_total}/{plan.budget_tokens} tokens ({eps})")
    return 0


def _cmd_report(args) -> int:
    report = MetricsReport.from_json(args.metrics)
    written = emit_report(report, args.out_dir)
    print("\n".join(str(p) for p in written))
    return 0


def _cmd_pipeline(args) -> int:
    overrides = {}
    if args.out_dir:
        overrides["out_dir"] = args.out_dir
    for item in args.set or []:
        key, _, value = item.partition("=")
        if not _:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        overrides[key] = json.loads(value) if value and value[0] in "[{-0123456789tf\"" else value
    config = PipelineConfig.from_toml(args.config, overrides)
    manifest = run_pipeline(config, threads=args.threads, force=args.force)
    print(f"pipeline complete: {len(manifest['stages'])} stages in {config.out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embcurate",
        description="Embedding-space clustering, curation, and loss-variance "
                    "evaluation toolkit",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthgen", help="generate a planted synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--d", type=int, default=512)
    p.add_argument("--k-true", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma-between", type=float, default=3.0)
    p.add_argument("--sigma-within", type=float, default=1.0)
    p.add_argument("--blob-sigma", type=float, default=0.02)
    p.add_argument("--center-rank", type=int, default=None)
    p.add_argument("--num-sources", type=int, default=4)
    p.add_argument("--source-purity", type=float, default=1.0)
    p.add_argument("--duplicate-fraction", type=float, default=0.0)
    p.add_argument("--steps", type=_int_list, default=[1000])
    p.add_argument("--token-range", type=_int_list, default=[64, 512])
    p.add_argument("--with-noise", action="store_true")
    p.set_defaults(fn=_cmd_synthgen)

    p = sub.add_parser("embed", help="embed token docs or pooled activations")
    p.add_argument("--table", required=True, help="token embedding table (.emb)")
    p.add_argument("--docs", help="JSONL with an integer 'tokens' list per line")
    p.add_argument("--activations", help="directory of per-sequence .emb files")
    p.add_argument("--exclude-ids", type=_int_list, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_embed)

    p = sub.add_parser("reduce", help="fit and apply a reducer")
    p.add_argument("--emb", required=True)
    p.add_argument("--scheme", choices=("pca", "rp"), default="pca")
    p.add_argument("--k", type=int, default=64)
    p.add_argument("--fit-sample", type=int, default=500_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--model-out", default=None, help="save the reducer (.red)")
    p.set_defaults(fn=_cmd_reduce)

    p = sub.add_parser("apply-reducer", help="apply a saved reducer to embeddings")
    p.add_argument("--emb", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_apply_reducer)

    p = sub.add_parser("cluster-kmeans", help="balanced K-means size sweep")
    p.add_argument("--emb", required=True)
    p.add_argument("--avg-size", type=int, action="append", required=True,
                   help="repeatable; one clustering per size")
    p.add_argument("--min-factor", type=float, default=0.2)
    p.add_argument("--max-factor", type=float, default=5.0)
    p.add_argument("--max-iters", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model", default=None, help="embedding model tag")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=_cmd_cluster_kmeans)

    p = sub.add_parser("cluster-rac", help="threshold clustering via dendrogram")
    p.add_argument("--emb", required=True)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--epsilon-grid", type=_float_list, default=None)
    p.add_argument("--required-clusters", type=int, default=1)
    p.add_argument("--dendrogram", default=None, help="cache path (.dnd)")
    p.add_argument("--rebuild", action="store_true")
    p.add_argument("--model", default=None,
                   help="embedding model tag (supplies the default epsilon)")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_cluster_rac)

    p = sub.add_parser("metrics", help="variance reduction and purity tables")
    p.add_argument("--metadata", required=True)
    p.add_argument("--clusters", nargs="+", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=_cmd_metrics)

    p = sub.add_parser("curate", help="budgeted representative selection")
    p.add_argument("--metadata", required=True)
    p.add_argument("--emb")
    p.add_argument("--dendrogram")
    p.add_argument("--epsilon-grid", type=_float_list,
                   default=list(DEFAULT_EPSILON_GRID))
    p.add_argument("--budget-tokens", type=int, required=True)
    p.add_argument("--by-count", action="store_true",
                   help="fill by cluster count instead of representative tokens")
    p.add_argument("--allow-overshoot", action="store_true")
    p.add_argument("--baseline", action="store_true",
                   help="random-permutation baseline instead of clustering")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_curate)

    p = sub.add_parser("report", help="figure CSVs and SVG plots from metrics")
    p.add_argument("--metrics", required=True, help="metrics.json path")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=_cmd_report)

    p = sub.add_parser("pipeline", help="run every stage from a TOML config")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--force", action="store_true", help="ignore cached stages")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config field, e.g. --set reduce_k=32")
    p.set_defaults(fn=_cmd_pipeline)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
