"""End-to-end pipeline: reduce, cluster, measure, curate, report.

Each stage is a pure disk-to-disk function keyed by a content hash of its
parameters and input files. Re-running a completed pipeline re-executes
nothing and rewrites an identical manifest; changing any input or parameter
re-runs exactly the affected stages. Stage outputs are written under
``out_dir`` with an ``.incomplete`` marker held while a stage runs, so a
crashed run is recognizable.

The manifest deliberately contains no timestamps or thread counts: artifacts
must be byte-identical across repeated runs and across ``--threads``
settings.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

import numpy as np

from . import __version__
from .clustering import read_clustering, write_clustering
from .corpus import Corpus, read_embeddings, read_metadata, write_embeddings
from .curation import curate, random_baseline
from .kmeans import kmeans_sweep
from .metrics import MetricsReport, checkpoint_sweep
from .rac import Dendrogram, build_dendrogram
from .reducers import apply_pca, apply_rp, fit_pca, fit_rp, save_reducer
from .report import emit_report

log = logging.getLogger(__name__)

DEFAULT_EPSILON_GRID = (0.001, 0.003, 0.01, 0.03, 0.1, 0.2, 0.5)
# Single-epsilon defaults by embedding-model tag for one-shot RAC cuts.
DEFAULT_EPSILON_BY_MODEL = {
    "use": 0.2,
    "gecko": 0.2,
    "bert": 0.001,
    "lm_token": 0.001,
    "lm_output": 0.03,
}


class StageError(RuntimeError):
    pass


@dataclass
class PipelineConfig:
    corpus_metadata: str
    corpus_embeddings: dict[str, str]
    out_dir: str
    reduce_scheme: str = "pca"          # pca | rp | none
    reduce_k: int = 64
    fit_sample: int = 500_000
    seed: int = 0
    kmeans_sizes: tuple = (25, 50, 100, 150)
    kmeans_min_factor: float = 0.2
    kmeans_max_factor: float = 5.0
    kmeans_max_iters: int = 25
    epsilon_grid: tuple = DEFAULT_EPSILON_GRID
    budget_tokens: int | None = None
    budget_fraction: float = 0.2
    curate_by_count: bool = False
    curate_allow_overshoot: bool = False
    baseline_seed: int = 0

    def __post_init__(self):
        if self.reduce_scheme not in ("pca", "rp", "none"):
            raise ValueError(f"unknown reduce scheme {self.reduce_scheme!r}")
        if not self.corpus_embeddings:
            raise ValueError("at least one embedding table is required")
        self.kmeans_sizes = tuple(int(s) for s in self.kmeans_sizes)
        self.epsilon_grid = tuple(float(e) for e in self.epsilon_grid)

    @classmethod
    def from_toml(cls, path, overrides=None) -> "PipelineConfig":
        """Load a TOML config; precedence is overrides > file > defaults."""
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
        kwargs = {}
        corpus = raw.get("corpus", {})
        if "metadata" in corpus:
            kwargs["corpus_metadata"] = corpus["metadata"]
        if "embeddings" in corpus:
            kwargs["corpus_embeddings"] = dict(corpus["embeddings"])
        output = raw.get("output", {})
        if "dir" in output:
            kwargs["out_dir"] = output["dir"]
        section_keys = {
            "reduce": {"scheme": "reduce_scheme", "k": "reduce_k",
                       "fit_sample": "fit_sample", "seed": "seed"},
            "kmeans": {"sizes": "kmeans_sizes", "min_factor": "kmeans_min_factor",
                       "max_factor": "kmeans_max_factor",
                       "max_iters": "kmeans_max_iters"},
            "rac": {"epsilon_grid": "epsilon_grid"},
            "curate": {"budget_tokens": "budget_tokens",
                       "budget_fraction": "budget_fraction",
                       "by_count": "curate_by_count",
                       "allow_overshoot": "curate_allow_overshoot",
                       "baseline_seed": "baseline_seed"},
        }
        for section, keys in section_keys.items():
            for src, dst in keys.items():
                if src in raw.get(section, {}):
                    kwargs[dst] = raw[section][src]
        for key, value in (overrides or {}).items():
            kwargs[key] = value
        return cls(**kwargs)

    def resolve_budget(self, total_tokens: int) -> int:
        if self.budget_tokens is not None:
            return int(self.budget_tokens)
        return max(1, int(total_tokens * self.budget_fraction))


def _digest_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _digest_params(params) -> str:
    blob = json.dumps(params, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


class _Runner:
    def __init__(self, out_dir: Path, previous: dict, force: bool):
        self.out_dir = out_dir
        self.previous = previous.get("stages", {})
        self.force = force
        self.stages: dict[str, dict] = {}

    def run(self, name: str, params: dict, inputs: list, outputs: list, fn):
        """Execute (or skip) one stage; fn may return an info dict."""
        input_digests = {str(p): _digest_file(p) for p in sorted(str(x) for x in inputs)}
        key = _digest_params({
            "version": __version__,
            "params": params,
            "inputs": input_digests,
        })
        outputs = [Path(p) for p in outputs]
        old = self.previous.get(name)
        if (not self.force and old and old.get("key") == key
                and all(p.exists() for p in outputs)
                and {str(p): _digest_file(p) for p in map(str, outputs)} == old.get("outputs")):
            log.info("stage %s: cached, skipping", name)
            self.stages[name] = old
            return old.get("info", {})

        marker = self.out_dir / (name.replace("/", "_") + ".incomplete")
        marker.parent.mkdir(parents=True, exist_ok=True)
        marker.touch()
        try:
            info = fn() or {}
        except Exception as exc:
            raise StageError(f"stage {name}: {type(exc).__name__}: {exc}") from exc
        entry = {
            "key": key,
            "params": params,
            "inputs": input_digests,
            "outputs": {str(p): _digest_file(p) for p in outputs},
            "info": info,
        }
        marker.unlink()
        self.stages[name] = entry
        return info


def run_pipeline(config: PipelineConfig, threads=None, force: bool = False) -> dict:
    # Validate every referenced input before any compute starts.
    referenced = [Path(config.corpus_metadata)]
    referenced += [Path(p) for _, p in sorted(config.corpus_embeddings.items())]
    missing = [str(p) for p in referenced if not p.is_file()]
    if missing:
        raise FileNotFoundError("missing input file(s): " + ", ".join(missing))

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.json"
    previous = {}
    if manifest_path.exists():
        with open(manifest_path, "r", encoding="utf-8") as fh:
            previous = json.load(fh)
    runner = _Runner(out_dir, previous, force)

    meta_path = Path(config.corpus_metadata)
    records = read_metadata(meta_path)
    token_counts = np.array([r.token_count for r in records], dtype=np.int64)
    budget = config.resolve_budget(int(token_counts.sum()))

    for sub in ("reduced", "clusters", "metrics", "curation", "report"):
        (out_dir / sub).mkdir(exist_ok=True)

    reduced_paths: dict[str, Path] = {}
    for model, emb_path in sorted(config.corpus_embeddings.items()):
        emb_path = Path(emb_path)
        reduced = out_dir / "reduced" / f"{model}.emb"
        reducer_file = out_dir / "reduced" / f"{model}.red"
        reduced_paths[model] = reduced

        def reduce_stage(emb_path=emb_path, reduced=reduced,
                         reducer_file=reducer_file):
            x = read_embeddings(emb_path)
            if len(records) != x.shape[0]:
                raise ValueError(
                    f"{emb_path} has {x.shape[0]} rows for {len(records)} records"
                )
            degenerate: list[int] = []
            if config.reduce_scheme == "none":
                write_embeddings(reduced, x)
                return {"scheme": "none", "degenerate_rows": 0}
            if config.reduce_scheme == "pca":
                if x.shape[0] > config.fit_sample:
                    rng = np.random.Generator(np.random.PCG64(config.seed))
                    rows = np.sort(rng.choice(x.shape[0], config.fit_sample,
                                              replace=False))
                    sample = x[rows]
                else:
                    sample = x
                model_obj = fit_pca(sample, config.reduce_k)
                y = apply_pca(model_obj, x, degenerate_rows=degenerate)
            else:
                model_obj = fit_rp(x.shape[1], config.reduce_k, config.seed)
                y = apply_rp(model_obj, x, degenerate_rows=degenerate)
            save_reducer(reducer_file, model_obj)
            write_embeddings(reduced, y)
            return {"scheme": config.reduce_scheme,
                    "degenerate_rows": len(degenerate),
                    "first_degenerate": degenerate[:8]}

        outputs = [reduced] if config.reduce_scheme == "none" else [reduced, reducer_file]
        runner.run(
            f"reduce/{model}",
            {"scheme": config.reduce_scheme, "k": config.reduce_k,
             "fit_sample": config.fit_sample, "seed": config.seed, "model": model},
            [emb_path],
            outputs,
            reduce_stage,
        )

    cluster_csvs: dict[str, list[Path]] = {}
    dendro_paths: dict[str, Path] = {}
    for model in sorted(reduced_paths):
        reduced = reduced_paths[model]
        csvs = [out_dir / "clusters" / f"{model}.kmeans{size}.csv"
                for size in config.kmeans_sizes]
        cluster_csvs[model] = csvs

        def kmeans_stage(model=model, reduced=reduced, csvs=csvs):
            x = read_embeddings(reduced)
            clusterings = kmeans_sweep(
                x, config.kmeans_sizes,
                min_factor=config.kmeans_min_factor,
                max_factor=config.kmeans_max_factor,
                max_iters=config.kmeans_max_iters,
                seed=config.seed,
            )
            for clustering, path in zip(clusterings, csvs):
                clustering.provenance["model"] = model
                write_clustering(path, clustering)
                with open(path.with_suffix(".meta.json"), "w", encoding="utf-8") as fh:
                    json.dump(clustering.provenance, fh, sort_keys=True)
                    fh.write("\n")
            return {"num_clusters": [c.num_clusters for c in clusterings]}

        runner.run(
            f"cluster-kmeans/{model}",
            {"sizes": list(config.kmeans_sizes),
             "min_factor": config.kmeans_min_factor,
             "max_factor": config.kmeans_max_factor,
             "max_iters": config.kmeans_max_iters, "seed": config.seed},
            [reduced],
            csvs + [p.with_suffix(".meta.json") for p in csvs],
            kmeans_stage,
        )

        dnd = out_dir / "clusters" / f"{model}.dnd"
        dendro_paths[model] = dnd

        def rac_stage(reduced=reduced, dnd=dnd):
            x = read_embeddings(reduced)
            dendro = build_dendrogram(x, max(config.epsilon_grid), threads=threads)
            dendro.save(dnd)
            return {"merges": int(dendro.merges.shape[0])}

        runner.run(
            f"cluster-rac/{model}",
            {"epsilon_max": max(config.epsilon_grid)},
            [reduced],
            [dnd],
            rac_stage,
        )

    metrics_csv = out_dir / "metrics" / "metrics.csv"
    metrics_json = out_dir / "metrics" / "metrics.json"
    all_csvs = [p for model in sorted(cluster_csvs) for p in cluster_csvs[model]]
    has_losses = any(rec.losses for rec in records)

    def metrics_stage():
        corpus = Corpus(records=records)
        tables = {step: corpus.loss_table(step) for step in corpus.checkpoint_steps}
        clusterings = []
        for path in all_csvs:
            with open(path.with_suffix(".meta.json"), "r", encoding="utf-8") as fh:
                provenance = json.load(fh)
            _, clustering = read_clustering(path, provenance)
            clusterings.append(clustering)
        report = checkpoint_sweep(clusterings, tables, sources=corpus.sources())
        report.to_csv(metrics_csv)
        report.to_json(metrics_json)
        return {"rows": len(report.rows)}

    if has_losses:
        runner.run(
            "metrics",
            {},
            [meta_path] + all_csvs + [p.with_suffix(".meta.json") for p in all_csvs],
            [metrics_csv, metrics_json],
            metrics_stage,
        )
    else:
        log.info("no per-example losses in metadata; skipping metrics and report")

    for model in sorted(reduced_paths):
        plan_path = out_dir / "curation" / f"{model}.plan.txt"

        def curate_stage(model=model, plan_path=plan_path):
            x = read_embeddings(reduced_paths[model])
            dendro = Dendrogram.load(dendro_paths[model])
            plan = curate(
                x, token_counts, dendro, config.epsilon_grid, budget,
                by_count=config.curate_by_count,
                allow_overshoot=config.curate_allow_overshoot,
            )
            plan.save(plan_path)
            return {"epsilon": plan.epsilon, "examples": len(plan.example_ids),
                    "token_total": plan.token_total}

        runner.run(
            f"curate/{model}",
            {"grid": list(config.epsilon_grid), "budget": budget,
             "by_count": config.curate_by_count,
             "allow_overshoot": config.curate_allow_overshoot},
            [reduced_paths[model], dendro_paths[model], meta_path],
            [plan_path, plan_path.with_suffix(".json")],
            curate_stage,
        )

    baseline_path = out_dir / "curation" / "baseline.plan.txt"

    def baseline_stage():
        plan = random_baseline(token_counts, budget, config.baseline_seed,
                               allow_overshoot=config.curate_allow_overshoot)
        plan.save(baseline_path)
        return {"examples": len(plan.example_ids), "token_total": plan.token_total}

    runner.run(
        "curate-baseline",
        {"budget": budget, "seed": config.baseline_seed,
         "allow_overshoot": config.curate_allow_overshoot},
        [meta_path],
        [baseline_path, baseline_path.with_suffix(".json")],
        baseline_stage,
    )

    report_dir = out_dir / "report"

    def report_stage():
        report = MetricsReport.from_json(metrics_json)
        written = emit_report(report, report_dir)
        return {"files": [p.name for p in written]}

    if has_losses:
        report_outputs = [report_dir / f"{name}.{ext}"
                          for name in ("vr_vs_size", "vr_vs_step", "purity")
                          for ext in ("csv", "svg")]
        runner.run(
            "report",
            {},
            [metrics_json],
            report_outputs,
            report_stage,
        )

    manifest = {
        "version": __version__,
        "config": _config_echo(config),
        "budget_tokens": budget,
        "stages": runner.stages,
    }
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _config_echo(config: PipelineConfig) -> dict:
    echo = asdict(config)
    echo["kmeans_sizes"] = list(config.kmeans_sizes)
    echo["epsilon_grid"] = list(config.epsilon_grid)
    return echo
