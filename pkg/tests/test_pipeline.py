import dataclasses
import json
import time

import numpy as np
import pytest

from embcurate.corpus import (read_embeddings, read_metadata, write_embeddings,
                              write_metadata)
from embcurate.pipeline import (DEFAULT_EPSILON_GRID, PipelineConfig,
                                StageError, run_pipeline)
from embcurate.synthetic import SyntheticSpec, generate


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    """A small planted corpus written to disk in the pipeline's input formats."""
    root = tmp_path_factory.mktemp("corpus")
    planted = generate(SyntheticSpec(n=120, d=16, k_true=8, seed=11,
                                     num_sources=3, checkpoint_steps=(1000, 2000)))
    write_metadata(root / "metadata.jsonl", planted.corpus.records)
    write_embeddings(root / "use.emb", planted.embeddings)
    return root


def make_config(corpus_dir, out_dir, **kw):
    base = dict(
        corpus_metadata=str(corpus_dir / "metadata.jsonl"),
        corpus_embeddings={"use": str(corpus_dir / "use.emb")},
        out_dir=str(out_dir),
        reduce_k=8,
        kmeans_sizes=(20, 40),
        epsilon_grid=(0.001, 0.05, 0.5),
    )
    base.update(kw)
    return PipelineConfig(**base)


FULL_TOML = """
[corpus]
metadata = "m.jsonl"

[corpus.embeddings]
use = "use.emb"
bert = "bert.emb"

[output]
dir = "runs/out"

[reduce]
scheme = "rp"
k = 32
fit_sample = 1000
seed = 3

[kmeans]
sizes = [10, 20]
min_factor = 0.5
max_factor = 2.0
max_iters = 7

[rac]
epsilon_grid = [0.01, 0.1]

[curate]
budget_fraction = 0.1
by_count = true
allow_overshoot = true
baseline_seed = 9
"""


class TestConfig:
    def test_from_toml_reads_all_sections(self, tmp_path):
        path = tmp_path / "config.toml"
        path.write_text(FULL_TOML)
        cfg = PipelineConfig.from_toml(path)
        assert cfg.corpus_metadata == "m.jsonl"
        assert cfg.corpus_embeddings == {"use": "use.emb", "bert": "bert.emb"}
        assert cfg.out_dir == "runs/out"
        assert cfg.reduce_scheme == "rp"
        assert cfg.reduce_k == 32
        assert cfg.fit_sample == 1000
        assert cfg.seed == 3
        assert cfg.kmeans_sizes == (10, 20)
        assert cfg.kmeans_min_factor == 0.5
        assert cfg.kmeans_max_factor == 2.0
        assert cfg.kmeans_max_iters == 7
        assert cfg.epsilon_grid == (0.01, 0.1)
        assert cfg.budget_tokens is None
        assert cfg.budget_fraction == 0.1
        assert cfg.curate_by_count is True
        assert cfg.curate_allow_overshoot is True
        assert cfg.baseline_seed == 9

    def test_from_toml_defaults_fill_gaps(self, tmp_path):
        path = tmp_path / "config.toml"
        path.write_text(
            '[corpus]\nmetadata = "m.jsonl"\n'
            '[corpus.embeddings]\nuse = "use.emb"\n'
            '[output]\ndir = "out"\n'
        )
        cfg = PipelineConfig.from_toml(path)
        assert cfg.reduce_scheme == "pca"
        assert cfg.reduce_k == 64
        assert cfg.kmeans_sizes == (25, 50, 100, 150)
        assert cfg.epsilon_grid == DEFAULT_EPSILON_GRID
        assert cfg.budget_fraction == 0.2
        assert cfg.curate_by_count is False

    def test_overrides_beat_file(self, tmp_path):
        path = tmp_path / "config.toml"
        path.write_text(FULL_TOML)
        cfg = PipelineConfig.from_toml(
            path, overrides={"reduce_k": 16, "out_dir": "elsewhere",
                             "kmeans_sizes": (5,)})
        assert cfg.reduce_k == 16
        assert cfg.out_dir == "elsewhere"
        assert cfg.kmeans_sizes == (5,)
        # untouched file values survive
        assert cfg.reduce_scheme == "rp"
        assert cfg.baseline_seed == 9

    def test_resolve_budget(self, tmp_path):
        cfg = make_config(tmp_path, tmp_path / "out", budget_tokens=123)
        assert cfg.resolve_budget(10_000) == 123
        cfg = make_config(tmp_path, tmp_path / "out", budget_fraction=0.25)
        assert cfg.resolve_budget(1000) == 250
        cfg = make_config(tmp_path, tmp_path / "out", budget_fraction=1e-9)
        assert cfg.resolve_budget(1000) == 1  # never drops to zero

    def test_rejects_unknown_scheme(self, tmp_path):
        with pytest.raises(ValueError, match="scheme"):
            make_config(tmp_path, tmp_path / "out", reduce_scheme="umap")

    def test_rejects_empty_embeddings(self, tmp_path):
        with pytest.raises(ValueError, match="embedding"):
            make_config(tmp_path, tmp_path / "out", corpus_embeddings={})


EXPECTED_STAGES = {
    "reduce/use", "cluster-kmeans/use", "cluster-rac/use",
    "metrics", "curate/use", "curate-baseline", "report",
}


@pytest.fixture(scope="module")
def first_run(corpus_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    config = make_config(corpus_dir, out)
    manifest = run_pipeline(config)
    return config, out, manifest


class TestRunPipeline:
    def test_missing_input_rejected_before_compute(self, corpus_dir, tmp_path):
        out = tmp_path / "out"
        config = make_config(corpus_dir, out)
        config.corpus_embeddings = {"use": str(corpus_dir / "absent.emb")}
        with pytest.raises(FileNotFoundError, match="absent.emb"):
            run_pipeline(config)
        assert not out.exists()  # nothing ran, nothing written

    def test_artifact_tree(self, first_run):
        _, out, _ = first_run
        expected = [
            "reduced/use.emb", "reduced/use.red",
            "clusters/use.kmeans20.csv", "clusters/use.kmeans20.meta.json",
            "clusters/use.kmeans40.csv", "clusters/use.kmeans40.meta.json",
            "clusters/use.dnd",
            "metrics/metrics.csv", "metrics/metrics.json",
            "curation/use.plan.txt", "curation/use.plan.json",
            "curation/baseline.plan.txt", "curation/baseline.plan.json",
            "report/vr_vs_size.csv", "report/vr_vs_size.svg",
            "report/vr_vs_step.csv", "report/vr_vs_step.svg",
            "report/purity.csv", "report/purity.svg",
            "manifest.json",
        ]
        for rel in expected:
            assert (out / rel).is_file(), rel
        assert not list(out.glob("*.incomplete"))

    def test_manifest_structure(self, corpus_dir, first_run):
        config, out, manifest = first_run
        assert set(manifest) == {"version", "config", "budget_tokens", "stages"}
        assert set(manifest["stages"]) == EXPECTED_STAGES
        for entry in manifest["stages"].values():
            assert set(entry) == {"key", "params", "inputs", "outputs", "info"}
        # budget echoes resolve_budget over the real token total
        records = read_metadata(corpus_dir / "metadata.jsonl")
        total = sum(r.token_count for r in records)
        assert manifest["budget_tokens"] == config.resolve_budget(total)
        # the config echo is JSON-safe (tuples became lists)
        assert manifest["config"]["kmeans_sizes"] == [20, 40]
        assert manifest["config"]["epsilon_grid"] == [0.001, 0.05, 0.5]
        with open(out / "manifest.json", encoding="utf-8") as fh:
            assert json.load(fh) == manifest

    def test_rerun_skips_stages_and_manifest_is_identical(self, first_run):
        config, out, _ = first_run
        before_manifest = (out / "manifest.json").read_bytes()
        watched = [out / "reduced" / "use.emb",
                   out / "clusters" / "use.kmeans20.csv",
                   out / "curation" / "use.plan.txt"]
        stamps = [p.stat().st_mtime_ns for p in watched]
        time.sleep(0.02)
        run_pipeline(config)
        assert [p.stat().st_mtime_ns for p in watched] == stamps
        assert (out / "manifest.json").read_bytes() == before_manifest

    def test_force_reruns_and_output_is_stable(self, corpus_dir, tmp_path):
        out = tmp_path / "out"
        config = make_config(corpus_dir, out)
        run_pipeline(config)
        before_manifest = (out / "manifest.json").read_bytes()
        reduced = out / "reduced" / "use.emb"
        stamp = reduced.stat().st_mtime_ns
        time.sleep(0.02)
        run_pipeline(config, force=True)
        assert reduced.stat().st_mtime_ns > stamp
        assert (out / "manifest.json").read_bytes() == before_manifest

    def test_param_change_reruns_only_affected_stage(self, corpus_dir, tmp_path):
        out = tmp_path / "out"
        run_pipeline(make_config(corpus_dir, out))
        with open(out / "manifest.json", encoding="utf-8") as fh:
            before = json.load(fh)["stages"]
        reduced = out / "reduced" / "use.emb"
        baseline = out / "curation" / "baseline.plan.txt"
        reduced_stamp = reduced.stat().st_mtime_ns
        baseline_stamp = baseline.stat().st_mtime_ns
        time.sleep(0.02)
        manifest = run_pipeline(make_config(corpus_dir, out, baseline_seed=1))
        assert baseline.stat().st_mtime_ns > baseline_stamp
        assert reduced.stat().st_mtime_ns == reduced_stamp
        assert manifest["stages"]["curate-baseline"]["key"] != before["curate-baseline"]["key"]
        assert manifest["stages"]["reduce/use"]["key"] == before["reduce/use"]["key"]

    def test_cache_keys_on_content_not_mtime(self, corpus_dir, tmp_path):
        src = tmp_path / "corpus"
        src.mkdir()
        for name in ("metadata.jsonl", "use.emb"):
            (src / name).write_bytes((corpus_dir / name).read_bytes())
        out = tmp_path / "out"
        config = make_config(src, out)
        run_pipeline(config)
        reduced = out / "reduced" / "use.emb"
        stamp = reduced.stat().st_mtime_ns
        time.sleep(0.02)
        # rewrite an input with identical bytes: still a cache hit
        (src / "use.emb").write_bytes((src / "use.emb").read_bytes())
        run_pipeline(config)
        assert reduced.stat().st_mtime_ns == stamp

    def test_input_change_invalidates_consumers(self, corpus_dir, tmp_path):
        src = tmp_path / "corpus"
        src.mkdir()
        (src / "use.emb").write_bytes((corpus_dir / "use.emb").read_bytes())
        records = read_metadata(corpus_dir / "metadata.jsonl")
        write_metadata(src / "metadata.jsonl", records)
        out = tmp_path / "out"
        run_pipeline(make_config(src, out))
        reduced = out / "reduced" / "use.emb"
        baseline = out / "curation" / "baseline.plan.txt"
        reduced_stamp = reduced.stat().st_mtime_ns
        baseline_stamp = baseline.stat().st_mtime_ns
        time.sleep(0.02)
        # metadata feeds curation and metrics but not the reduce stage
        bumped = [dataclasses.replace(records[0], token_count=records[0].token_count + 1)]
        write_metadata(src / "metadata.jsonl", bumped + list(records[1:]))
        run_pipeline(make_config(src, out))
        assert baseline.stat().st_mtime_ns > baseline_stamp
        assert reduced.stat().st_mtime_ns == reduced_stamp

    def test_stage_failure_names_stage_and_leaves_marker(self, corpus_dir, tmp_path):
        src = tmp_path / "corpus"
        src.mkdir()
        records = read_metadata(corpus_dir / "metadata.jsonl")
        write_metadata(src / "metadata.jsonl", records)
        emb = read_embeddings(corpus_dir / "use.emb")
        write_embeddings(src / "use.emb", emb[:-1])  # one row short
        out = tmp_path / "out"
        with pytest.raises(StageError, match=r"stage reduce/use: ValueError"):
            run_pipeline(make_config(src, out))
        assert (out / "reduce_use.incomplete").exists()
        assert not (out / "manifest.json").exists()

    def test_no_losses_skips_metrics_and_report(self, corpus_dir, tmp_path):
        src = tmp_path / "corpus"
        src.mkdir()
        records = [dataclasses.replace(r, losses={})
                   for r in read_metadata(corpus_dir / "metadata.jsonl")]
        write_metadata(src / "metadata.jsonl", records)
        (src / "use.emb").write_bytes((corpus_dir / "use.emb").read_bytes())
        out = tmp_path / "out"
        manifest = run_pipeline(make_config(src, out))
        assert set(manifest["stages"]) == EXPECTED_STAGES - {"metrics", "report"}
        assert not (out / "metrics" / "metrics.csv").exists()
        assert (out / "curation" / "use.plan.txt").exists()

    def test_scheme_none_passes_embeddings_through(self, corpus_dir, tmp_path):
        out = tmp_path / "out"
        manifest = run_pipeline(make_config(corpus_dir, out, reduce_scheme="none"))
        original = (corpus_dir / "use.emb").read_bytes()
        assert (out / "reduced" / "use.emb").read_bytes() == original
        assert not (out / "reduced" / "use.red").exists()
        assert len(manifest["stages"]["reduce/use"]["outputs"]) == 1
