import numpy as np
import pytest

from embcurate.corpus import Corpus
from embcurate.metrics import variance_reduction
from embcurate.clustering import Clustering
from embcurate.synthetic import (PlantedCorpus, SyntheticSpec,
                                 expected_variance_reduction, generate,
                                 noise_embeddings, oracle_complete_linkage,
                                 oracle_pca, oracle_variance_reduction,
                                 random_clustering)


class TestGenerator:
    def test_same_seed_bit_identical(self):
        spec = SyntheticSpec(n=200, d=16, k_true=10, seed=7,
                             duplicate_fraction=0.05)
        a, b = generate(spec), generate(spec)
        assert np.array_equal(a.embeddings.view(np.uint32),
                              b.embeddings.view(np.uint32))
        assert a.corpus.records == b.corpus.records
        assert np.array_equal(a.labels, b.labels)
        assert a.duplicate_pairs == b.duplicate_pairs

    def test_different_seeds_differ(self):
        a = generate(SyntheticSpec(n=100, d=8, k_true=5, seed=1))
        b = generate(SyntheticSpec(n=100, d=8, k_true=5, seed=2))
        assert not np.array_equal(a.embeddings, b.embeddings)

    def test_round_trips_through_corpus_files(self, tmp_path):
        from embcurate.corpus import (read_embeddings, read_metadata,
                                      write_embeddings, write_metadata)
        planted = generate(SyntheticSpec(n=50, d=8, k_true=5, seed=3,
                                         checkpoint_steps=(100, 200)))
        write_metadata(tmp_path / "m.jsonl", planted.corpus.records)
        write_embeddings(tmp_path / "e.emb", planted.embeddings)
        records = read_metadata(tmp_path / "m.jsonl")
        emb = read_embeddings(tmp_path / "e.emb")
        assert records == planted.corpus.records
        assert np.array_equal(emb, planted.embeddings)
        Corpus(records=records, embeddings={"planted": emb})  # invariants hold

    def test_duplicate_rows_exact(self):
        spec = SyntheticSpec(n=1000, d=8, k_true=50, seed=4,
                             duplicate_fraction=0.1)
        planted = generate(spec)
        assert len(planted.duplicate_pairs) == 100
        recs = planted.corpus.records
        for dup, orig in planted.duplicate_pairs:
            assert dup >= 900 > orig
            assert np.array_equal(planted.embeddings[dup],
                                  planted.embeddings[orig])
            assert planted.labels[dup] == planted.labels[orig]
            assert recs[dup].source == recs[orig].source
            assert recs[dup].token_count == recs[orig].token_count
            assert recs[dup].losses == recs[orig].losses

    def test_zero_within_noise_gives_constant_cluster_losses(self):
        spec = SyntheticSpec(n=60, d=8, k_true=6, seed=5, sigma_within=0.0)
        planted = generate(spec)
        losses = planted.corpus.loss_table(1000)
        for c in range(6):
            vals = losses[planted.labels == c]
            assert np.ptp(vals) == 0.0

    def test_sources_follow_purity(self):
        pure = generate(SyntheticSpec(n=400, d=8, k_true=8, seed=6,
                                      source_purity=1.0, num_sources=4))
        src = pure.corpus.sources()
        for c in range(8):
            assert len(set(src[pure.labels == c])) == 1

    def test_token_range_respected(self):
        planted = generate(SyntheticSpec(n=300, d=4, k_true=10, seed=7,
                                         token_range=(32, 64)))
        counts = planted.corpus.token_counts()
        assert counts.min() >= 32 and counts.max() <= 64

    def test_embeddings_unit_norm(self):
        planted = generate(SyntheticSpec(n=100, d=16, k_true=4, seed=8))
        norms = np.linalg.norm(planted.embeddings, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-5)

    def test_center_rank_limits_span(self):
        planted = generate(SyntheticSpec(n=300, d=64, k_true=40, seed=9,
                                         center_rank=5, blob_sigma=0.0,
                                         normalize=False))
        rank = np.linalg.matrix_rank(planted.embeddings.astype(np.float64),
                                     tol=1e-6)
        assert rank <= 5

    def test_spec_validation(self):
        with pytest.raises(ValueError, match="k_true"):
            SyntheticSpec(n=10, d=4, k_true=11)
        with pytest.raises(ValueError, match="duplicate_fraction"):
            SyntheticSpec(n=10, d=4, k_true=2, duplicate_fraction=1.0)
        with pytest.raises(ValueError, match="center_rank"):
            SyntheticSpec(n=10, d=4, k_true=2, center_rank=5)
        with pytest.raises(ValueError, match="checkpoint"):
            SyntheticSpec(n=10, d=4, k_true=2, checkpoint_steps=())

    def test_expected_vr_matches_planted_recovery(self):
        spec = SyntheticSpec(n=4000, d=8, k_true=200, seed=10,
                             sigma_between=3.0, sigma_within=1.0)
        planted = generate(spec)
        truth = Clustering.from_labels(planted.labels)
        vr = variance_reduction(truth, planted.corpus.loss_table(1000))
        want = expected_variance_reduction(spec)
        assert want == pytest.approx((9 + 1) / (1 * 19 / 20), rel=1e-12)
        assert vr == pytest.approx(want, rel=0.25)


class TestHelpers:
    def test_noise_embeddings_unit_and_seeded(self):
        a = noise_embeddings(50, 8, seed=1)
        b = noise_embeddings(50, 8, seed=1)
        assert np.array_equal(a, b)
        np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0, atol=1e-6)

    def test_random_clustering_provenance(self):
        c = random_clustering(100, 10, seed=3)
        assert c.provenance["algorithm"] == "random"
        assert c.provenance["avg_size"] == 10.0
        assert len(c) == 100


class TestOracles:
    def test_oracle_vr_hand_example(self):
        assert oracle_variance_reduction([0, 0, 1, 1], [0, 1, 10, 11]) == 101.0

    def test_oracle_linkage_epsilon_zero_singletons(self, rng):
        x = rng.standard_normal((20, 3))
        labels = oracle_complete_linkage(x, 0.0)
        assert len(set(labels.tolist())) == 20

    def test_oracle_pca_rank_one(self, rng):
        u = rng.standard_normal(6)
        x = np.outer(rng.standard_normal(40), u)
        _, _, components, ratio = oracle_pca(x, 1)
        assert components.shape == (1, 6)
        assert ratio[0] == pytest.approx(1.0, abs=1e-9)
