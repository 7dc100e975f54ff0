import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from embcurate.corpus import (Corpus, CorpusFormatError, ExampleRecord,
                              pack_documents, read_embeddings, read_metadata,
                              unpack_documents, write_embeddings, write_metadata)


class TestEmbeddingsFile:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        x = rng.standard_normal((37, 5)).astype(np.float32)
        path = tmp_path / "x.emb"
        write_embeddings(path, x)
        y = read_embeddings(path)
        assert y.dtype == np.float32
        assert np.array_equal(
            x.view(np.uint32), y.view(np.uint32)
        ), "payload must round-trip bit-for-bit"

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.emb"
        path.write_bytes(b"NOPE" + b"\x00" * 8)
        with pytest.raises(CorpusFormatError, match="malformed header"):
            read_embeddings(path)

    def test_short_header(self, tmp_path):
        path = tmp_path / "x.emb"
        path.write_bytes(b"EMB1\x01")
        with pytest.raises(CorpusFormatError, match="malformed header"):
            read_embeddings(path)

    def test_truncated_payload(self, tmp_path, rng):
        path = tmp_path / "x.emb"
        write_embeddings(path, rng.standard_normal((4, 3)).astype(np.float32))
        data = path.read_bytes()
        path.write_bytes(data[:-5])
        with pytest.raises(CorpusFormatError, match="truncated payload"):
            read_embeddings(path)

    def test_non_finite_entry_names_row(self, tmp_path):
        x = np.zeros((3, 2), dtype=np.float32)
        x[1, 0] = np.nan
        path = tmp_path / "x.emb"
        write_embeddings(path, x)
        with pytest.raises(CorpusFormatError, match="non-finite entry at row 1"):
            read_embeddings(path)

    def test_rejects_1d(self, tmp_path):
        with pytest.raises(CorpusFormatError, match="2-d"):
            write_embeddings(tmp_path / "x.emb", np.zeros(4, dtype=np.float32))


class TestMetadataFile:
    def test_round_trip(self, tmp_path):
        records = [
            ExampleRecord(id=0, source="web", token_count=12,
                          losses={1000: 2.5, 2000: 2.25}),
            ExampleRecord(id=7, source="code", token_count=3,
                          losses={1000: 1.0, 2000: 0.5}),
        ]
        path = tmp_path / "meta.jsonl"
        write_metadata(path, records)
        back = read_metadata(path)
        assert back == records

    def test_losses_optional(self, tmp_path):
        path = tmp_path / "meta.jsonl"
        write_metadata(path, [ExampleRecord(id=0, source="s", token_count=1)])
        assert read_metadata(path)[0].losses == {}

    @pytest.mark.parametrize("line, pattern", [
        ("not json", "row 0: invalid JSON"),
        ('{"id": 0, "token_count": 4}', "missing field 'source'"),
        ('{"id": -1, "source": "s", "token_count": 4}', "negative id"),
        ('{"id": 0, "source": "s", "token_count": 0}', "token_count must be >= 1"),
        ('{"id": 0, "source": "s", "token_count": 4, "losses": {"100": NaN}}',
         "invalid JSON|non-finite loss"),
    ])
    def test_row_validation(self, tmp_path, line, pattern):
        path = tmp_path / "meta.jsonl"
        path.write_text(line + "\n")
        with pytest.raises(CorpusFormatError, match=pattern):
            read_metadata(path)

    def test_duplicate_id_names_row(self, tmp_path):
        path = tmp_path / "meta.jsonl"
        rows = [{"id": 5, "source": "a", "token_count": 1},
                {"id": 5, "source": "b", "token_count": 2}]
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        with pytest.raises(CorpusFormatError, match="row 1: duplicate id 5"):
            read_metadata(path)


class TestCorpus:
    def test_embedding_row_mismatch(self):
        recs = [ExampleRecord(id=i, source="s", token_count=1) for i in range(3)]
        with pytest.raises(CorpusFormatError, match="2 rows for 3 records"):
            Corpus(records=recs, embeddings={"m": np.zeros((2, 4), np.float32)})

    def test_inconsistent_steps(self):
        recs = [
            ExampleRecord(id=0, source="s", token_count=1, losses={100: 1.0}),
            ExampleRecord(id=1, source="s", token_count=1, losses={200: 1.0}),
        ]
        with pytest.raises(CorpusFormatError, match="checkpoint steps"):
            Corpus(records=recs)

    def test_loss_table_and_steps(self):
        recs = [
            ExampleRecord(id=0, source="a", token_count=2, losses={10: 1.0, 20: 3.0}),
            ExampleRecord(id=1, source="b", token_count=5, losses={10: 2.0, 20: 4.0}),
        ]
        corpus = Corpus(records=recs)
        assert corpus.checkpoint_steps == [10, 20]
        assert corpus.loss_table(20).tolist() == [3.0, 4.0]
        assert corpus.sources().tolist() == ["a", "b"]
        assert corpus.token_counts().tolist() == [2, 5]


EOD, PAD = 50_000, 50_001


class TestPacking:
    def test_single_short_doc_pads(self):
        seqs = pack_documents([[7]], seq_len=4, eod_token=EOD, pad_token=PAD)
        assert len(seqs) == 1
        assert seqs[0].tokens.tolist() == [7, EOD, PAD, PAD]
        assert seqs[0].doc_spans == [(0, 1, 0)]

    def test_two_docs_fill_exactly(self):
        seqs = pack_documents([[1], [2, 3]], seq_len=5, eod_token=EOD, pad_token=PAD)
        assert len(seqs) == 1
        assert seqs[0].tokens.tolist() == [1, EOD, 2, 3, EOD]
        assert seqs[0].doc_spans == [(0, 1, 0), (2, 4, 1)]

    def test_long_doc_spills_over(self):
        seqs = pack_documents([[1, 2, 3, 4, 5]], seq_len=3, eod_token=EOD,
                              pad_token=PAD)
        assert [s.tokens.tolist() for s in seqs] == [
            [1, 2, 3], [4, 5, EOD]]
        assert seqs[0].doc_spans == [(0, 3, 0)]
        assert seqs[1].doc_spans == [(0, 2, 0)]

    def test_every_doc_followed_by_one_eod(self):
        docs = [[1, 2], [3], [4, 5, 6, 7]]
        seqs = pack_documents(docs, seq_len=4, eod_token=EOD, pad_token=PAD)
        flat = np.concatenate([s.tokens for s in seqs])
        assert int((flat == EOD).sum()) == len(docs)
        # pads only appear as a suffix of the final sequence
        pad_positions = np.nonzero(flat == PAD)[0]
        if pad_positions.size:
            assert pad_positions[0] >= flat.size - len(seqs[-1].tokens)
            assert np.array_equal(pad_positions,
                                  np.arange(pad_positions[0], flat.size))

    @pytest.mark.parametrize("kwargs, pattern", [
        (dict(seq_len=1), "seq_len must be >= 2"),
        (dict(eod_token=9, pad_token=9), "must differ"),
    ])
    def test_parameter_validation(self, kwargs, pattern):
        base = dict(seq_len=4, eod_token=EOD, pad_token=PAD)
        base.update(kwargs)
        with pytest.raises(ValueError, match=pattern):
            pack_documents([[1]], **base)

    def test_empty_doc_rejected(self):
        with pytest.raises(ValueError, match="document 1 is empty"):
            pack_documents([[1], []], seq_len=4, eod_token=EOD, pad_token=PAD)

    def test_doc_containing_eod_rejected(self):
        with pytest.raises(ValueError, match="contains the eod token"):
            pack_documents([[1, EOD]], seq_len=4, eod_token=EOD, pad_token=PAD)

    def test_doc_containing_pad_rejected(self):
        with pytest.raises(ValueError, match="contains the pad token"):
            pack_documents([[PAD]], seq_len=4, eod_token=EOD, pad_token=PAD)

    @settings(max_examples=200, deadline=None)
    @given(
        docs=st.lists(
            st.lists(st.integers(min_value=0, max_value=100), min_size=1,
                     max_size=17),
            min_size=1, max_size=12),
        seq_len=st.integers(min_value=2, max_value=11),
    )
    def test_round_trip_property(self, docs, seq_len):
        seqs = pack_documents(docs, seq_len, eod_token=EOD, pad_token=PAD)
        assert unpack_documents(seqs, eod_token=EOD, pad_token=PAD) == docs
        for s in seqs:
            assert len(s.tokens) == seq_len
