"""Tests for byte tokenization, corpus ingestion, and batching."""

import numpy as np
import pytest

from conceptlm import data


class TestTokenizeBytes:
    def test_ascii_values(self):
        np.testing.assert_array_equal(data.tokenize_bytes("AB"), [65, 66])

    def test_empty(self):
        assert data.tokenize_bytes("").size == 0

    @pytest.mark.parametrize(
        "text", ["hello world", "ünïcödé", "", "\x00\xff mixed \n bytes"]
    )
    def test_round_trip(self, text):
        raw = text.encode("utf-8")
        assert data.detokenize(data.tokenize_bytes(raw)) == raw

    def test_arbitrary_bytes_round_trip(self):
        rng = np.random.default_rng(0)
        raw = bytes(rng.integers(0, 256, size=500, dtype=np.uint8))
        assert data.detokenize(data.tokenize_bytes(raw)) == raw


class TestCorpus:
    def test_ingestion_deterministic(self, tmp_path):
        f1 = tmp_path / "a.txt"
        f2 = tmp_path / "b.txt"
        f1.write_bytes(b"first file")
        f2.write_bytes(b"second file")
        c1 = data.load_corpus([f1, f2])
        c2 = data.load_corpus([f1, f2])
        assert c1.source_digest == c2.source_digest
        np.testing.assert_array_equal(c1.token_ids, c2.token_ids)
        assert c1.vocab_size == 256

    def test_all_ids_below_vocab(self, tmp_path):
        f = tmp_path / "a.bin"
        f.write_bytes(bytes(range(256)))
        corpus = data.load_corpus([f])
        assert corpus.token_ids.max() < corpus.vocab_size

    def test_manifest(self, tmp_path):
        f = tmp_path / "a.txt"
        f.write_bytes(b"x" * 100)
        corpus = data.load_corpus([f])
        out = tmp_path / "manifest.txt"
        data.write_manifest(out, corpus, [f])
        text = out.read_text()
        assert corpus.source_digest in text
        assert "vocab_size = 256" in text


class TestBuildBatches:
    def test_window_count(self):
        corpus = data.corpus_from_bytes(bytes(range(9)))
        batches = list(data.build_batches(corpus, batch_size=1, seq_len=4, chunk_size=4, seed=0))
        assert len(batches) == 1  # floor(9 / 5) windows
        assert batches[0].inputs.shape == (1, 4)

    def test_same_seed_same_order(self):
        corpus = data.corpus_from_bytes(bytes(range(200)) * 3)
        a = [b.inputs for b in data.build_batches(corpus, 2, 8, 4, seed=7)]
        b = [b.inputs for b in data.build_batches(corpus, 2, 8, 4, seed=7)]
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_different_seed_different_order(self):
        corpus = data.corpus_from_bytes(np.arange(600, dtype=np.uint8).tobytes())
        a = np.concatenate([b.inputs for b in data.build_batches(corpus, 2, 8, 4, seed=0)])
        b = np.concatenate([b.inputs for b in data.build_batches(corpus, 2, 8, 4, seed=1)])
        assert not np.array_equal(a, b)

    def test_divisibility_error(self):
        corpus = data.corpus_from_bytes(bytes(100))
        with pytest.raises(ValueError, match="multiple of chunk size"):
            list(data.build_batches(corpus, 1, 6, 4, seed=0))

    def test_too_small_error(self):
        corpus = data.corpus_from_bytes(bytes(4))
        with pytest.raises(ValueError, match="too small"):
            list(data.build_batches(corpus, 1, 4, 4, seed=0))

    def test_windows_do_not_overlap(self):
        # windows tile the corpus with stride T+1; recover window starts from
        # their first id and check pairwise disjointness
        ids = np.arange(250, dtype=np.uint8).tobytes()
        corpus = data.corpus_from_bytes(ids)
        seq_len = 4
        starts = []
        for batch in data.build_batches(corpus, 1, seq_len, 4, seed=3):
            starts.append(int(batch.inputs[0, 0]))
        starts = sorted(starts)
        for a, b in zip(starts, starts[1:]):
            assert b - a >= seq_len + 1

    def test_shuffle_permutes_multiset(self):
        corpus = data.corpus_from_bytes(bytes(range(251)))
        def window_set(seed):
            rows = np.concatenate(
                [b.inputs for b in data.build_batches(corpus, 1, 4, 4, seed=seed)]
            )
            return sorted(map(tuple, rows.tolist()))
        assert window_set(0) == window_set(99)


class TestBatchForStep:
    def test_matches_epoch_zero_stream(self):
        corpus = data.corpus_from_bytes(bytes(range(256)) * 4)
        stream = list(data.build_batches(corpus, 2, 8, 4, seed=5))
        for step in range(len(stream)):
            lookup = data.batch_for_step(corpus, 2, 8, 4, seed=5, step=step)
            np.testing.assert_array_equal(lookup.inputs, stream[step].inputs)

    def test_epochs_reshuffle(self):
        corpus = data.corpus_from_bytes(bytes(range(256)) * 4)
        n = len(list(data.build_batches(corpus, 2, 8, 4, seed=5)))
        first = data.batch_for_step(corpus, 2, 8, 4, seed=5, step=0)
        later = data.batch_for_step(corpus, 2, 8, 4, seed=5, step=n)
        assert first.inputs.shape == later.inputs.shape
        assert not np.array_equal(first.inputs, later.inputs)


class TestEvalBatches:
    def test_partial_final_batch(self):
        corpus = data.corpus_from_bytes(bytes(5 * 5 + 2))
        batches = list(data.eval_batches(corpus, batch_size=2, seq_len=4))
        sizes = [b.shape[0] for b in batches]
        assert sizes == [2, 2, 1]
