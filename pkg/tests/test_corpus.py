import math
from collections import Counter

import numpy as np
import pytest

from cbmi_nmt import corpus as C
from cbmi_nmt.corpus import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    UNK_ID,
    BmiTable,
    CorpusError,
    FrequencyTable,
    SentencePair,
    Vocabulary,
    bmi_value,
    build_cooccurrence,
    make_batches,
)


class TestVocabulary:
    def test_ordering_count_desc_then_lexicographic(self):
        vocab = Vocabulary.build(["a a b"], min_count=1)
        assert vocab.encode(["a"]) == [4]
        assert vocab.encode(["b"]) == [5]

    def test_min_count_threshold_maps_to_unk(self):
        vocab = Vocabulary.build(["a a b"], min_count=2)
        assert vocab.encode(["b"]) == [UNK_ID]
        assert vocab.encode(["a"]) == [4]

    def test_deterministic_files_byte_for_byte(self, tmp_path):
        lines = ["c a b b", "a c c d"]
        p1, p2 = tmp_path / "v1.txt", tmp_path / "v2.txt"
        Vocabulary.build(lines, 1).save(p1)
        Vocabulary.build(lines, 1).save(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_empty_corpus_raises(self):
        with pytest.raises(CorpusError, match="empty"):
            Vocabulary.build([], 1)

    def test_bijection_roundtrip(self):
        vocab = Vocabulary.build(["x y z z"], 1)
        for i in range(len(vocab)):
            assert vocab.encode([vocab.token(i)]) == [i]

    def test_save_load_roundtrip(self, tmp_path):
        vocab = Vocabulary.build(["a a b c"], min_count=2)
        path = tmp_path / "v.txt"
        vocab.save(path)
        loaded = Vocabulary.load(path)
        assert loaded.counts == vocab.counts
        assert loaded.encode(["a", "b"]) == vocab.encode(["a", "b"])

    def test_reserved_ids_fixed(self):
        vocab = Vocabulary.build(["a"], 1)
        assert vocab.decode([PAD_ID, BOS_ID, EOS_ID, UNK_ID]) == [
            "<pad>",
            "<s>",
            "</s>",
            "<unk>",
        ]

    def test_shared_vocabulary(self):
        src, tgt = C.build_vocabularies(["a b"], ["b c"], share=True)
        assert src is tgt
        assert src.encode(["a", "b", "c"]) != [UNK_ID] * 3


def test_tokenize_detokenize_roundtrip():
    line = "the quick brown fox"
    assert C.detokenize(C.tokenize(line)) == line


class TestFrequencyTable:
    def test_streaming_equals_brute_recount(self, rng):
        vocab_size = 9
        pairs = [
            SentencePair(
                list(rng.integers(4, vocab_size, size=rng.integers(1, 8))),
                list(rng.integers(4, vocab_size, size=rng.integers(1, 8))),
            )
            for _ in range(50)
        ]
        table = FrequencyTable.from_pairs(pairs, "tgt", vocab_size)
        brute = Counter()
        for p in pairs:
            brute.update(p.tgt)
        for tok in range(vocab_size):
            assert table.count(tok) == brute.get(tok, 0)
        assert table.total == sum(brute.values())

    def test_negative_counts_rejected(self):
        with pytest.raises(CorpusError):
            FrequencyTable(np.array([1, -2]))


def brute_force_bmi(pairs, src_ids, tgt_id):
    """Independent oracle: dumb counting loops over the corpus, applying the
    documented conventions (relative frequencies smoothed by add-one on count
    and total; joint = per-pair presence; positions summed)."""
    num_pairs = len(pairs)
    src_tokens = [t for p in pairs for t in p.src]
    tgt_tokens = [t for p in pairs for t in p.tgt]
    value = 0.0
    for s in src_ids:
        cooc = sum(1 for p in pairs if s in p.src and tgt_id in p.tgt)
        f_joint = (cooc + 1) / (num_pairs + 1)
        f_s = (src_tokens.count(s) + 1) / (len(src_tokens) + 1)
        f_t = (tgt_tokens.count(tgt_id) + 1) / (len(tgt_tokens) + 1)
        value += math.log(f_joint / (f_s * f_t))
    return value


def _stats(pairs, vocab_size):
    src_freq = FrequencyTable.from_pairs(pairs, "src", vocab_size)
    tgt_freq = FrequencyTable.from_pairs(pairs, "tgt", vocab_size)
    return src_freq, tgt_freq, build_cooccurrence(pairs)


class TestBmi:
    def test_toy_two_pair_corpus_matches_oracle(self):
        pairs = [SentencePair([4], [5]), SentencePair([4], [6])]
        src_freq, tgt_freq, cooc = _stats(pairs, 7)
        got = bmi_value([4], 5, src_freq, tgt_freq, cooc, len(pairs))
        assert got == pytest.approx(brute_force_bmi(pairs, [4], 5), abs=1e-12)

    def test_degenerate_sole_token_corpus_is_zero(self):
        pairs = [SentencePair([4], [5])]
        src_freq, tgt_freq, cooc = _stats(pairs, 6)
        assert bmi_value([4], 5, src_freq, tgt_freq, cooc, 1) == pytest.approx(0.0, abs=1e-12)

    def test_repeated_source_positions_contribute_repeatedly(self):
        pairs = [SentencePair([4, 4], [5]), SentencePair([6], [7])]
        src_freq, tgt_freq, cooc = _stats(pairs, 8)
        single = bmi_value([4], 5, src_freq, tgt_freq, cooc, 2)
        double = bmi_value([4, 4], 5, src_freq, tgt_freq, cooc, 2)
        assert double == pytest.approx(2 * single, rel=1e-12)

    def test_table_matches_bruteforce_on_random_corpus(self, rng):
        vocab_size = 10
        pairs = [
            SentencePair(
                list(map(int, rng.integers(4, vocab_size, size=rng.integers(1, 6)))),
                list(map(int, rng.integers(4, vocab_size, size=rng.integers(1, 6)))),
            )
            for _ in range(60)
        ]
        src_freq, tgt_freq, cooc = _stats(pairs, vocab_size)
        table = BmiTable.build(pairs, src_freq, tgt_freq, vocab_size)
        for tok in range(vocab_size):
            containing = [p for p in pairs if tok in p.tgt]
            if not containing:
                assert table.value(tok) == 0.0
                continue
            expected = np.mean([brute_force_bmi(pairs, p.src, tok) for p in containing])
            assert table.value(tok) == pytest.approx(expected, abs=1e-9)

    def test_identical_token_in_two_sentences_same_table_value(self):
        pairs = [SentencePair([4, 5], [6]), SentencePair([7], [6, 8])]
        src_freq, tgt_freq, cooc = _stats(pairs, 9)
        table = BmiTable.build(pairs, src_freq, tgt_freq, 9)
        # one table entry regardless of which sentence the token appears in
        assert table.value(6) == table.value(6)
        per_pair = [
            bmi_value(pairs[0].src, 6, src_freq, tgt_freq, cooc, 2),
            bmi_value(pairs[1].src, 6, src_freq, tgt_freq, cooc, 2),
        ]
        assert table.value(6) == pytest.approx(np.mean(per_pair), abs=1e-12)

    def test_save_load_roundtrip(self, tmp_path, rng):
        values = rng.normal(size=6)
        table = BmiTable(values)
        path = tmp_path / "bmi.txt"
        table.save(path)
        loaded = BmiTable.load(path)
        np.testing.assert_array_equal(loaded.values, values)
        assert loaded.header.startswith("#")


class TestBatches:
    def _pairs(self, lengths):
        return [SentencePair(list(range(4, 4 + n)), list(range(4, 4 + n))) for n in lengths]

    def test_packing_arithmetic(self):
        batches = make_batches(self._pairs([2, 2, 2]), token_budget=4, seed=0)
        assert len(batches) == 2
        assert sorted(b.n_sentences for b in batches) == [1, 2]

    def test_same_seed_identical_sequence(self):
        pairs = self._pairs([3, 1, 4, 2, 2, 5, 1])
        a = make_batches(pairs, 8, seed=9)
        b = make_batches(pairs, 8, seed=9)
        assert [x.indices for x in a] == [y.indices for y in b]
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.src, y.src)

    def test_union_is_input_multiset(self, rng):
        pairs = [
            SentencePair(
                list(map(int, rng.integers(4, 9, size=rng.integers(1, 6)))),
                list(map(int, rng.integers(4, 9, size=rng.integers(1, 6)))),
            )
            for _ in range(33)
        ]
        batches = make_batches(pairs, 16, seed=3)
        seen = sorted(i for b in batches for i in b.indices)
        assert seen == list(range(33))
        for batch in batches:
            for row, idx in enumerate(batch.indices):
                src = [t for t in batch.src[row] if t != PAD_ID]
                assert src[:-1] == pairs[idx].src and src[-1] == EOS_ID
                out = [t for t in batch.tgt_out[row] if t != PAD_ID]
                assert out[:-1] == pairs[idx].tgt and out[-1] == EOS_ID

    def test_budget_respected(self, rng):
        pairs = self._pairs(list(rng.integers(1, 7, size=40)))
        for batch in make_batches(pairs, 12, seed=1):
            raw_max = max(pairs[i].length for i in batch.indices)
            assert batch.n_sentences * raw_max <= 12

    def test_oversize_pair_names_pair(self):
        with pytest.raises(CorpusError, match="#1"):
            make_batches(self._pairs([2, 9, 2]), token_budget=4, seed=0)

    def test_masks_mark_non_pad(self):
        batches = make_batches(self._pairs([1, 3]), 100, seed=0)
        batch = batches[0]
        np.testing.assert_array_equal(batch.src_mask, batch.src != PAD_ID)
        np.testing.assert_array_equal(batch.tgt_mask, batch.tgt_out != PAD_ID)
        assert batch.n_tokens == (1 + 1) + (3 + 1)  # tokens plus </s> each

    def test_teacher_forced_shift(self):
        batch = make_batches([SentencePair([5, 6], [7, 8])], 10, seed=0)[0]
        assert batch.tgt_in[0].tolist()[:3] == [BOS_ID, 7, 8]
        assert batch.tgt_out[0].tolist()[:3] == [7, 8, EOS_ID]


class TestCorpusLoading:
    def test_load_and_mismatch_errors(self, tmp_path):
        (tmp_path / "s.txt").write_text("a b\nc\n")
        (tmp_path / "t.txt").write_text("x y\n")
        vocab = Vocabulary.build(["a b c x y"], 1)
        with pytest.raises(CorpusError, match="mismatch"):
            C.load_parallel_corpus(tmp_path / "s.txt", tmp_path / "t.txt", vocab, vocab)

    def test_empty_line_names_line(self, tmp_path):
        (tmp_path / "s.txt").write_text("a\n\n")
        (tmp_path / "t.txt").write_text("x\ny\n")
        vocab = Vocabulary.build(["a x y"], 1)
        with pytest.raises(CorpusError, match="line 2"):
            C.load_parallel_corpus(tmp_path / "s.txt", tmp_path / "t.txt", vocab, vocab)

    def test_max_len_enforced(self, tmp_path):
        (tmp_path / "s.txt").write_text("a a a a\n")
        (tmp_path / "t.txt").write_text("x\n")
        vocab = Vocabulary.build(["a x"], 1)
        with pytest.raises(CorpusError, match="max length"):
            C.load_parallel_corpus(tmp_path / "s.txt", tmp_path / "t.txt", vocab, vocab, max_len=3)
