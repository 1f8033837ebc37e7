import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from textinject import textfront as tf
from textinject.textfront import (
    EOS,
    MASK,
    PHONEME,
    WORD_PIECE,
    AlignedTranscript,
    DurationModel,
    DurationStats,
    Lexicon,
    Vocab,
)


@pytest.fixture
def lexicon():
    phones = Vocab(PHONEME, ["g", "o", "s", "t"])
    return Lexicon({"go": ["g", "o"], "so": ["s", "o"], "tot": ["t", "o", "t"]}, phones)


@pytest.fixture
def pieces():
    return Vocab(WORD_PIECE, list("gost ") + ["go", " s", "to"])


class TestVocab:
    def test_specials_fixed(self):
        v = Vocab(WORD_PIECE, ["a"])
        assert (v.blank, v.eos, v.mask, v.pad) == (0, 1, 2, 3)
        assert v.id("a") == 4 and len(v) == 5

    def test_duplicates_rejected(self):
        with pytest.raises(ValueError):
            Vocab(WORD_PIECE, ["a", "a"])

    def test_roundtrip(self, tmp_path, pieces):
        path = tmp_path / "vocab.txt"
        pieces.save(path)
        back = Vocab.load(path)
        assert back.units == pieces.units and back.unit_kind == WORD_PIECE


class TestWordPieces:
    def test_longest_match(self):
        v = Vocab(WORD_PIECE, ["a", "b", "ab"])
        assert tf.tokenize_word_pieces("ab", v) == [v.id("ab")]

    def test_single_char_fallback(self):
        v = Vocab(WORD_PIECE, ["a", "b"])
        assert tf.tokenize_word_pieces("ba", v) == [v.id("b"), v.id("a")]

    def test_unknown_character_position(self):
        v = Vocab(WORD_PIECE, ["a"])
        with pytest.raises(tf.TokenizeError, match="position 2"):
            tf.tokenize_word_pieces("aaz", v)

    @settings(max_examples=100, deadline=None)
    @given(st.text("abc ", min_size=1, max_size=20))
    def test_roundtrip(self, text):
        v = tf.build_word_piece_vocab(["abc cab", "a b c", "bca"])
        assert v.decode(tf.tokenize_word_pieces(text, v)) == text

    def test_vocab_bigrams_never_end_in_space(self):
        v = tf.build_word_piece_vocab(["ab ab ab", "ba ba"], n_bigrams=10)
        assert all(not u.endswith(" ") for u in v.units if len(u) == 2)


class TestPhonemes:
    def test_single_and_concat(self, lexicon):
        ph = lexicon.phones
        assert tf.tokenize_phonemes("go", lexicon) == [ph.id("g"), ph.id("o")]
        assert tf.tokenize_phonemes("go go", lexicon) == [ph.id("g"), ph.id("o")] * 2

    def test_out_of_lexicon(self, lexicon):
        with pytest.raises(tf.TokenizeError, match="xyz"):
            tf.tokenize_phonemes("go xyz", lexicon)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.sampled_from(["go", "so", "tot"]), min_size=5, max_size=5))
    def test_concat_oracle(self, words):
        lex = Lexicon({"go": ["g", "o"], "so": ["s", "o"], "tot": ["t", "o", "t"]},
                      Vocab(PHONEME, ["g", "o", "s", "t"]))
        expected = [lex.phones.id(p) for w in words for p in lex[w]]
        assert tf.tokenize_phonemes(" ".join(words), lex) == expected

    def test_lexicon_file_roundtrip(self, tmp_path, lexicon):
        path = tmp_path / "lex.txt"
        lexicon.save(path)
        assert path.read_text().splitlines()[0] == "go\tg o"
        assert Lexicon.load(path, lexicon.phones).entries == lexicon.entries


class TestTextExample:
    def test_word_piece_mode(self, pieces, lexicon):
        ex = tf.build_text_example("go so", WORD_PIECE, pieces, lexicon)
        assert ex.x_t == ex.y_t == tf.tokenize_word_pieces("go so", pieces)

    def test_phoneme_mode(self, pieces, lexicon):
        ex = tf.build_text_example("go so", PHONEME, pieces, lexicon)
        assert ex.x_t == tf.tokenize_phonemes("go so", lexicon)
        assert ex.y_t == tf.tokenize_word_pieces("go so", pieces)

    def test_empty_rejected(self, pieces, lexicon):
        with pytest.raises(tf.TokenizeError):
            tf.build_text_example("  ", PHONEME, pieces, lexicon)

    def test_prepare_appends_eos(self, pieces, lexicon):
        ex = tf.build_text_example("go", PHONEME, pieces, lexicon)
        out = tf.prepare_text_input(ex, DurationModel("fixed_rep"), np.random.default_rng(0), mask_rate=0)
        assert out.y == ex.y_t + [EOS]
        assert len(out.x) == 3 * len(ex.x_t) and not out.mask.any()


class TestDurationStats:
    def _al(self, spans):
        end = spans[-1][2]
        return AlignedTranscript([("w", 0, end)], spans, end)

    def test_mean_and_population_std(self):
        v = Vocab(PHONEME, ["a", "b"])
        corpus = [self._al([("a", 0, 2)]), self._al([("a", 0, 4)]), self._al([("a", 0, 6), ("b", 6, 11)])]
        stats = tf.estimate_duration_stats(corpus, PHONEME, v)
        mean, std = stats.table[v.id("a")]
        assert mean == 4.0 and std == pytest.approx(1.63299, abs=1e-5)
        assert stats.table[v.id("b")] == (5.0, 0.0)

    def test_even_split_remainder_left(self):
        assert tf.split_evenly(7, 2) == [4, 3]
        assert tf.split_evenly(8, 3) == [3, 3, 2]

    def test_word_piece_durations(self, pieces):
        al = AlignedTranscript([("go", 0, 5), ("tot", 5, 12)], [], 12)
        durs = tf.unit_durations(al, WORD_PIECE, pieces)
        ids = tf.tokenize_word_pieces("go", pieces) + tf.tokenize_word_pieces(" tot", pieces)
        assert [u for u, _ in durs] == ids
        assert sum(d for _, d in durs) == 12

    def test_constant_durations_reproduced(self):
        v = Vocab(PHONEME, ["a", "b", "c"])
        corpus = [self._al([("a", 0, 3), ("b", 3, 6), ("c", 6, 9)]) for _ in range(5)]
        stats = tf.estimate_duration_stats(corpus, PHONEME, v)
        assert all(s == (3.0, 0.0) for s in stats.table.values())

    def test_silence_excluded(self):
        v = Vocab(PHONEME, ["a"])
        al = self._al([("sil", 0, 4), ("a", 4, 6), ("sil", 6, 9)])
        stats = tf.estimate_duration_stats([al], PHONEME, v)
        assert stats.table == {v.id("a"): (2.0, 0.0)}

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            tf.estimate_duration_stats([], PHONEME, Vocab(PHONEME, ["a"]))


class TestUpsample:
    def test_fixed_rep(self):
        assert tf.upsample([7, 3], DurationModel("fixed_rep")) == [7, 7, 7, 3, 3, 3]

    def test_random_rep_mean(self):
        m = DurationModel("random_rep")
        reps = m.repeats([5] * 100_000, None, np.random.default_rng(0))
        assert set(reps) == {1, 2, 3}
        assert abs(np.mean(reps) - 2.0) <= 0.05

    def test_subword_dist_std_zero(self):
        stats = DurationStats({9: (4.0, 0.0)}, (1.0, 0.0))
        m = DurationModel("subword_dist", stats=stats)
        assert tf.upsample([9], m, rng=np.random.default_rng(1)) == [9] * 4

    def test_align_plus_dist_uses_alignment(self):
        v = Vocab(PHONEME, ["a", "b"])
        stats = DurationStats({}, (2.0, 1.0))
        m = DurationModel("align_plus_dist", stats=stats, unit_kind=PHONEME, vocab=v)
        al = AlignedTranscript([("ab", 1, 8)], [("sil", 0, 1), ("a", 1, 6), ("b", 6, 8)], 8)
        assert tf.upsample([v.id("a"), v.id("b")], m, al) == [v.id("a")] * 5 + [v.id("b")] * 2

    def test_align_plus_dist_falls_back_without_alignment(self):
        stats = DurationStats({4: (3.0, 0.0)}, (1.0, 0.0))
        m = DurationModel("align_plus_dist", stats=stats)
        assert tf.upsample([4], m) == [4, 4, 4]

    def test_missing_stats_rejected(self):
        with pytest.raises(ValueError):
            DurationModel("subword_dist")

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            tf.upsample([], DurationModel())

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(4, 9), min_size=1, max_size=12), st.sampled_from(tf.SCHEMES),
           st.integers(0, 2 ** 31 - 1))
    def test_order_preserved_and_length_law(self, x, scheme, seed):
        stats = DurationStats({u: (u / 2.0, 1.5) for u in range(4, 10)}, (2.0, 1.0))
        m = DurationModel(scheme, stats=stats)
        out = tf.upsample(x, m, rng=np.random.default_rng(seed))
        runs = m.repeats(x, None, np.random.default_rng(seed))
        assert all(r >= 1 for r in runs)
        # collapsing consecutive duplicates per run boundary recovers the input
        pos, back = 0, []
        for r in runs:
            back.append(out[pos])
            assert out[pos:pos + r] == [out[pos]] * r
            pos += r
        assert back == x and pos == len(out)
        if scheme == "fixed_rep":
            assert len(out) == 3 * len(x)
        if scheme == "random_rep":
            assert len(x) <= len(out) <= 3 * len(x)


class TestMasking:
    def test_coverage_at_length_100(self):
        rng = np.random.default_rng(0)
        fracs = []
        for _ in range(10_000):
            _, flags = tf.mask_spans(list(range(100)), rng=rng)
            assert flags.sum() >= 15
            fracs.append(flags.mean())
        assert 0.15 <= np.mean(fracs) <= 0.19

    def test_short_sequence_fully_masked(self):
        masked, flags = tf.mask_spans([4, 5, 6], rng=np.random.default_rng(0))
        assert masked == [MASK] * 3 and flags.all()

    def test_rate_one(self):
        masked, flags = tf.mask_spans(list(range(4, 40)), rate=1.0, rng=np.random.default_rng(0))
        assert flags.all()

    @pytest.mark.parametrize("rate", [0.0, -0.1, 1.5])
    def test_bad_rate(self, rate):
        with pytest.raises(ValueError):
            tf.mask_spans([4, 5], rate=rate)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(4, 30), min_size=1, max_size=60), st.floats(0.01, 1.0),
           st.integers(0, 2 ** 31 - 1))
    def test_unmasked_positions_untouched(self, ids, rate, seed):
        masked, flags = tf.mask_spans(ids, rate=rate, rng=np.random.default_rng(seed))
        assert flags.sum() / len(ids) >= rate - 1e-9
        for a, b, f in zip(ids, masked, flags):
            assert b == (MASK if f else a)
