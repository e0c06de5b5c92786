import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ds2.lm import BOS, NGramModel, read_arpa, train_ngram, write_arpa
from oracles import kn_oracle

FIVE_LINES = ["a b", "a c", "b a b", "c a", "b"]

words = st.sampled_from(["a", "b", "c", "d"])
corpora = st.lists(st.lists(words, min_size=1, max_size=6), min_size=1, max_size=8)


def all_contexts(model, k):
    vocab = model.vocab + [BOS]
    out = [()]
    for _ in range(k):
        out = [c + (v,) for c in out for v in vocab]
    return out


class TestTraining:
    def test_unigram_mle(self):
        m = train_ngram(["a a b"], order=1)
        assert math.exp(m.logprob("a")) == pytest.approx(2 / 3, abs=1e-12)
        assert math.exp(m.logprob("b")) == pytest.approx(1 / 3, abs=1e-12)

    def test_hand_computed_bigram(self):
        # p(a|<s>) = 1.25/5 + 0.45 * 3/7 = 31/70 ; p(b|a) = 1.25/3 + 0.5 * 2/7 = 47/84
        m = train_ngram(FIVE_LINES, order=2)
        assert m.score_text("a b") == pytest.approx(math.log(1457 / 5880), abs=1e-12)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            train_ngram(["a"], order=0)
        with pytest.raises(ValueError):
            train_ngram([], order=2)
        with pytest.raises(ValueError):
            train_ngram(["a"], discount=1.0)

    @settings(max_examples=40, deadline=None)
    @given(corpora, st.integers(1, 4))
    def test_matches_recursive_oracle(self, lines, order):
        m = train_ngram(lines, order=order)
        ref = kn_oracle(lines, order)
        for ctx in all_contexts(m, min(order - 1, 2)):
            ctx = (BOS,) * (order - 1 - len(ctx)) + ctx
            for w in m.vocab:
                assert math.exp(m.logprob(w, ctx)) == pytest.approx(ref(w, ctx), abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(corpora, st.integers(1, 4), st.integers(1, 3))
    def test_normalized(self, lines, order, min_count):
        m = train_ngram(lines, order=order, min_count=min_count)
        for ctx in m.contexts() + all_contexts(m, 1):
            assert sum(m.distribution(ctx).values()) == pytest.approx(1.0, abs=1e-9)
            assert all(p > 0 for p in m.distribution(ctx).values())

    def test_unseen_bigram_positive(self):
        m = train_ngram(FIVE_LINES, order=2)
        assert ("c", "c") not in m.probs
        assert math.exp(m.logprob("c", ["c"])) > 0

    def test_pruning_moves_mass_to_backoff(self):
        full = train_ngram(FIVE_LINES, order=2)
        pruned = train_ngram(FIVE_LINES, order=2, min_count=2)
        assert ("a", "c") in full.probs and ("a", "c") not in pruned.probs
        assert pruned.backoffs[("a",)] > full.backoffs[("a",)]

    def test_extra_occurrence_can_lower_probability(self):
        # interpolated KN is not monotone in raw counts: the new line also moves
        # discount mass and continuation counts; both values match the oracle
        base = [["a", "a", "b", "a", "b", "a"]]
        before = train_ngram(base, order=2).logprob("a", ["b"])
        after = train_ngram(base + [["b", "a"]], order=2).logprob("a", ["b"])
        assert before == pytest.approx(-0.09844007281325252, abs=1e-12)
        assert after == pytest.approx(-0.10536051565782628, abs=1e-12)


class TestScoring:
    def test_empty(self):
        assert train_ngram(FIVE_LINES, order=3).score([]) == 0.0

    def test_chain_rule(self):
        m = train_ngram(FIVE_LINES, order=3)
        toks = ["b", "a", "c", "a"]
        state, total = m.initial_state(), 0.0
        for t in toks:
            lp, state = m.advance(state, t)
            total += lp
        assert total == m.score(toks)

    def test_unknown_floor(self):
        m = train_ngram(FIVE_LINES, order=2, unk_log10=-7.0)
        assert m.logprob("zebra", ["a"]) == pytest.approx(-7.0 * math.log(10))

    def test_char_mode(self):
        m = train_ngram(["ab ba", "abba"], order=3, mode="char")
        assert " " in m.vocab
        assert sum(m.distribution(("a", " ")).values()) == pytest.approx(1.0, abs=1e-9)


class TestSerialization:
    @pytest.mark.parametrize("mode,lines", [("word", FIVE_LINES), ("char", ["ab ba", "a b"])])
    def test_round_trip_bit_exact(self, tmp_path, mode, lines):
        m = train_ngram(lines, order=3, mode=mode, min_count=1)
        write_arpa(m, tmp_path / "lm.arpa")
        back = read_arpa(tmp_path / "lm.arpa")
        assert back.probs == m.probs and back.backoffs == m.backoffs
        assert back.mode == m.mode and back.order == m.order
        write_arpa(back, tmp_path / "again.arpa")
        assert (tmp_path / "again.arpa").read_bytes() == (tmp_path / "lm.arpa").read_bytes()

    def test_sections(self, tmp_path):
        m = train_ngram(FIVE_LINES, order=2)
        m.save(tmp_path / "lm.arpa")
        text = (tmp_path / "lm.arpa").read_text()
        assert "\\1-grams:" in text and "\\2-grams:" in text and text.rstrip().endswith("\\end\\")
        assert NGramModel.load(tmp_path / "lm.arpa").score_text("a b") == m.score_text("a b")
