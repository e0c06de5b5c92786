import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ds2.ctc import log_softmax
from ds2.decoder import DecoderConfig, beam_search, greedy_decode, prune_candidates, select_best
from ds2.lm import train_ngram
from oracles import brute_force_decode, edit_distance, peaked_family


def one_hot_frames(ids, K, eps=1e-3):
    p = np.full((len(ids), K), eps)
    p[np.arange(len(ids)), ids] = 1.0
    return np.log(p / p.sum(axis=1, keepdims=True))


class TestGreedy:
    def test_collapse(self):
        # alphabet {a=0, b=1}, blank=2
        assert greedy_decode(one_hot_frames([0, 0, 2, 1], 3)) == [0, 1]
        assert greedy_decode(one_hot_frames([2, 2, 2], 3)) == []
        assert greedy_decode(one_hot_frames([0, 2, 0], 3)) == [0, 0]


class TestPrune:
    def test_cumulative(self):
        got = prune_candidates(np.array([0.95, 0.04, 0.01]), 0.99, 40, blank=2)
        nonblank = [s for s in got if s != 2]
        assert len(got) == 3 and nonblank == [0, 1]
        assert len(prune_candidates(np.array([0.95, 0.04, 0.01]), 0.99, 40, blank=0)) == 2

    def test_full(self):
        d = np.random.default_rng(0).dirichlet(np.ones(7))
        assert list(prune_candidates(d, 1.0, None)) == list(range(7))

    def test_cap_and_blank(self):
        d = np.full(100, 0.01)
        got = prune_candidates(d, 0.99, 40, blank=99)
        assert 99 in got and len(got) == 41

    def test_peaked_vocabulary_reduction(self):
        rng = np.random.default_rng(1)
        lp = peaked_family(rng, 200, 6000)
        counts = [len(prune_candidates(np.exp(r), 0.99, 40)) for r in lp]
        assert 6000 / np.mean(counts) >= 100


class TestBeamSearch:
    def test_exhaustive_matches_brute_force(self):
        rng = np.random.default_rng(2)
        for _ in range(120):
            T, A = int(rng.integers(1, 5)), int(rng.integers(1, 3))
            logits = rng.normal(scale=1.5, size=(T, A + 1))
            res = beam_search(log_softmax(logits), DecoderConfig(beam_width=(A + 1) ** T))
            q, lab = brute_force_decode(logits, A)
            assert tuple(res.labels) == lab
            assert res.score == pytest.approx(q, abs=1e-9)

    def test_exact_ties(self):
        # uniform frames create exactly tied label sequences
        for T, A in [(2, 1), (3, 2), (4, 2)]:
            logits = np.zeros((T, A + 1))
            res = beam_search(log_softmax(logits), DecoderConfig(beam_width=(A + 1) ** T))
            assert tuple(res.labels) == brute_force_decode(logits, A)[1]

    def test_deterministic_frames(self):
        ids = [0, 0, 3, 1, 3, 1, 2]
        lp = one_hot_frames(ids, 4, eps=1e-12)
        for w in (1, 3, 50):
            assert beam_search(lp, DecoderConfig(beam_width=w)).labels == greedy_decode(lp)

    def test_widening_never_hurts(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            lp = log_softmax(rng.normal(scale=2.0, size=(8, 5)))
            scores = [beam_search(lp, DecoderConfig(beam_width=w)).score for w in (1, 2, 4, 8, 16, 64)]
            assert all(b >= a - 1e-12 for a, b in zip(scores, scores[1:])), scores

    def test_full_pruning_is_identity(self):
        rng = np.random.default_rng(4)
        lp = log_softmax(rng.normal(size=(10, 6)))
        a = beam_search(lp, DecoderConfig(beam_width=8))
        b = beam_search(lp, DecoderConfig(beam_width=8, prune_p=1.0, max_symbols=6))
        assert a.labels == b.labels and a.score == b.score

    def test_lm_pulls_toward_hello(self):
        symbols = list("ehlo ")
        K = len(symbols) + 1
        # each frame splits evenly between 'e' and 'a'-like rival 'o' at position 1
        seq = ["h", None, "l", "_", "l", "o"]
        probs = np.full((len(seq), K), 1e-4)
        for t, c in enumerate(seq):
            if c is None:
                probs[t, symbols.index("e")] = 0.45
                probs[t, symbols.index("o")] = 0.55
            elif c == "_":
                probs[t, K - 1] = 1.0
            else:
                probs[t, symbols.index(c)] = 1.0
        lp = np.log(probs / probs.sum(axis=1, keepdims=True))
        plain = beam_search(lp, DecoderConfig(beam_width=16), symbols=symbols)
        assert plain.text == "hollo"
        lm = train_ngram(["hello"], order=2)
        fused = beam_search(lp, DecoderConfig(alpha=2.0, beam_width=16), lm=lm, symbols=symbols)
        assert fused.text == "hello"
        # Q by hand: log p_ctc + alpha * (log p(hello) = 0 or floor for the unknown word)
        assert fused.score == pytest.approx(fused.log_p_ctc, abs=1e-12)
        assert fused.log_p_ctc == pytest.approx(plain.log_p_ctc + math.log(0.45 / 0.55), abs=1e-6)

    def test_char_lm_and_insertion_bonus(self):
        symbols = list("ab")
        rng = np.random.default_rng(5)
        lp = log_softmax(rng.normal(size=(6, 3)))
        lm = train_ngram(["abab", "ba"], order=2, mode="char")
        res = beam_search(lp, DecoderConfig(alpha=0.5, beta=0.3, beam_width=32), lm=lm, symbols=symbols)
        hand = res.log_p_ctc + 0.5 * lm.score(list(res.text)) + 0.3 * len(res.labels)
        assert res.score == pytest.approx(hand, abs=1e-9)

    def test_word_bonus_counts_words(self):
        symbols = list("ab ")
        lp = one_hot_frames([0, 3, 2, 3, 1, 3, 2, 1], 4, eps=1e-9)
        lm = train_ngram(["a b"], order=2)
        res = beam_search(lp, DecoderConfig(alpha=1.0, beta=0.7, beam_width=8), lm=lm, symbols=symbols)
        assert res.text == "a b  b" or res.text.split() == ["a", "b", "b"]
        hand = res.log_p_ctc + lm.score(res.text.split()) + 0.7 * len(res.text.split())
        assert res.score == pytest.approx(hand, abs=1e-9)

    def test_deterministic(self):
        lp = log_softmax(np.random.default_rng(6).normal(size=(12, 5)))
        a = beam_search(lp, DecoderConfig(beam_width=4, prune_p=0.9, max_symbols=3))
        b = beam_search(lp, DecoderConfig(beam_width=4, prune_p=0.9, max_symbols=3))
        assert a.labels == b.labels and a.score == b.score and a.candidate_evals == b.candidate_evals

    def test_config_validation(self):
        with pytest.raises(ValueError):
            DecoderConfig(beam_width=0)
        with pytest.raises(ValueError):
            DecoderConfig(prune_p=0.0)

    def test_pruned_large_vocabulary(self):
        rng = np.random.default_rng(7)
        lp = peaked_family(rng, 30, 6000)
        full = beam_search(lp, DecoderConfig(beam_width=4))
        pruned = beam_search(lp, DecoderConfig(beam_width=4, prune_p=0.99, max_symbols=40))
        assert full.candidate_evals / pruned.candidate_evals >= 100
        assert edit_distance(full.labels, pruned.labels) <= 1


def test_select_best_tie_rule():
    items = [(-1.0, (2,)), (-1.0 + 1e-13, (0, 1)), (-1.0, (1,)), (-3.0, ())]
    assert select_best(items) == (-1.0, (1,))
