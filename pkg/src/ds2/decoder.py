"""Greedy and prefix beam-search CTC decoding with n-gram fusion.

Hypotheses are ranked by

    Q(y) = log p_ctc(y | x) + alpha * log p_lm(y) + beta * count(y)

where ``count`` is the number of words (word mode) or characters
(character mode).  ``p_ctc`` of a prefix is the total probability of every
frame labeling that collapses to it, kept as separate blank- and
non-blank-ending accumulators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ds2.ctc import collapse

NEG_INF = -math.inf
TIE_TOL = 1e-9


@dataclass(frozen=True)
class DecoderConfig:
    alpha: float = 0.0
    beta: float = 0.0
    beam_width: int = 500
    prune_p: float = 1.0
    max_symbols: int | None = None
    score_tol: float = TIE_TOL

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if not 0 < self.prune_p <= 1:
            raise ValueError("prune_p must be in (0, 1]")
        if self.max_symbols is not None and self.max_symbols < 1:
            raise ValueError("max_symbols must be >= 1")


ENGLISH_BEAM = 500
MANDARIN_BEAM = 200


@dataclass
class Hypothesis:
    prefix: tuple
    p_blank: float = NEG_INF
    p_nonblank: float = NEG_INF
    lm_score: float = 0.0
    lm_state: tuple = ()
    count: int = 0
    word_start: int = 0  # index in prefix where the current word began

    @property
    def total(self) -> float:
        return _lse(self.p_blank, self.p_nonblank)


@dataclass
class DecodeResult:
    labels: list[int]
    score: float
    log_p_ctc: float
    candidate_evals: int
    text: str | None = None
    beams: list = field(default_factory=list, repr=False)


def _lse(a, b):
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    m = max(a, b)
    return m + math.log1p(math.exp(-abs(a - b)))


def greedy_decode(frame_probs, blank: int | None = None) -> list[int]:
    """Per-frame argmax, merge repeats, drop blanks (probabilities or log probabilities)."""
    frame_probs = np.asarray(frame_probs)
    if blank is None:
        blank = frame_probs.shape[1] - 1
    return collapse(np.argmax(frame_probs, axis=1), blank)


def prune_candidates(frame_dist, prune_p: float = 0.99, max_symbols: int | None = 40, blank: int | None = None):
    """Fewest most-probable symbols reaching cumulative ``prune_p``, capped; blank always kept.

    Returns symbol ids sorted ascending.
    """
    dist = np.asarray(frame_dist, dtype=np.float64)
    K = dist.shape[0]
    if blank is None:
        blank = K - 1
    order = np.argsort(-dist, kind="stable")
    if prune_p >= 1.0:
        k = K
    else:
        cum = np.cumsum(dist[order])
        k = int(np.searchsorted(cum, prune_p * (1 - 1e-12) * cum[-1])) + 1
        k = min(k, K)
    if max_symbols is not None:
        k = min(k, max_symbols)
    chosen = set(order[:k].tolist())
    chosen.add(blank)
    return np.array(sorted(chosen), dtype=int)


class _LmAdapter:
    """Incremental LM scoring of label prefixes."""

    def __init__(self, lm, symbols: Sequence[str], space_index: int | None, char_mode: bool):
        self.lm = lm
        self.symbols = list(symbols)
        self.space = space_index
        self.char = char_mode
        self._tokens = self.symbols  # stable identity for the array cache

    def initial(self):
        return self.lm.initial_state() if self.lm is not None else ()

    def char_deltas(self, state):
        return self.lm.logprob_array(state, self._tokens)

    def word(self, prefix, start, end):
        return "".join(self.symbols[i] for i in prefix[start:end])


def beam_search(
    frame_logprobs,
    cfg: DecoderConfig = DecoderConfig(),
    lm=None,
    symbols: Sequence[str] | None = None,
    space_index: int | None = None,
    blank: int | None = None,
) -> DecodeResult:
    """Prefix beam search.

    ``frame_logprobs`` is ``(T, K)`` natural-log per-frame distributions.
    When ``lm`` is given, ``symbols`` maps label ids to graphemes; word mode
    queries the LM each time a space closes a non-empty word (and for the
    trailing word at the end), character mode queries it for every symbol.
    """
    lp = np.asarray(frame_logprobs, dtype=np.float64)
    T, K = lp.shape
    if blank is None:
        blank = K - 1
    char_mode = lm is not None and getattr(lm, "mode", "word") == "char"
    if lm is not None and symbols is None:
        raise ValueError("an LM needs the symbol table to map labels to tokens")
    if lm is not None and not char_mode and space_index is None and symbols is not None:
        space_index = symbols.index(" ") if " " in symbols else None
    adapter = _LmAdapter(lm, symbols or [], space_index, char_mode)
    a, b = cfg.alpha, cfg.beta
    use_lm = lm is not None and a != 0.0
    # bonus bookkeeping is only needed when beta or the LM participates
    words = (not char_mode) and (use_lm or b != 0.0)

    def q_of(h: Hypothesis):
        return h.total + a * h.lm_score + b * h.count

    beams = [Hypothesis((), 0.0, NEG_INF, 0.0, adapter.initial(), 0, 0)]
    evals = 0
    for t in range(T):
        row = lp[t]
        if cfg.prune_p < 1.0 or cfg.max_symbols is not None:
            cand = prune_candidates(np.exp(row), cfg.prune_p, cfg.max_symbols, blank)
        else:
            cand = np.arange(K)
        nb = cand[cand != blank]
        in_cand = np.zeros(K, dtype=bool)
        in_cand[cand] = True
        row_nb = row[nb]
        lp_blank = row[blank]

        index = {h.prefix: i for i, h in enumerate(beams)}
        pool: dict[tuple, Hypothesis] = {}
        for h in beams:
            evals += len(cand)
            stay = Hypothesis(h.prefix, h.total + lp_blank, NEG_INF, h.lm_score, h.lm_state, h.count, h.word_start)
            if h.prefix:
                last = h.prefix[-1]
                stay.p_nonblank = h.p_nonblank + row[last]
            pool[h.prefix] = stay

        forced: dict[int, list[int]] = {}
        for h in beams:
            if h.prefix and h.prefix[:-1] in index and in_cand[h.prefix[-1]]:
                forced.setdefault(index[h.prefix[:-1]], []).append(h.prefix[-1])

        for i, h in enumerate(beams):
            if not len(nb):
                break
            last = h.prefix[-1] if h.prefix else -1
            ext = h.total + row_nb
            if last >= 0:
                ext = np.where(nb == last, h.p_blank + row[last], ext)
            lm_delta = np.zeros(len(nb))
            cnt_delta = np.zeros(len(nb))
            if char_mode:
                if use_lm:
                    lm_delta = adapter.char_deltas(h.lm_state)[nb]
                cnt_delta[:] = 1.0
            elif words and space_index is not None and len(h.prefix) > h.word_start:
                sp = np.nonzero(nb == space_index)[0]
                if len(sp):
                    cnt_delta[sp] = 1.0
                    if use_lm:
                        word = adapter.word(h.prefix, h.word_start, len(h.prefix))
                        lm_delta[sp] = lm.logprob(word, h.lm_state)
            qx = ext + a * (h.lm_score + lm_delta) + b * (h.count + cnt_delta)
            if len(qx) > cfg.beam_width:
                thr = np.partition(qx, len(qx) - cfg.beam_width)[len(qx) - cfg.beam_width]
                pick = np.nonzero(qx >= thr)[0]
            else:
                pick = np.arange(len(qx))
            pick = set(pick.tolist())
            for c in forced.get(i, ()):
                pick.add(int(np.searchsorted(nb, c)))
            for j in sorted(pick):
                c = int(nb[j])
                new = h.prefix + (c,)
                if ext[j] == NEG_INF:
                    continue
                existing = pool.get(new)
                if existing is not None:
                    existing.p_nonblank = _lse(existing.p_nonblank, float(ext[j]))
                    continue
                state, ws = h.lm_state, h.word_start
                if char_mode and lm is not None:
                    state = lm.advance(h.lm_state, adapter.symbols[c])[1]
                elif words and c == space_index:
                    if cnt_delta[j] and lm is not None:
                        word = adapter.word(h.prefix, h.word_start, len(h.prefix))
                        state = lm.advance(h.lm_state, word)[1]
                    ws = len(new)
                pool[new] = Hypothesis(
                    new, NEG_INF, float(ext[j]), h.lm_score + float(lm_delta[j]), state,
                    h.count + int(cnt_delta[j]), ws,
                )
        ranked = sorted(pool.values(), key=lambda h: (-q_of(h), len(h.prefix), h.prefix))
        beams = [h for h in ranked[: cfg.beam_width] if h.total > NEG_INF] or ranked[:1]

    def final_q(h: Hypothesis):
        q = q_of(h)
        if words and space_index is not None and len(h.prefix) > h.word_start:
            word = adapter.word(h.prefix, h.word_start, len(h.prefix))
            q += b + (a * lm.logprob(word, h.lm_state) if use_lm else 0.0)
        return q

    scored = [(final_q(h), h) for h in beams]
    best = select_best([(q, h.prefix) for q, h in scored], cfg.score_tol)
    best_h = next(h for q, h in scored if h.prefix == best[1])
    labels = list(best[1])
    text = "".join(symbols[i] for i in labels) if symbols is not None else None
    return DecodeResult(labels, best[0], best_h.total, evals, text, beams)


def select_best(items, tol=TIE_TOL):
    """Highest score; scores within ``tol`` tie and go to the shorter, then smaller, prefix."""
    top = max(q for q, _ in items)
    near = [(q, p) for q, p in items if q >= top - tol * max(1.0, abs(top))]
    return min(near, key=lambda qp: (len(qp[1]), tuple(qp[1])))


def decode_batch(frame_logprobs_list, cfg, lm=None, symbols=None):
    return [beam_search(lp, cfg, lm=lm, symbols=symbols) for lp in frame_logprobs_list]
