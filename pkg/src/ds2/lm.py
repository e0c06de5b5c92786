"""Interpolated Kneser-Ney n-gram language model with ARPA-style storage.

The trained model is kept in backoff form: every stored n-gram carries its
fully interpolated log10 probability, and every stored context carries the
log10 weight given to the next lower order.  Querying an unseen n-gram walks
down the context, multiplying in backoff weights, which reproduces the
interpolated estimate exactly.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BOS = "<s>"
UNK = "<unk>"
DEFAULT_DISCOUNT = 0.75
DEFAULT_UNK_LOG10 = -10.0
LN10 = math.log(10.0)


@dataclass
class NGramModel:
    order: int
    mode: str  # "word" or "char"
    probs: dict[tuple, float]  # n-gram -> log10 p(last | rest)
    backoffs: dict[tuple, float]  # context -> log10 weight
    unk_log10: float = DEFAULT_UNK_LOG10
    vocab: list[str] = field(init=False)

    def __post_init__(self):
        self.vocab = sorted(g[0] for g in self.probs if len(g) == 1 and g[0] != BOS)
        self._vocab_set = set(self.vocab)
        self._array_cache: dict = {}

    # ------------------------------------------------------------------
    def tokenize(self, text: str) -> list[str]:
        if self.mode == "char":
            return list(text)
        return [w for w in text.split(" ") if w]

    def initial_state(self) -> tuple:
        return (BOS,) * (self.order - 1)

    def _log10(self, token: str, context: tuple) -> float:
        if token not in self._vocab_set:
            return self.unk_log10
        context = tuple(context)[-(self.order - 1):] if self.order > 1 else ()
        bo = 0.0
        while True:
            lp = self.probs.get(context + (token,))
            if lp is not None:
                return bo + lp
            bo += self.backoffs.get(context, 0.0)
            context = context[1:]

    def logprob(self, token: str, context: Sequence[str] = ()) -> float:
        """Natural-log conditional probability."""
        return self._log10(token, tuple(context)) * LN10

    def advance(self, state: tuple, token: str) -> tuple[float, tuple]:
        """(logprob of ``token`` after ``state``, successor state)."""
        lp = self.logprob(token, state)
        if self.order == 1:
            return lp, ()
        return lp, (tuple(state) + (token,))[-(self.order - 1):]

    def logprob_array(self, state: tuple, tokens: Sequence[str]) -> np.ndarray:
        """Vector of natural-log probabilities for many next tokens (cached per state)."""
        key = (tuple(state), id(tokens))
        arr = self._array_cache.get(key)
        if arr is None:
            arr = np.array([self.logprob(t, state) for t in tokens])
            if len(self._array_cache) > 4096:
                self._array_cache.clear()
            self._array_cache[key] = arr
        return arr

    def score(self, tokens: Sequence[str]) -> float:
        state = self.initial_state()
        total = 0.0
        for tok in tokens:
            lp, state = self.advance(state, tok)
            total += lp
        return total

    def score_text(self, text: str) -> float:
        return self.score(self.tokenize(text))

    def distribution(self, context: Sequence[str]) -> dict[str, float]:
        return {w: math.exp(self.logprob(w, context)) for w in self.vocab}

    def contexts(self) -> list[tuple]:
        out = {g[:-1] for g in self.probs if len(g) > 1}
        return sorted(out)

    # ------------------------------------------------------------------
    def save(self, path):
        write_arpa(self, path)

    @classmethod
    def load(cls, path) -> "NGramModel":
        return read_arpa(path)


def _prepare(corpus: Iterable, mode: str) -> list[list[str]]:
    lines = []
    for item in corpus:
        if isinstance(item, str):
            toks = list(item) if mode == "char" else [w for w in item.split(" ") if w]
        else:
            toks = list(item)
        if toks:
            lines.append(toks)
    return lines


def train_ngram(
    corpus: Iterable,
    order: int = 3,
    discount: float = DEFAULT_DISCOUNT,
    min_count: int = 1,
    mode: str = "word",
    unk_log10: float = DEFAULT_UNK_LOG10,
) -> NGramModel:
    """Train an interpolated Kneser-Ney model.

    ``corpus`` holds strings (tokenized by ``mode``) or token lists.  Each
    line is left-padded with ``order - 1`` start symbols; no end symbol is
    used, so each conditional distribution ranges over the vocabulary.
    N-grams of order >= 2 seen fewer than ``min_count`` times are dropped and
    their mass moves to the backoff weight of their context.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    if not 0 < discount < 1:
        raise ValueError("discount must be in (0, 1)")
    if mode not in ("word", "char"):
        raise ValueError("mode must be 'word' or 'char'")
    lines = _prepare(corpus, mode)
    if not lines:
        raise ValueError("corpus is empty")
    n = order

    raw: list[dict[tuple, int]] = [defaultdict(int) for _ in range(n + 1)]
    for toks in lines:
        padded = [BOS] * (n - 1) + toks
        for i in range(n - 1, len(padded)):
            for k in range(1, n + 1):
                g = tuple(padded[i - k + 1 : i + 1])
                if k > 1 and g[-1] == BOS:
                    continue
                raw[k][g] += 1

    # adjusted counts: raw at the top order and for start-anchored n-grams,
    # distinct left extensions otherwise
    adj: list[dict[tuple, int]] = [dict() for _ in range(n + 1)]
    adj[n] = dict(raw[n])
    left_types: list[dict[tuple, set]] = [defaultdict(set) for _ in range(n + 1)]
    for k in range(2, n + 1):
        for g in raw[k]:
            left_types[k - 1][g[1:]].add(g[0])
    for k in range(1, n):
        for g, c in raw[k].items():
            adj[k][g] = c if g[0] == BOS else len(left_types[k][g])
    vocab = sorted({t for toks in lines for t in toks})

    probs: dict[tuple, float] = {}
    backoffs: dict[tuple, float] = {}

    # unigram level: undiscounted
    total1 = sum(adj[1][(w,)] for w in vocab)
    p_lower: dict[tuple, float] = {(w,): adj[1][(w,)] / total1 for w in vocab}
    for w in vocab:
        probs[(w,)] = math.log10(p_lower[(w,)])

    # full interpolated tables level by level
    for k in range(2, n + 1):
        by_ctx: dict[tuple, list] = defaultdict(list)
        for g, a in adj[k].items():
            by_ctx[g[:-1]].append((g[-1], a, raw[k][g]))
        level: dict[tuple, float] = {}
        for ctx, items in by_ctx.items():
            A = sum(a for _, a, _ in items)
            kept = [(w, a) for w, a, r in items if r >= min_count]
            gamma = 1.0 - sum(max(a - discount, 0.0) for _, a in kept) / A
            for w, a in kept:
                p = max(a - discount, 0.0) / A + gamma * _interp(p_lower, ctx[1:], w, backoffs)
                level[ctx + (w,)] = p
            backoffs[ctx] = math.log10(gamma)
        for g, p in level.items():
            probs[g] = math.log10(p)
        p_lower = {**p_lower, **level}
    # drop backoff entries for contexts that are not themselves stored n-grams
    for ctx in list(backoffs):
        if ctx not in probs and ctx != (BOS,) * len(ctx):
            del backoffs[ctx]
    for k in range(1, n):
        start = (BOS,) * k
        if start in backoffs and start not in probs:
            probs[start] = -99.0  # start symbol is never predicted
    return NGramModel(order, mode, probs, backoffs, unk_log10)


def _interp(p_table, ctx, w, backoffs):
    """Lower-order interpolated p(w | ctx) given tables built so far."""
    lp = 0.0
    while True:
        p = p_table.get(ctx + (w,))
        if p is not None:
            return 10.0**lp * p
        lp += backoffs.get(ctx, 0.0)
        ctx = ctx[1:]


# --------------------------------------------------------------------------
# ARPA text format


def write_arpa(model: NGramModel, path):
    by_order: dict[int, list] = defaultdict(list)
    for g, lp in model.probs.items():
        by_order[len(g)].append(g)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"# mode={model.mode} unk_log10={model.unk_log10!r}\n")
        f.write("\\data\\\n")
        for k in range(1, model.order + 1):
            f.write(f"ngram {k}={len(by_order[k])}\n")
        for k in range(1, model.order + 1):
            f.write(f"\n\\{k}-grams:\n")
            for g in sorted(by_order[k]):
                line = f"{model.probs[g]!r}\t{' '.join(g) if model.mode == 'word' else _join_chars(g)}"
                if g in model.backoffs:
                    line += f"\t{model.backoffs[g]!r}"
                f.write(line + "\n")
        f.write("\n\\end\\\n")


def _join_chars(g):
    # characters may include the space symbol; escape it so fields stay unambiguous
    return " ".join("<sp>" if c == " " else c for c in g)


def _split_chars(s):
    return tuple(" " if c == "<sp>" else c for c in s.split(" "))


def read_arpa(path) -> NGramModel:
    text = Path(path).read_text(encoding="utf-8").split("\n")
    mode, unk = "word", DEFAULT_UNK_LOG10
    probs, backoffs = {}, {}
    order = 0
    section = None
    for line in text:
        if line.startswith("# "):
            opts = dict(kv.split("=", 1) for kv in line[2:].split())
            mode = opts.get("mode", mode)
            unk = float(opts.get("unk_log10", unk))
            continue
        if not line.strip():
            continue
        if line.startswith("ngram "):
            order = max(order, int(line.split()[1].split("=")[0]))
            continue
        if line.startswith("\\"):
            section = line.strip()
            continue
        if section and section.endswith("-grams:"):
            parts = line.split("\t")
            g = _split_chars(parts[1]) if mode == "char" else tuple(parts[1].split(" "))
            probs[g] = float(parts[0])
            if len(parts) > 2:
                backoffs[g] = float(parts[2])
    if order < 1:
        raise ValueError(f"{path}: no n-gram sections found")
    return NGramModel(order, mode, probs, backoffs, unk)
