"""CTC loss, gradient and Viterbi alignment.

Two implementations of the loss are provided.  :func:`ctc_loss_reference`
walks only the valid band of the lattice, one cell at a time.
:func:`ctc_loss_parallel` computes every row of each column at once, split
across a team of workers, and lets the guarded log-space sum cancel the
invalid cells; per-symbol gradients come from a key-grouped reduction over
the blank-augmented label.

All functions take unnormalized scores (logits) for the frame outputs and
return gradients with respect to those logits.  Log-probabilities are valid
input too, since log-softmax leaves them unchanged.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

NEG_INF = -np.inf


class InfeasibleLabelError(ValueError):
    """The label cannot be aligned to this many frames; the loss is +inf."""

    loss = math.inf

    def __init__(self, T: int, needed: int):
        super().__init__(f"label needs at least {needed} frames, got {T}")
        self.T = T
        self.needed = needed


@dataclass
class CtcLattice:
    alpha: np.ndarray  # (S, T), emission at t included
    beta: np.ndarray  # (S, T), emission at t excluded
    augmented_label: np.ndarray  # (S,)
    log_likelihood: float

    @property
    def combined(self) -> np.ndarray:
        """Plain element-wise ``alpha + beta`` (log joint of paths through a cell)."""
        return self.alpha + self.beta


def log_sum_exp_guarded(a: float, b: float) -> float:
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a < b:
        a, b = b, a
    return a + math.log1p(math.exp(b - a))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def augment_label(label: Sequence[int], blank: int) -> np.ndarray:
    aug = np.full(2 * len(label) + 1, blank, dtype=np.int64)
    aug[1::2] = label
    return aug


def min_frames(label: Sequence[int]) -> int:
    repeats = sum(1 for a, b in zip(label, label[1:]) if a == b)
    return len(label) + repeats


def skip_allowed(aug: np.ndarray, blank: int) -> np.ndarray:
    """``skip[s]`` is True when state ``s`` may be entered from ``s - 2``."""
    skip = np.zeros(len(aug), dtype=bool)
    skip[2:] = (aug[2:] != blank) & (aug[2:] != aug[:-2])
    return skip


def valid_band(S: int, T: int) -> np.ndarray:
    """Boolean (S, T) mask of cells lying on at least one complete path."""
    s = np.arange(S)[:, None]
    t = np.arange(T)[None, :]
    return (s <= 2 * t + 1) & (s >= S - 2 * (T - t))


def _blank_of(frame_logprobs: np.ndarray, blank: int | None) -> int:
    return frame_logprobs.shape[1] - 1 if blank is None else blank


def _check(frame_logprobs, label, blank):
    x = np.asarray(frame_logprobs, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("frame scores must be a (T, K) matrix")
    blank = _blank_of(x, blank)
    label = [int(c) for c in label]
    if any(c == blank or not 0 <= c < x.shape[1] for c in label):
        raise ValueError("label contains the blank or an out-of-range symbol")
    need = min_frames(label)
    if x.shape[0] < max(need, 1):
        raise InfeasibleLabelError(x.shape[0], max(need, 1))
    return x, label, blank


# --------------------------------------------------------------------------
# sequential reference


def ctc_loss_reference(frame_logprobs, label, blank=None, return_lattice=False):
    """Negative log-likelihood of ``label`` and its gradient w.r.t. the logits.

    Only cells inside the valid band are visited; everything else stays
    ``-inf``.  Raises :class:`InfeasibleLabelError` when the label is too
    long for the number of frames.
    """
    x, label, blank = _check(frame_logprobs, label, blank)
    logp = log_softmax(x)
    T = x.shape[0]
    aug = augment_label(label, blank)
    S = len(aug)
    skip = skip_allowed(aug, blank)
    lse = log_sum_exp_guarded

    alpha = np.full((S, T), NEG_INF)
    beta = np.full((S, T), NEG_INF)
    for t in range(T):
        lo = max(0, S - 2 * (T - t))
        hi = min(S - 1, 2 * t + 1)
        for s in range(lo, hi + 1):
            if t == 0:
                acc = 0.0
            else:
                acc = alpha[s, t - 1]
                if s >= 1:
                    acc = lse(acc, alpha[s - 1, t - 1])
                if skip[s]:
                    acc = lse(acc, alpha[s - 2, t - 1])
            alpha[s, t] = acc + logp[t, aug[s]]

    for t in range(T - 1, -1, -1):
        lo = max(0, S - 2 * (T - t))
        hi = min(S - 1, 2 * t + 1)
        for s in range(lo, hi + 1):
            if t == T - 1:
                beta[s, t] = 0.0
                continue
            acc = beta[s, t + 1] + logp[t + 1, aug[s]]
            if s + 1 < S:
                acc = lse(acc, beta[s + 1, t + 1] + logp[t + 1, aug[s + 1]])
            if s + 2 < S and skip[s + 2]:
                acc = lse(acc, beta[s + 2, t + 1] + logp[t + 1, aug[s + 2]])
            beta[s, t] = acc

    ll = alpha[S - 1, T - 1]
    if S > 1:
        ll = lse(ll, alpha[S - 2, T - 1])

    occupancy = np.zeros_like(logp)
    for t in range(T):
        for s in range(S):
            v = alpha[s, t] + beta[s, t]
            if v != NEG_INF:
                occupancy[t, aug[s]] += math.exp(v - ll)
    grad = np.exp(logp) - occupancy
    if return_lattice:
        return -ll, grad, CtcLattice(alpha, beta, aug, ll)
    return -ll, grad


# --------------------------------------------------------------------------
# column-parallel variant

_POOL: ThreadPoolExecutor | None = None
_POOL_SIZE = 0


def _pool(workers: int) -> ThreadPoolExecutor:
    global _POOL, _POOL_SIZE
    if _POOL is None or _POOL_SIZE < workers:
        if _POOL is not None:
            _POOL.shutdown(wait=True)
        _POOL = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="ctc-team")
        _POOL_SIZE = workers
    return _POOL


def _run_team(fn, chunks, workers):
    # map() returns once every chunk of the column is written: the column barrier
    if workers == 1:
        for c in chunks:
            fn(c)
    else:
        list(_pool(workers).map(fn, chunks))


def _row_chunks(S: int, workers: int) -> list[slice]:
    bounds = np.linspace(0, S, min(workers, S) + 1).round().astype(int)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def ctc_loss_parallel(frame_logprobs, label, workers: int = 1, blank=None, return_lattice=False):
    """Same contract as :func:`ctc_loss_reference`, computed column-parallel.

    Every one of the ``S`` rows is evaluated at every time step, including
    rows that no complete path can use.  Cells unreachable from the start
    hold ``-inf``; cells reachable from the start that cannot reach the end
    hold finite garbage in ``alpha`` (and symmetrically in ``beta``).  The
    plain sum ``alpha + beta`` pairs each garbage value with ``-inf`` from
    the other pass, so only valid cells survive into the gradient.

    Each element is produced by the same arithmetic regardless of how rows
    are split, so results are bitwise identical for any ``workers``.
    """
    x, label, blank = _check(frame_logprobs, label, blank)
    workers = max(1, int(workers))
    logp = log_softmax(x)
    T, K = logp.shape
    aug = augment_label(label, blank)
    S = len(aug)
    skip = skip_allowed(aug, blank)
    emit = logp[:, aug].T.copy()  # (S, T)
    chunks = _row_chunks(S, workers)

    alpha = np.full((S, T), NEG_INF)
    alpha[: min(2, S), 0] = emit[: min(2, S), 0]

    def forward_rows(rows, t):
        prev = alpha[:, t - 1]
        idx = np.arange(S)[rows]
        stay = prev[idx]
        adv = np.where(idx >= 1, prev[np.maximum(idx - 1, 0)], NEG_INF)
        jump = np.where(skip[idx], prev[np.maximum(idx - 2, 0)], NEG_INF)
        alpha[rows, t] = np.logaddexp(np.logaddexp(stay, adv), jump) + emit[rows, t]

    for t in range(1, T):
        _run_team(lambda r: forward_rows(r, t), chunks, workers)

    beta = np.full((S, T), NEG_INF)
    beta[max(0, S - 2) :, T - 1] = 0.0
    skip_next = np.zeros(S, dtype=bool)
    skip_next[:-2] = skip[2:]

    def backward_rows(rows, t):
        nxt = beta[:, t + 1] + emit[:, t + 1]
        idx = np.arange(S)[rows]
        stay = nxt[idx]
        adv = np.where(idx + 1 < S, nxt[np.minimum(idx + 1, S - 1)], NEG_INF)
        jump = np.where(skip_next[idx], nxt[np.minimum(idx + 2, S - 1)], NEG_INF)
        beta[rows, t] = np.logaddexp(np.logaddexp(stay, adv), jump)

    for t in range(T - 2, -1, -1):
        _run_team(lambda r: backward_rows(r, t), chunks, workers)

    ll = log_sum_exp_guarded(alpha[S - 1, T - 1], alpha[S - 2, T - 1] if S > 1 else NEG_INF)

    # key-value sort once per utterance: rows grouped by their symbol
    order = np.argsort(aug, kind="stable")
    keys = aug[order]
    starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
    ends = np.r_[starts[1:], len(keys)]
    seg_keys = keys[starts]
    combined = alpha + beta  # plain sum, not the guarded one

    reduced = np.full((len(seg_keys), T), NEG_INF)
    seg_chunks = _row_chunks(len(seg_keys), workers)

    def reduce_keys(segs):
        for g in range(segs.start, segs.stop):
            acc = np.full(T, NEG_INF)
            for i in order[starts[g] : ends[g]]:
                acc = np.logaddexp(acc, combined[i])
            reduced[g] = acc

    _run_team(reduce_keys, seg_chunks, workers)

    grad = np.exp(logp)
    grad[:, seg_keys] -= np.exp(reduced - ll).T
    if return_lattice:
        return -ll, grad, CtcLattice(alpha, beta, aug, ll)
    return -ll, grad


def ctc_loss(frame_logprobs, label, blank=None, workers: int | None = None):
    """Loss/gradient entry point used by training: parallel path by default."""
    return ctc_loss_parallel(frame_logprobs, label, workers=workers or 1, blank=blank)


def column_stream(frame_logprobs, label, blank=None):
    """Yield forward columns one at a time, each computed from the previous only."""
    x, label, blank = _check(frame_logprobs, label, blank)
    logp = log_softmax(x)
    aug = augment_label(label, blank)
    S = len(aug)
    skip = skip_allowed(aug, blank)
    col = np.full(S, NEG_INF)
    col[: min(2, S)] = logp[0, aug[: min(2, S)]]
    yield col.copy()
    idx = np.arange(S)
    for t in range(1, x.shape[0]):
        adv = np.where(idx >= 1, col[np.maximum(idx - 1, 0)], NEG_INF)
        jump = np.where(skip, col[np.maximum(idx - 2, 0)], NEG_INF)
        col = np.logaddexp(np.logaddexp(col, adv), jump) + logp[t, aug]
        yield col.copy()


# --------------------------------------------------------------------------
# Viterbi


def _tie(a: float, b: float) -> bool:
    if not (math.isfinite(a) and math.isfinite(b)):
        return a == b
    return abs(a - b) <= 1e-12 * (1.0 + abs(a) + abs(b))


def viterbi(frame_logprobs, label, blank=None):
    """Best single path through the lattice.

    Returns ``(states, log_prob)`` where ``states[t]`` indexes the augmented
    label.  Among equally probable paths the lexicographically smallest
    state sequence wins, i.e. staying is preferred over advancing.
    """
    x, label, blank = _check(frame_logprobs, label, blank)
    logp = log_softmax(x)
    T = x.shape[0]
    aug = augment_label(label, blank)
    S = len(aug)
    skip = skip_allowed(aug, blank)
    emit = logp[:, aug].T  # (S, T)
    band = valid_band(S, T)

    # best score of any path suffix from (s, t) to the end, emissions after t
    suffix = np.full((S, T), NEG_INF)
    suffix[max(0, S - 2) :, T - 1] = 0.0
    skip_next = np.r_[skip[2:], False, False][:S]
    for t in range(T - 2, -1, -1):
        nxt = suffix[:, t + 1] + emit[:, t + 1]
        best = nxt.copy()
        best[:-1] = np.maximum(best[:-1], nxt[1:])
        best[:-2] = np.where(skip_next[:-2], np.maximum(best[:-2], nxt[2:]), best[:-2])
        suffix[:, t] = best
    suffix[~band] = NEG_INF

    starts = [s for s in range(min(2, S))]
    total = [emit[s, 0] + suffix[s, 0] for s in starts]
    best_total = max(total)
    s = next(s for s, v in zip(starts, total) if _tie(v, best_total))
    states = [s]
    prefix = emit[s, 0]
    for t in range(1, T):
        cands = [s] + ([s + 1] if s + 1 < S else []) + ([s + 2] if s + 2 < S and skip[s + 2] else [])
        for c in cands:
            v = prefix + emit[c, t] + suffix[c, t]
            if _tie(v, best_total) or v > best_total:
                break
        else:
            c = max(cands, key=lambda c: prefix + emit[c, t] + suffix[c, t])
        s = c
        prefix += emit[s, t]
        states.append(s)
    return np.asarray(states, dtype=np.int64), float(prefix)


def viterbi_align(frame_logprobs, label, blank=None) -> np.ndarray:
    """Length-T symbol sequence of the best CTC alignment of ``label``."""
    x = np.asarray(frame_logprobs)
    b = _blank_of(x, blank)
    states, _ = viterbi(x, label, b)
    return augment_label(list(label), b)[states]


def collapse(path: Sequence[int], blank: int) -> list[int]:
    out = []
    prev = None
    for c in path:
        c = int(c)
        if c != prev and c != blank:
            out.append(c)
        prev = c
    return out


# --------------------------------------------------------------------------
# batched helper used by the trainer


def ctc_batch(logits: np.ndarray, lengths: Sequence[int], labels, blank=None, workers=1):
    """Per-utterance losses and a masked gradient for a padded batch.

    Frames past each utterance's length receive zero gradient.
    """
    B, T, K = logits.shape
    losses = np.zeros(B)
    grad = np.zeros_like(logits, dtype=np.float64)
    for b in range(B):
        n = int(lengths[b])
        loss, g = ctc_loss_parallel(logits[b, :n], labels[b], workers=workers, blank=blank)
        losses[b] = loss
        grad[b, :n] = g
    return losses, grad


def dump_lattice_tsv(lattice: CtcLattice, path):
    """Write alpha and beta as TSV blocks (one row per augmented-label state)."""
    with open(path, "w", encoding="utf-8") as f:
        for name, mat in (("alpha", lattice.alpha), ("beta", lattice.beta)):
            f.write(f"# {name}\tS={mat.shape[0]}\tT={mat.shape[1]}\n")
            for s, row in enumerate(mat):
                f.write(f"{int(lattice.augmented_label[s])}\t")
                f.write("\t".join("-inf" if v == NEG_INF else repr(float(v)) for v in row))
                f.write("\n")
