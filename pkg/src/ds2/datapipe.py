"""Dataset construction: align long recordings, cut them into utterances,
filter bad transcripts, add noise, subsample, and score transcripts.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.stats import rankdata

from ds2.ctc import InfeasibleLabelError, ctc_loss, log_softmax, min_frames, viterbi_align
from ds2.features import AudioClip


# --------------------------------------------------------------------------
# error rates


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit costs."""
    ref, hyp = list(ref), list(hyp)
    prev = np.arange(len(hyp) + 1)
    for i, r in enumerate(ref, 1):
        cur = np.empty_like(prev)
        cur[0] = i
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return int(prev[-1])


def cer(ref: Sequence, hyp: Sequence) -> float:
    """Character (or label) error rate; an empty reference scores 0 or 1."""
    if len(ref) == 0:
        return 0.0 if len(hyp) == 0 else 1.0
    return edit_distance(ref, hyp) / len(ref)


def wer(ref: str, hyp: str) -> float:
    return cer(ref.split(), hyp.split())


def corpus_error_rate(refs, hyps, words=True) -> float:
    """Total edits over total reference length."""
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")
    split = (lambda s: s.split()) if words else list
    edits = sum(edit_distance(split(r), split(h)) for r, h in zip(refs, hyps))
    n = sum(len(split(r)) for r in refs)
    return edits / n if n else float(edits > 0)


# --------------------------------------------------------------------------
# manifests


@dataclass
class ManifestEntry:
    id: str
    audio_path: str
    transcript: str
    duration_s: float


def write_manifest(path, entries: Sequence[ManifestEntry]):
    with open(path, "w", encoding="utf-8") as f:
        for e in entries:
            f.write(json.dumps(asdict(e), ensure_ascii=False) + "\n")


def read_manifest(path) -> list[ManifestEntry]:
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            out.append(ManifestEntry(str(d["id"]), str(d["audio_path"]), str(d["transcript"]), float(d["duration_s"])))
        except (KeyError, ValueError, TypeError) as e:
            raise ValueError(f"{path}:{n}: bad manifest record ({e})") from None
    return out


# --------------------------------------------------------------------------
# alignment and segmentation


DEFAULT_MIN_LOGPROB = math.log(1e-4)


@dataclass
class Alignment:
    path: np.ndarray | None  # per output frame symbol id, None when infeasible
    blank: int
    feasible: bool = True
    reason: str = ""


def align_long(frame_logprobs: np.ndarray, transcript: Sequence[int], blank: int | None = None,
               min_logprob: float | None = DEFAULT_MIN_LOGPROB) -> Alignment:
    """Best CTC alignment of the whole transcript over the whole recording.

    ``frame_logprobs`` is the (T, K) model output for the recording.  The
    alignment is flagged infeasible when the transcript cannot fit, or when
    the mean log posterior of the frames it emits on falls below
    ``min_logprob`` (the model hears nothing like the transcript, e.g. in
    silence).
    """
    lp = log_softmax(np.asarray(frame_logprobs, dtype=np.float64))
    b = lp.shape[1] - 1 if blank is None else blank
    try:
        path = viterbi_align(lp, list(transcript), b)
    except InfeasibleLabelError as e:
        return Alignment(None, b, False, str(e))
    emit = path != b
    if min_logprob is not None and emit.any():
        score = float(lp[np.nonzero(emit)[0], path[emit]].mean())
        if score < min_logprob:
            return Alignment(path, b, False, f"mean emission log posterior {score:.2f} below {min_logprob}")
    return Alignment(path, b)


def align_with_model(net, features: np.ndarray, transcript: Sequence[int], **kw) -> Alignment:
    lp, _ = net.predict(features)
    return align_long(lp[0], transcript, net.blank_index, **kw)


@dataclass
class SegmentedUtterance:
    start: int  # span covered in output frames, cut to cut
    end: int
    speech_start: int  # first and one past last emitting frame
    speech_end: int
    labels: list
    source: str = ""

    def scaled(self, stride: int) -> "SegmentedUtterance":
        """Same segment with frames expressed at input resolution."""
        return SegmentedUtterance(self.start * stride, self.end * stride, self.speech_start * stride,
                                  self.speech_end * stride, list(self.labels), self.source)


def segment(alignment, min_blank_run: int, require_space: bool = False, space: int | None = None,
            blank: int | None = None, source: str = "") -> list[SegmentedUtterance]:
    """Cut an alignment at long stretches of blanks.

    A stretch qualifies when it spans at least ``min_blank_run`` frames.
    With ``require_space`` a stretch may also contain ``space`` frames and
    qualifies only if it contains at least one; the cut is then placed on
    the middle space frame and spaces at the cut are dropped from both
    neighbours.  Otherwise the cut is the middle frame of the stretch.
    """
    if isinstance(alignment, Alignment):
        if not alignment.feasible:
            return []
        blank = alignment.blank if blank is None else blank
        path = alignment.path
    else:
        path = alignment
    path = np.asarray(path, dtype=int)
    if blank is None:
        raise ValueError("blank id is required for a bare path")
    if require_space and space is None:
        raise ValueError("require_space needs the space id")
    if min_blank_run < 1:
        raise ValueError("min_blank_run must be >= 1")
    T = len(path)
    quiet = path == blank
    if require_space:
        quiet |= path == space
    cuts = []
    t = 0
    while t < T:
        if not quiet[t]:
            t += 1
            continue
        s = t
        while t < T and quiet[t]:
            t += 1
        # stretches touching either end are leading or trailing silence, not gaps
        if s == 0 or t == T or t - s < min_blank_run:
            continue
        if require_space:
            sp = np.nonzero(path[s:t] == space)[0]
            if not len(sp):
                continue
            cuts.append(s + int(sp[len(sp) // 2]))
        else:
            cuts.append((s + t) // 2)
    edges = [0] + cuts + [T]
    out = []
    for a, b in zip(edges[:-1], edges[1:]):
        seg = path[a:b]
        labels = [int(c) for c in _collapse_keep(seg, blank)]
        if require_space:
            while labels and labels[0] == space:
                labels.pop(0)
            while labels and labels[-1] == space:
                labels.pop()
        emitting = np.nonzero(~quiet[a:b])[0]
        if len(emitting):
            ss, se = a + int(emitting[0]), a + int(emitting[-1]) + 1
        else:
            ss = se = a
        out.append(SegmentedUtterance(a, b, ss, se, labels, source))
    return out


def _collapse_keep(path, blank):
    prev = None
    for c in path:
        if c != prev and c != blank:
            yield c
        prev = c


def splice(clip: AudioClip, seg: SegmentedUtterance, samples_per_frame: int) -> AudioClip:
    """Audio of a segment whose frames are at input resolution."""
    a = seg.start * samples_per_frame
    b = min(len(clip.samples), seg.end * samples_per_frame)
    return AudioClip(clip.samples[a:b], clip.sample_rate)


# --------------------------------------------------------------------------
# filtering


FEATURE_NAMES = ("raw_ctc_cost", "ctc_cost_per_frame", "ctc_cost_per_char", "frames_per_char", "n_words", "n_chars")


@dataclass
class FilterFeatures:
    raw_ctc_cost: float
    ctc_cost_per_frame: float
    ctc_cost_per_char: float
    frames_per_char: float
    n_words: int
    n_chars: int

    def vector(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in FEATURE_NAMES], dtype=np.float64)

    @property
    def feasible(self) -> bool:
        return math.isfinite(self.raw_ctc_cost)


def filter_features(frame_logprobs, label: Sequence[int], space: int | None = None, blank=None) -> FilterFeatures:
    lp = np.asarray(frame_logprobs)
    T = lp.shape[0]
    n = max(len(label), 1)
    if min_frames(label) > T:
        cost = math.inf
    else:
        cost = float(ctc_loss(lp, list(label), blank)[0])
    words = 0
    if len(label):
        if space is None:
            words = 1
        else:
            words = len([w for w in _split(label, space) if w])
    return FilterFeatures(cost, cost / T, cost / n, T / n, words, len(label))


def _split(label, space):
    cur = []
    for c in label:
        if c == space:
            yield cur
            cur = []
        else:
            cur.append(c)
    yield cur


@dataclass
class LinearFilter:
    """Logistic regression on standardized features; score = P(bad)."""

    weights: np.ndarray
    bias: float = 0.0
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None
    threshold: float = 0.5

    def _x(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.mean is not None:
            X = (X - self.mean) / self.scale
        return X

    def score(self, X) -> np.ndarray:
        z = self._x(X) @ self.weights + self.bias
        return 0.5 * (1 + np.tanh(0.5 * z))

    def classify(self, feats: FilterFeatures) -> str:
        if not feats.feasible:
            return "bad"
        return "bad" if self.score(feats.vector())[0] >= self.threshold else "good"

    def to_dict(self):
        return {"weights": self.weights.tolist(), "bias": self.bias,
                "mean": None if self.mean is None else self.mean.tolist(),
                "scale": None if self.scale is None else self.scale.tolist(),
                "threshold": self.threshold}

    @classmethod
    def from_dict(cls, d):
        arr = lambda v: None if v is None else np.asarray(v, dtype=np.float64)
        return cls(np.asarray(d["weights"], dtype=np.float64), float(d["bias"]), arr(d["mean"]),
                   arr(d["scale"]), float(d["threshold"]))


def train_filter(X, y, l2: float = 1e-3) -> LinearFilter:
    """Fit by minimizing the L2-regularized logistic loss (y = 1 means bad)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(np.unique(y)) < 2:
        raise ValueError("training labels must contain both classes")
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite; reject infeasible examples first")
    mean, scale = X.mean(axis=0), X.std(axis=0)
    scale[scale == 0] = 1.0
    Z = (X - mean) / scale
    D = Z.shape[1]

    def f(wb):
        w, b = wb[:D], wb[D]
        z = Z @ w + b
        loss = np.sum(np.logaddexp(0, z) - y * z) / len(y) + 0.5 * l2 * w @ w
        p = 0.5 * (1 + np.tanh(0.5 * z))
        g = np.r_[Z.T @ (p - y) / len(y) + l2 * w, np.mean(p - y)]
        return loss, g

    res = minimize(f, np.zeros(D + 1), jac=True, method="L-BFGS-B")
    return LinearFilter(res.x[:D], float(res.x[D]), mean, scale)


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties count half)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if not n_pos or not n_neg:
        raise ValueError("AUC needs both classes")
    r = rankdata(scores)
    return float((r[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def choose_threshold(scores, labels, target_precision: float = 0.95) -> float:
    """Lowest score threshold whose 'bad' predictions reach the target precision.

    Falls back to the highest score when no threshold reaches it.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    for thr in np.unique(scores):
        pred = scores >= thr
        if pred.any() and labels[pred].mean() >= target_precision:
            return float(thr)
    return float(scores.max())


def corrupt_label(label: Sequence[int], rate: float, n_symbols: int, rng) -> list[int]:
    """Substitute, delete or insert at about ``rate`` of positions (at least one edit)."""
    label = list(label)
    k = max(1, int(round(rate * len(label))))
    for _ in range(k):
        op = rng.integers(3) if len(label) > 1 else rng.choice([0, 2])
        i = int(rng.integers(len(label)))
        if op == 0:
            label[i] = int((label[i] + rng.integers(1, n_symbols)) % n_symbols)
        elif op == 1:
            del label[i]
        else:
            label.insert(i, int(rng.integers(n_symbols)))
    return label


# --------------------------------------------------------------------------
# augmentation and sampling


def power(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x))


def mix_at_snr(signal: np.ndarray, noise: np.ndarray, snr_db: float, offset: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Add ``noise`` (tiled from ``offset`` to the signal length) scaled to ``snr_db``.

    Returns the mix and the scaled noise that was added.
    """
    signal = np.asarray(signal, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if not len(noise) or power(noise) == 0:
        raise ValueError("noise clip is empty or silent")
    idx = (offset + np.arange(len(signal))) % len(noise)
    n = noise[idx]
    ps, pn = power(signal), power(n)
    scaled = n * math.sqrt(ps / (pn * 10 ** (snr_db / 10))) if ps > 0 else np.zeros_like(n)
    return signal + scaled, scaled


def augment_noise(dataset: Sequence[AudioClip], noise_bank: Sequence[AudioClip], fraction: float = 0.4,
                  snr_range=(0.0, 30.0), seed: int = 0):
    """Mix noise into exactly ``round(fraction * N)`` clips chosen at random.

    Returns ``(clips, records)``; ``records`` lists ``(index, snr_db)`` for
    every augmented clip.  Each clip is mixed at most once.
    """
    if not 0 <= fraction <= 1:
        raise ValueError("fraction must be in [0, 1]")
    lo, hi = snr_range
    if lo > hi:
        raise ValueError("snr_range must be (low, high)")
    N = len(dataset)
    k = int(round(fraction * N))
    if k and not noise_bank:
        raise ValueError("noise bank is empty but fraction > 0")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(N, size=k, replace=False)) if k else np.array([], dtype=int)
    out = list(dataset)
    records = []
    for i in chosen:
        clip = dataset[i]
        noise = noise_bank[int(rng.integers(len(noise_bank)))]
        snr = float(rng.uniform(lo, hi))
        off = int(rng.integers(len(noise.samples)))
        mixed, _ = mix_at_snr(clip.samples, noise.samples, snr, off)
        out[i] = AudioClip(mixed, clip.sample_rate)
        records.append((int(i), snr))
    return out, records


def scale_sample(dataset: Sequence, fraction: float, seed: int = 0) -> list:
    """Seeded uniform sample without replacement of ``round(fraction * N)`` items, in original order."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    N = len(dataset)
    if fraction == 1:
        return list(dataset)
    k = int(round(fraction * N))
    idx = np.sort(np.random.default_rng(seed).choice(N, size=k, replace=False))
    return [dataset[i] for i in idx]
