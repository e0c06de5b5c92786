"""Spectrogram front end, input normalization and label coding.

The network consumes log-power spectrograms.  Labels are indices into an
:class:`Alphabet`; the blank symbol used by CTC is always the last index.
Optionally words are re-coded into non-overlapping bigrams with a
:class:`BigramCodec` so that larger time strides remain feasible.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import lfilter

LOG_FLOOR = 1e-10
NORM_EPS = 1e-10


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("samples must be one-dimensional")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples must be finite")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureSequence:
    frames: np.ndarray  # (T, F)
    frame_shift: float

    def __len__(self):
        return self.frames.shape[0]

    @property
    def num_bins(self) -> int:
        return self.frames.shape[1]


def frame_count(n_samples: int, window: int, hop: int) -> int:
    if n_samples < window:
        raise ValueError(
            f"clip has {n_samples} samples, shorter than one {window}-sample window"
        )
    return (n_samples - window) // hop + 1


def compute_spectrogram(
    clip: AudioClip,
    window_len: float = 0.020,
    hop: float = 0.010,
    floor: float = LOG_FLOOR,
) -> FeatureSequence:
    """Hann-windowed log power spectrogram.

    Frame ``t`` covers samples ``[t*H, t*H + W)`` and has ``W // 2 + 1``
    bins; entries are ``log(|rfft|^2 + floor)``.
    """
    W = int(round(window_len * clip.sample_rate))
    H = int(round(hop * clip.sample_rate))
    if W < 1 or H < 1:
        raise ValueError("window and hop must each span at least one sample")
    T = frame_count(len(clip.samples), W, H)
    frames = np.lib.stride_tricks.sliding_window_view(clip.samples, W)[::H][:T]
    window = np.hanning(W + 2)[1:-1] if W > 2 else np.ones(W)
    spec = np.fft.rfft(frames * window, axis=1)
    power = spec.real**2 + spec.imag**2
    return FeatureSequence(np.log(power + floor), H / clip.sample_rate)


# --------------------------------------------------------------------------
# normalization


@dataclass
class NormalizerState:
    """Running per-bin statistics for streaming normalization.

    ``decay`` in (0, 1) gives an exponential moving average; ``decay=None``
    gives a cumulative average where ``count`` acts as the pseudo-count of
    the priming statistics.
    """

    running_mean: np.ndarray
    running_var: np.ndarray
    count: float = 0.0
    decay: float | None = 0.999

    @classmethod
    def from_training(cls, feature_seqs: Iterable[FeatureSequence], decay=0.999):
        stacked = np.concatenate([np.asarray(f.frames) for f in feature_seqs], axis=0)
        return cls(stacked.mean(axis=0), stacked.var(axis=0), float(len(stacked)), decay)

    def copy(self) -> "NormalizerState":
        return NormalizerState(
            self.running_mean.copy(), self.running_var.copy(), self.count, self.decay
        )


def normalize(
    features: FeatureSequence,
    mode: str = "utterance",
    state: NormalizerState | None = None,
    eps: float = NORM_EPS,
) -> FeatureSequence:
    """Standardize each frequency bin.

    ``mode="utterance"`` uses statistics of the whole utterance.
    ``mode="streaming"`` updates ``state`` frame by frame (in place) and
    normalizes each frame with the statistics that include it and every
    earlier frame, never later ones.
    """
    x = np.asarray(features.frames, dtype=np.float64)
    if mode == "utterance":
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        out = (x - mu) / np.sqrt(var + eps)
        return FeatureSequence(out, features.frame_shift)
    if mode != "streaming":
        raise ValueError(f"unknown normalization mode {mode!r}")
    if state is None or state.count <= 0:
        raise ValueError("streaming normalization needs a state primed from training data")

    T = x.shape[0]
    if state.decay is None:
        n0 = state.count
        # second moment about the prior mean keeps the cumulative update exact
        m2_prior = state.running_var + state.running_mean**2
        n = n0 + np.arange(1, T + 1)[:, None]
        mean = (n0 * state.running_mean + np.cumsum(x, axis=0)) / n
        m2 = (n0 * m2_prior + np.cumsum(x * x, axis=0)) / n
        var = np.maximum(m2 - mean**2, 0.0)
        state.count = float(n0 + T)
    else:
        d = state.decay
        b, a = [1.0 - d], [1.0, -d]
        zi_mean = d * state.running_mean
        mean = lfilter(b, a, x, axis=0, zi=zi_mean[None, :])[0]
        m2_prior = state.running_var + state.running_mean**2
        m2 = lfilter(b, a, x * x, axis=0, zi=(d * m2_prior)[None, :])[0]
        var = np.maximum(m2 - mean**2, 0.0)
        state.count += T
    state.running_mean = mean[-1].copy()
    state.running_var = var[-1].copy()
    return FeatureSequence((x - mean) / np.sqrt(var + eps), features.frame_shift)


# --------------------------------------------------------------------------
# labels


SPACE = " "


@dataclass
class Alphabet:
    """Ordered graphemes; the CTC blank is appended after the last symbol."""

    symbols: list[str]
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.symbols = list(self.symbols)
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("alphabet symbols must be unique")
        self._index = {s: i for i, s in enumerate(self.symbols)}

    def __len__(self):
        return len(self.symbols)

    @property
    def blank_index(self) -> int:
        return len(self.symbols)

    @property
    def space_index(self) -> int | None:
        return self._index.get(SPACE)

    @property
    def num_outputs(self) -> int:
        return len(self.symbols) + 1

    def encode(self, text: str) -> list[int]:
        try:
            return [self._index[c] for c in text]
        except KeyError as e:
            raise ValueError(f"grapheme {e.args[0]!r} not in alphabet") from None

    def decode(self, labels: Sequence[int]) -> str:
        return "".join(self.symbols[i] for i in labels)

    def digest(self) -> bytes:
        import hashlib

        return hashlib.sha256("\n".join(self.symbols).encode("utf-8")).digest()[:8]

    def save(self, path):
        # one symbol per line, kept verbatim (the space symbol is a line holding " ")
        Path(path).write_text("".join(s + "\n" for s in self.symbols), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Alphabet":
        text = Path(path).read_text(encoding="utf-8")
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


class BigramCodec:
    """Non-overlapping bigram recoding of words.

    Ids ``0 .. len(alphabet)-1`` are the unigrams of ``alphabet``; bigram ids
    follow.  Only bigrams seen when building the table from a training
    corpus get an id; at encode time a missing bigram falls back to its two
    unigrams, which keeps decoding an exact inverse.
    """

    def __init__(self, alphabet: Alphabet, bigrams: dict[str, int] | None = None):
        self.alphabet = alphabet
        self.bigram_table: dict[str, int] = dict(bigrams or {})
        n = len(alphabet)
        for pair, idx in self.bigram_table.items():
            if len(pair) != 2 or idx < n:
                raise ValueError(f"bad bigram entry {pair!r} -> {idx}")
        self._symbols = list(alphabet.symbols) + [""] * len(self.bigram_table)
        for pair, idx in self.bigram_table.items():
            if idx - n >= len(self.bigram_table) or self._symbols[idx]:
                raise ValueError("bigram ids must be dense and unique")
            self._symbols[idx] = pair

    @classmethod
    def from_corpus(cls, alphabet: Alphabet, lines: Iterable[str]) -> "BigramCodec":
        seen: dict[str, int] = {}
        next_id = len(alphabet)
        for line in lines:
            for word in line.split(SPACE):
                for i in range(0, len(word) - 1, 2):
                    pair = word[i : i + 2]
                    alphabet.encode(pair)
                    if pair not in seen:
                        seen[pair] = next_id
                        next_id += 1
        return cls(alphabet, seen)

    @property
    def symbols(self) -> list[str]:
        return list(self._symbols)

    def __len__(self):
        return len(self._symbols)

    @property
    def blank_index(self) -> int:
        return len(self._symbols)

    def encode(self, text: str) -> list[int]:
        out: list[int] = []
        unigram = self.alphabet.encode
        for k, word in enumerate(text.split(SPACE)):
            if k:
                out.extend(unigram(SPACE))
            i = 0
            while i + 1 < len(word):
                pair = word[i : i + 2]
                idx = self.bigram_table.get(pair)
                out.extend([idx] if idx is not None else unigram(pair))
                i += 2
            if i < len(word):
                out.extend(unigram(word[i]))
        return out

    def decode(self, labels: Sequence[int]) -> str:
        n = len(self._symbols)
        for i in labels:
            if not 0 <= i < n:
                raise ValueError(f"label id {i} outside the codec symbol set")
        return "".join(self._symbols[i] for i in labels)

    def save(self, path):
        items = sorted(self.bigram_table.items(), key=lambda kv: kv[1])
        Path(path).write_text("".join(f"{p}\t{i}\n" for p, i in items), encoding="utf-8")

    @classmethod
    def load(cls, alphabet: Alphabet, path) -> "BigramCodec":
        table = {}
        for line in Path(path).read_text(encoding="utf-8").split("\n"):
            if not line:
                continue
            pair, idx = line.rsplit("\t", 1)
            table[pair] = int(idx)
        return cls(alphabet, table)


def bigram_encode(text: str, codec: BigramCodec) -> list[int]:
    return codec.encode(text)


def bigram_decode(labels: Sequence[int], codec: BigramCodec) -> str:
    return codec.decode(labels)


# --------------------------------------------------------------------------
# audio files


def read_wav(path) -> AudioClip:
    """Read a mono PCM16 WAV file, scaling samples to [-1, 1)."""
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2:
            raise ValueError("only 16-bit PCM WAV is supported")
        rate = w.getframerate()
        channels = w.getnchannels()
        data = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    if channels > 1:
        data = data.reshape(-1, channels).mean(axis=1)
    return AudioClip(data.astype(np.float64) / 32768.0, rate)


def write_wav(path, clip: AudioClip):
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(clip.sample_rate))
        w.writeframes(pcm.tobytes())


def read_raw_f32(path, sample_rate: int) -> AudioClip:
    return AudioClip(np.fromfile(path, dtype="<f4").astype(np.float64), sample_rate)


def write_raw_f32(path, clip: AudioClip):
    clip.samples.astype("<f4").tofile(path)


def load_audio(path, sample_rate: int | None = None) -> AudioClip:
    """Dispatch on extension: ``.wav`` is PCM16, anything else raw float32."""
    if str(path).lower().endswith(".wav"):
        return read_wav(path)
    if sample_rate is None:
        raise ValueError("raw float32 audio needs a declared sample rate")
    return read_raw_f32(path, sample_rate)
