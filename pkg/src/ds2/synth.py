"""Synthetic tone-sequence speech task.

Every grapheme is a pure tone at its own frequency.  An utterance is a few
tones separated by short silences, with faint white noise throughout.  The
task is small enough to train end to end on a CPU in minutes, and long
recordings are built by concatenating utterances with long silences, so
the true utterance spans are known exactly.

Durations are expressed in hops of the spectrogram (``HOP`` seconds), so a
tone of ``d`` units covers about ``d`` feature frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ds2.features import AudioClip, compute_spectrogram

SAMPLE_RATE = 8000
WINDOW = 0.016
HOP = 0.008
SYMBOLS = "abcde"
_UNIT = int(round(HOP * SAMPLE_RATE))
# tone frequencies sit on rfft bin centers of the 128-sample window (62.5 Hz spacing)
_BIN_HZ = SAMPLE_RATE / int(round(WINDOW * SAMPLE_RATE))
FREQS = tuple(_BIN_HZ * b for b in (6, 12, 18, 24, 30))


@dataclass
class ToneTask:
    symbols: str = SYMBOLS
    min_chars: int = 2
    max_chars: int = 5
    tone_units: tuple = (4, 4)  # inclusive range of tone length in frames
    gap_units: tuple = (2, 3)
    edge_units: tuple = (2, 5)
    noise: float = 0.01
    amplitude: tuple = (0.3, 0.8)
    freqs: tuple = FREQS
    mean: np.ndarray | None = field(default=None, repr=False)
    std: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.freqs) < len(self.symbols):
            raise ValueError("need one frequency per symbol")

    # ------------------------------------------------------------------
    def _units(self, rng, spec):
        return int(rng.integers(spec[0], spec[1] + 1))

    def render(self, label, rng, lead=None, tail=None):
        """Audio for ``label`` plus the (start, end) unit span of each tone."""
        parts, spans = [], []
        pos = self._units(rng, self.edge_units) if lead is None else lead
        parts.append(np.zeros(pos * _UNIT))
        for i, c in enumerate(label):
            if i:
                g = self._units(rng, self.gap_units)
                parts.append(np.zeros(g * _UNIT))
                pos += g
            d = self._units(rng, self.tone_units)
            n = d * _UNIT
            t = np.arange(n) / SAMPLE_RATE
            amp = rng.uniform(*self.amplitude)
            phase = rng.uniform(0, 2 * np.pi)
            parts.append(amp * np.sin(2 * np.pi * self.freqs[c] * t + phase))
            spans.append((pos, pos + d))
            pos += d
        end = self._units(rng, self.edge_units) if tail is None else tail
        parts.append(np.zeros(end * _UNIT))
        x = np.concatenate(parts)
        x = x + self.noise * rng.standard_normal(len(x))
        return AudioClip(x, SAMPLE_RATE), spans

    def random_label(self, rng):
        L = int(rng.integers(self.min_chars, self.max_chars + 1))
        return rng.integers(0, len(self.symbols), size=L).tolist()

    def raw_features(self, clip: AudioClip) -> np.ndarray:
        return compute_spectrogram(clip, WINDOW, HOP).frames

    def fit_normalizer(self, feats):
        stacked = np.concatenate(feats, axis=0)
        self.mean = stacked.mean(axis=0)
        self.std = stacked.std(axis=0) + 1e-6
        return self

    def features(self, clip: AudioClip) -> np.ndarray:
        f = self.raw_features(clip)
        if self.mean is None:
            return f
        return (f - self.mean) / self.std

    def text(self, label) -> str:
        return "".join(self.symbols[i] for i in label)

    @property
    def input_dim(self) -> int:
        return int(round(WINDOW * SAMPLE_RATE)) // 2 + 1


def make_dataset(n: int, seed: int = 0, task: ToneTask | None = None):
    """``n`` utterances; the task's normalizer is fitted on them if unset."""
    from ds2.trainer import Utterance

    task = task or ToneTask()
    rng = np.random.default_rng(seed)
    clips, labels = [], []
    for _ in range(n):
        lab = task.random_label(rng)
        clip, _ = task.render(lab, rng)
        clips.append(clip)
        labels.append(lab)
    raw = [task.raw_features(c) for c in clips]
    if task.mean is None:
        task.fit_normalizer(raw)
    utts = [
        Utterance((f - task.mean) / task.std, lab, f"tone{seed}-{i:05d}", task.text(lab))
        for i, (f, lab) in enumerate(zip(raw, labels))
    ]
    return task, utts, clips


@dataclass
class LongRecordingTruth:
    clip: AudioClip
    labels: list  # per-utterance labels
    spans: list  # per-utterance (start, end) in feature frames

    @property
    def transcript(self) -> list[int]:
        return [c for lab in self.labels for c in lab]


def make_long_recording(task: ToneTask, n_utts: int = 20, seed: int = 0, gap_units=(25, 40)):
    """Utterances joined by long silences, with their true frame spans."""
    rng = np.random.default_rng(seed)
    pieces, labels, spans = [], [], []
    pos = 0
    for i in range(n_utts):
        lab = task.random_label(rng)
        lead = int(rng.integers(gap_units[0], gap_units[1] + 1)) if i else 6
        tail = 6 if i == n_utts - 1 else 0
        clip, tones = task.render(lab, rng, lead=lead, tail=tail)
        spans.append((pos + tones[0][0], pos + tones[-1][1]))
        pos += len(clip.samples) // _UNIT
        pieces.append(clip.samples)
        labels.append(lab)
    return LongRecordingTruth(AudioClip(np.concatenate(pieces), SAMPLE_RATE), labels, spans)
