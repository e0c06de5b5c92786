import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ds2.features import (
    LOG_FLOOR,
    Alphabet,
    AudioClip,
    BigramCodec,
    FeatureSequence,
    NormalizerState,
    bigram_decode,
    bigram_encode,
    compute_spectrogram,
    frame_count,
    load_audio,
    normalize,
    read_wav,
    write_raw_f32,
    write_wav,
)

ALPHA = Alphabet(list("abcdefghijklmnopqrstuvwxyz '"))


def direct_dft_power(frame):
    n = len(frame)
    k = np.arange(n // 2 + 1)[:, None]
    t = np.arange(n)[None, :]
    re = (frame * np.cos(2 * np.pi * k * t / n)).sum(axis=1)
    im = -(frame * np.sin(2 * np.pi * k * t / n)).sum(axis=1)
    return re**2 + im**2


class TestSpectrogram:
    def test_frame_count_example(self):
        clip = AudioClip(np.random.default_rng(0).normal(size=480), 16000)
        spec = compute_spectrogram(clip, window_len=0.020, hop=0.010)
        assert len(spec) == 2
        assert spec.num_bins == 161

    @given(st.integers(1, 400), st.integers(1, 64), st.integers(0, 500))
    def test_frame_count_formula(self, W, H, extra):
        N = W + extra
        assert frame_count(N, W, H) == (N - W) // H + 1

    def test_short_clip_errors(self):
        with pytest.raises(ValueError, match="shorter"):
            compute_spectrogram(AudioClip(np.zeros(100), 16000))

    def test_zero_clip(self):
        spec = compute_spectrogram(AudioClip(np.zeros(1600), 16000))
        assert np.all(spec.frames == np.log(LOG_FLOOR))

    def test_sine_bin_center_and_direct_dft(self):
        sr, W = 8000, 160
        k0 = 12
        t = np.arange(1600)
        clip = AudioClip(np.sin(2 * np.pi * k0 * t / W), sr)
        spec = compute_spectrogram(clip, window_len=W / sr, hop=80 / sr)
        assert np.all(spec.frames.argmax(axis=1) == k0)
        window = np.hanning(W + 2)[1:-1]
        for i in (0, 3, len(spec) - 1):
            frame = clip.samples[i * 80 : i * 80 + W] * window
            np.testing.assert_allclose(
                spec.frames[i], np.log(direct_dft_power(frame) + LOG_FLOOR), atol=1e-9
            )

    def test_shift_by_hop(self):
        sr, H = 8000, 80
        t = np.arange(2400)
        x = np.sin(2 * np.pi * 5 * t / H) + 0.3 * np.cos(2 * np.pi * 3 * t / H)
        a = compute_spectrogram(AudioClip(x, sr), window_len=0.02, hop=H / sr)
        b = compute_spectrogram(AudioClip(x[H:], sr), window_len=0.02, hop=H / sr)
        np.testing.assert_allclose(b.frames, a.frames[1 : 1 + len(b)], atol=1e-9)

    def test_invalid_clip(self):
        with pytest.raises(ValueError):
            AudioClip(np.array([0.0, np.nan]), 16000)
        with pytest.raises(ValueError):
            AudioClip(np.zeros(10), 0)


class TestNormalize:
    def test_constant_is_zero(self):
        out = normalize(FeatureSequence(np.full((20, 4), 3.5), 0.01))
        np.testing.assert_array_equal(out.frames, 0.0)

    def test_moments(self):
        x = np.random.default_rng(1).normal(4.0, 3.0, size=(200, 6))
        out = normalize(FeatureSequence(x, 0.01)).frames
        assert np.max(np.abs(out.mean(axis=0))) <= 1e-9
        assert np.max(np.abs(out.var(axis=0) - 1.0)) <= 1e-6

    def test_streaming_needs_state(self):
        with pytest.raises(ValueError):
            normalize(FeatureSequence(np.zeros((3, 2)), 0.01), mode="streaming")

    def test_streaming_uses_only_past(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(50, 3))
        state = NormalizerState(np.zeros(3), np.ones(3), 100.0, decay=0.99)
        full = normalize(FeatureSequence(x, 0.01), "streaming", state.copy()).frames
        y = x.copy()
        y[30:] += 100.0
        part = normalize(FeatureSequence(y, 0.01), "streaming", state.copy()).frames
        np.testing.assert_array_equal(full[:30], part[:30])

    def test_streaming_chunks_equal_whole(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(40, 3))
        for decay in (0.95, None):
            s1 = NormalizerState(np.zeros(3), np.ones(3), 10.0, decay=decay)
            s2 = s1.copy()
            whole = normalize(FeatureSequence(x, 0.01), "streaming", s1).frames
            parts = [normalize(FeatureSequence(x[i : i + 7], 0.01), "streaming", s2).frames
                     for i in range(0, 40, 7)]
            np.testing.assert_allclose(np.concatenate(parts), whole, atol=1e-12)
            np.testing.assert_allclose(s1.running_mean, s2.running_mean, atol=1e-12)

    def test_streaming_converges_on_stationary_input(self):
        rng = np.random.default_rng(4)
        mu, sd = np.array([2.0, -1.0, 5.0]), np.array([0.5, 3.0, 1.0])
        x = mu + sd * rng.normal(size=(200_000, 3))
        train = FeatureSequence(mu + sd * rng.normal(size=(5000, 3)), 0.01)
        state = NormalizerState.from_training([train], decay=None)
        whole = normalize(FeatureSequence(x, 0.01)).frames
        stream = normalize(FeatureSequence(x, 0.01), "streaming", state).frames
        assert np.max(np.abs(stream[-1000:] - whole[-1000:])) <= 1e-3
        assert state.running_var.min() >= 0


class TestLabels:
    def test_alphabet(self):
        assert ALPHA.blank_index == len(ALPHA) == 28
        assert ALPHA.space_index == 26
        assert ALPHA.decode(ALPHA.encode("it's ok")) == "it's ok"
        with pytest.raises(ValueError):
            ALPHA.encode("A")
        with pytest.raises(ValueError):
            Alphabet(["a", "a"])

    def test_alphabet_file_round_trip(self, tmp_path):
        ALPHA.save(tmp_path / "a.txt")
        assert Alphabet.load(tmp_path / "a.txt").symbols == ALPHA.symbols

    def test_bigram_example(self):
        codec = BigramCodec.from_corpus(ALPHA, ["the cat sat"])
        ids = bigram_encode("the cat sat", codec)
        assert [codec.symbols[i] for i in ids] == ["th", "e", " ", "ca", "t", " ", "sa", "t"]
        assert bigram_decode(ids[:2], codec) == "the"
        assert bigram_decode([], codec) == ""
        assert [codec.symbols[i] for i in bigram_encode("a", codec)] == ["a"]

    def test_unknown_bigram_falls_back(self):
        codec = BigramCodec.from_corpus(ALPHA, ["the cat"])
        ids = codec.encode("dog")
        assert [codec.symbols[i] for i in ids] == ["d", "o", "g"]
        assert codec.decode(ids) == "dog"

    def test_decode_unknown_id(self):
        codec = BigramCodec.from_corpus(ALPHA, ["ab"])
        with pytest.raises(ValueError):
            codec.decode([len(codec) + 5])

    @settings(max_examples=60)
    @given(st.lists(st.text(alphabet="abcdefgh'", min_size=1, max_size=9), min_size=1, max_size=6))
    def test_round_trip_corpus_lines(self, words):
        corpus = [" ".join(words), "hello world"]
        codec = BigramCodec.from_corpus(ALPHA, corpus)
        for line in corpus:
            assert codec.decode(codec.encode(line)) == line

    def test_codec_file(self, tmp_path):
        codec = BigramCodec.from_corpus(ALPHA, ["the cat sat on the mat"])
        codec.save(tmp_path / "bi.txt")
        back = BigramCodec.load(ALPHA, tmp_path / "bi.txt")
        assert back.bigram_table == codec.bigram_table
        assert (tmp_path / "bi.txt").read_text().splitlines()[0] == f"th\t{len(ALPHA)}"


class TestAudioFiles:
    def test_wav_round_trip(self, tmp_path):
        x = np.random.default_rng(5).uniform(-0.9, 0.9, size=800)
        write_wav(tmp_path / "a.wav", AudioClip(x, 16000))
        back = read_wav(tmp_path / "a.wav")
        assert back.sample_rate == 16000
        np.testing.assert_allclose(back.samples, x, atol=1 / 32768)

    def test_raw_float(self, tmp_path):
        x = np.linspace(-1, 1, 64)
        write_raw_f32(tmp_path / "a.f32", AudioClip(x, 8000))
        back = load_audio(tmp_path / "a.f32", 8000)
        np.testing.assert_allclose(back.samples, x, atol=1e-7)
        with pytest.raises(ValueError):
            load_audio(tmp_path / "a.f32")
