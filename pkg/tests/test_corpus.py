"""WAV ingestion, mel features, cropping, synthesis, and splits."""

import json
import struct

import numpy as np
import pytest

from stylesearch import corpus as cp
from stylesearch.corpus import (
    SAMPLE_RATE,
    Corpus,
    StratificationError,
    StyleRegistry,
    SyntheticCorpusSpec,
    TooShortError,
    UnsupportedChannelsError,
    Utterance,
    WavFormatError,
    crop_leading,
    crop_to_max,
    load_corpus,
    load_wav,
    mel_features,
    save_corpus,
    save_wav,
    split_corpus,
    synth_corpus,
)


def write_pcm16(path, samples, rate=SAMPLE_RATE, channels=1):
    pcm = np.asarray(samples, dtype="<i2")
    body = pcm.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(body)) + b"WAVE"
    header += b"fmt " + struct.pack(
        "<IHHIIHH", 16, 1, channels, rate, rate * 2 * channels, 2 * channels, 16
    )
    header += b"data" + struct.pack("<I", len(body))
    path.write_bytes(header + body)


def write_float32(path, samples, rate=SAMPLE_RATE):
    arr = np.asarray(samples, dtype="<f4")
    body = arr.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(body)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, 3, 1, rate, rate * 4, 4, 32)
    header += b"data" + struct.pack("<I", len(body))
    path.write_bytes(header + body)


class TestLoadWav:
    def test_silence_second(self, tmp_path):
        path = tmp_path / "quiet.wav"
        write_pcm16(path, np.zeros(16000, dtype=np.int16))
        u = load_wav(path)
        assert u.id == "quiet"
        assert u.samples.shape == (16000,)
        assert u.duration_s == 1.0
        np.testing.assert_array_equal(u.samples, 0.0)

    def test_8khz_resamples_to_double_length(self, tmp_path):
        path = tmp_path / "low.wav"
        write_pcm16(path, (np.sin(np.arange(8000) / 20) * 10000).astype(np.int16), rate=8000)
        u = load_wav(path)
        assert u.samples.shape == (16000,)
        assert abs(u.duration_s - 1.0) <= 1.0 / SAMPLE_RATE

    def test_int16_scaling(self, tmp_path):
        # frozen oracle: 16384 / 32768 = 0.5
        path = tmp_path / "half.wav"
        write_pcm16(path, np.full(100, 16384, dtype=np.int16))
        u = load_wav(path)
        np.testing.assert_allclose(u.samples, 0.5, atol=1e-4)

    def test_float32_payload(self, tmp_path):
        path = tmp_path / "f32.wav"
        write_float32(path, np.full(64, 0.25, dtype=np.float32))
        u = load_wav(path)
        np.testing.assert_allclose(u.samples, 0.25, atol=1e-6)

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "bad.wav"
        path.write_bytes(b"OGGS" + b"\x00" * 64)
        with pytest.raises(WavFormatError):
            load_wav(path)

    def test_stereo_rejected(self, tmp_path):
        path = tmp_path / "stereo.wav"
        write_pcm16(path, np.zeros(200, dtype=np.int16), channels=2)
        with pytest.raises(UnsupportedChannelsError):
            load_wav(path)

    def test_unsupported_bit_depth(self, tmp_path):
        path = tmp_path / "odd.wav"
        body = b"\x00" * 300
        header = b"RIFF" + struct.pack("<I", 36 + len(body)) + b"WAVE"
        header += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, 16000, 16000 * 3, 3, 24)
        header += b"data" + struct.pack("<I", len(body))
        path.write_bytes(header + body)
        with pytest.raises(WavFormatError):
            load_wav(path)

    def test_save_load_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        samples = (rng.uniform(-0.6, 0.6, 5000)).astype(np.float32)
        path = tmp_path / "rt.wav"
        save_wav(path, samples)
        u = load_wav(path)
        np.testing.assert_allclose(u.samples, samples, atol=1.0 / 32767)

    def test_resampling_preserves_duration(self, tmp_path):
        for rate in (8000, 22050, 44100, 48000):
            n = int(rate * 0.73)
            path = tmp_path / f"r{rate}.wav"
            write_pcm16(path, np.zeros(n, dtype=np.int16), rate=rate)
            u = load_wav(path)
            assert abs(u.duration_s - n / rate) <= 1.0 / SAMPLE_RATE


class TestMelFeatures:
    def test_frame_count_one_second(self):
        # frozen: floor((16000 - 400) / 160) + 1 = 98
        u = Utterance("u", np.zeros(16000, dtype=np.float32))
        feats = mel_features(u)
        assert feats.frames.shape == (98, 40)

    def test_zero_signal_hits_log_floor(self):
        u = Utterance("u", np.zeros(8000, dtype=np.float32))
        feats = mel_features(u)
        np.testing.assert_allclose(feats.frames, np.log(1e-6), atol=1e-12)

    def test_too_short_raises(self):
        u = Utterance("u", np.zeros(300, dtype=np.float32))
        with pytest.raises(TooShortError):
            mel_features(u)

    def test_tone_energy_against_dft_oracle(self):
        # Brute-force DFT + filterbank oracle on one 1 kHz frame.
        t = np.arange(400) / SAMPLE_RATE
        frame = (0.4 * np.sin(2 * np.pi * 1000 * t)).astype(np.float64)
        windowed = frame * np.hanning(400)
        n_fft = 512
        dft = np.zeros(n_fft // 2 + 1, dtype=complex)
        for k in range(n_fft // 2 + 1):
            for n in range(400):
                dft[k] += windowed[n] * np.exp(-2j * np.pi * k * n / n_fft)
        oracle_power = np.abs(dft) ** 2
        fb = cp.mel_filterbank(40, n_fft)
        oracle_logmel = np.log(oracle_power @ fb.T + 1e-6)

        u = Utterance("tone", np.tile(frame, 3).astype(np.float32))
        feats = mel_features(u)
        np.testing.assert_allclose(feats.frames[0], oracle_logmel, rtol=1e-6, atol=1e-9)

        # energy concentrates in the channels whose triangles cover 1 kHz
        peak_channel = int(np.argmax(feats.frames[0]))
        bins = np.fft.rfftfreq(n_fft, d=1.0 / SAMPLE_RATE)
        covered = fb[peak_channel] > 0
        assert bins[covered].min() <= 1000 <= bins[covered].max()

    def test_monotone_in_energy(self):
        rng = np.random.default_rng(2)
        quiet = rng.standard_normal(4000) * 0.05
        u_quiet = Utterance("q", quiet.astype(np.float32))
        u_loud = Utterance("l", (quiet * 4).astype(np.float32))
        f_quiet = mel_features(u_quiet).frames
        f_loud = mel_features(u_loud).frames
        assert np.all(f_loud >= f_quiet)

    def test_finite_for_finite_input(self):
        rng = np.random.default_rng(3)
        u = Utterance("n", rng.uniform(-1, 1, 12345).astype(np.float32))
        assert np.all(np.isfinite(mel_features(u).frames))


class TestCrop:
    def test_under_limit_unchanged(self):
        u = Utterance("u", np.zeros(5 * SAMPLE_RATE, dtype=np.float32))
        rng = np.random.default_rng(0)
        assert crop_to_max(u, 8.0, rng) is u

    def test_crops_to_exactly_eight_seconds(self):
        u = Utterance("u", np.zeros(10 * SAMPLE_RATE, dtype=np.float32))
        out = crop_to_max(u, 8.0, np.random.default_rng(0))
        assert out.duration_s == 8.0

    def test_same_seed_same_offsets(self):
        rng1 = np.random.default_rng(5)
        rng2 = np.random.default_rng(5)
        samples = np.arange(10 * SAMPLE_RATE, dtype=np.float32)
        u = Utterance("u", samples)
        for _ in range(5):
            a = crop_to_max(u, 2.0, rng1)
            b = crop_to_max(u, 2.0, rng2)
            np.testing.assert_array_equal(a.samples, b.samples)

    def test_aligned_crop_matches_frame_slice(self):
        # audio-domain crop then features == features then frame slice
        rng = np.random.default_rng(7)
        u = Utterance("u", rng.uniform(-0.5, 0.5, 3 * SAMPLE_RATE).astype(np.float32))
        hop = 160
        cropped = crop_to_max(u, 1.0, np.random.default_rng(3), align=hop)
        offset = int(np.where(u.samples == cropped.samples[0])[0][0]) // hop
        full = mel_features(u).frames
        direct = mel_features(cropped).frames
        np.testing.assert_array_equal(full[offset:offset + direct.shape[0]], direct)

    def test_leading_crop_deterministic(self):
        u = Utterance("u", np.arange(3 * SAMPLE_RATE, dtype=np.float32))
        out = crop_leading(u, 1.0)
        np.testing.assert_array_equal(out.samples, u.samples[:SAMPLE_RATE])


def small_spec(**kw):
    defaults = dict(
        styles=StyleRegistry(cp.DEFAULT_STYLE_NAMES[:6]),
        utterances_per_style=10,
        duration_range_s=(0.6, 1.2),
        separability=1.0,
        seed=3,
    )
    defaults.update(kw)
    return SyntheticCorpusSpec(**defaults)


def centroid_accuracy(c: Corpus, train_per_style: int = 5) -> float:
    feats = {u.id: mel_features(u).frames.mean(axis=0) for u in c.utterances}
    groups = c.by_style()
    cents = {
        sid: np.mean([feats[u.id] for u in us[:train_per_style]], axis=0)
        for sid, us in groups.items()
    }
    hits = total = 0
    for sid, us in groups.items():
        for u in us[train_per_style:]:
            pred = min(cents, key=lambda s: np.linalg.norm(cents[s] - feats[u.id]))
            hits += pred == sid
            total += 1
    return hits / total


class TestSynthCorpus:
    def test_counts(self):
        c = synth_corpus(small_spec())
        assert len(c) == 60
        assert all(len(us) == 10 for us in c.by_style().values())

    def test_full_registry_counts(self):
        c = synth_corpus(
            SyntheticCorpusSpec(utterances_per_style=3, duration_range_s=(0.5, 1.0), seed=1)
        )
        assert len(c) == 66
        assert len(c.by_style()) == 22

    def test_deterministic_given_seed(self):
        a = synth_corpus(small_spec())
        b = synth_corpus(small_spec())
        assert [u.id for u in a.utterances] == [u.id for u in b.utterances]
        for ua, ub in zip(a.utterances, b.utterances):
            np.testing.assert_array_equal(ua.samples, ub.samples)

    def test_full_separability_is_centroid_separable(self):
        c = synth_corpus(small_spec(separability=1.0))
        assert centroid_accuracy(c) == 1.0

    def test_separability_monotone_over_seeds(self):
        for seed in (11, 12, 13):
            acc_low = centroid_accuracy(synth_corpus(small_spec(separability=0.3, seed=seed)))
            acc_high = centroid_accuracy(synth_corpus(small_spec(separability=0.95, seed=seed)))
            assert acc_high >= acc_low

    def test_durations_within_range(self):
        c = synth_corpus(small_spec())
        for u in c.utterances:
            assert 0.6 - 1e-6 <= u.duration_s <= 1.2 + 1e-6

    def test_invalid_spec_rejected(self):
        with pytest.raises(ValueError):
            small_spec(duration_range_s=(0.1, 1.0))
        with pytest.raises(ValueError):
            small_spec(separability=0.0)


class TestSplit:
    def test_48_6_6_per_style(self):
        c = synth_corpus(small_spec(utterances_per_style=60, duration_range_s=(0.5, 0.7)))
        tr, va, te = split_corpus(c, (0.8, 0.1, 0.1), 0)
        for part, expect in ((tr, 48), (va, 6), (te, 6)):
            assert all(len(us) == expect for us in part.by_style().values())

    def test_partition_properties(self):
        c = synth_corpus(small_spec())
        tr, va, te = split_corpus(c, (0.6, 0.2, 0.2), 1)
        ids = [tr.ids(), va.ids(), te.ids()]
        assert ids[0] | ids[1] | ids[2] == c.ids()
        assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])

    def test_stratified_within_one(self):
        c = synth_corpus(small_spec(utterances_per_style=11))
        tr, va, te = split_corpus(c, (0.7, 0.15, 0.15), 2)
        for part, frac in ((tr, 0.7), (va, 0.15), (te, 0.15)):
            for us in part.by_style().values():
                assert abs(len(us) - frac * 11) <= 1.0

    def test_too_few_utterances(self):
        c = synth_corpus(small_spec(utterances_per_style=2))
        with pytest.raises(StratificationError):
            split_corpus(c, (0.8, 0.1, 0.1), 0)

    def test_bad_fractions(self):
        c = synth_corpus(small_spec())
        with pytest.raises(ValueError):
            split_corpus(c, (0.8, 0.1, 0.2), 0)


class TestManifest:
    def test_round_trip(self, tmp_path):
        c = synth_corpus(small_spec(utterances_per_style=4))
        manifest_path = save_corpus(c, tmp_path / "corpus")
        doc = json.loads(manifest_path.read_text())
        assert set(doc) == c.ids()
        loaded, paths = load_corpus(manifest_path)
        assert loaded.ids() == c.ids()
        assert loaded.registry.names == c.registry.names
        by_id = {u.id: u for u in c.utterances}
        for u in loaded.utterances:
            assert u.style == by_id[u.id].style
            np.testing.assert_allclose(u.samples, by_id[u.id].samples, atol=1.5 / 32767)
            assert paths[u.id].endswith(f"{u.id}.wav")
