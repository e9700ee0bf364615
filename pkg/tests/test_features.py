import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from astspoof import features as F
from astspoof.audio_io import AudioClip

from conftest import FS, sine


@pytest.mark.parametrize("seconds,frames", [(1.0, 100), (10.0, 1000), (0.25, 25)])
def test_shape_law(seconds, frames):
    spec = F.log_mel(AudioClip(np.random.default_rng(0).uniform(-0.5, 0.5, int(seconds * FS)), FS))
    assert (spec.frames, spec.n_mels) == (frames, 128)
    assert spec.data.dtype == np.float32 and np.all(np.isfinite(spec.data))


@settings(max_examples=60, deadline=None)
@given(n=st.integers(160, 20000))
def test_frames_is_ceil_of_samples_over_hop(n):
    spec = F.log_mel(AudioClip(np.full(n, 0.1), FS))
    assert spec.frames == math.ceil(n / 160)


def test_silence_is_constant_log_floor():
    spec = F.log_mel(AudioClip(np.zeros(FS), FS))
    assert np.all(spec.data == np.float32(math.log(1e-10)))


def test_rate_and_length_errors():
    with pytest.raises(F.SampleRateError):
        F.log_mel(AudioClip(np.zeros(8000), 8000))
    with pytest.raises(F.TooShortError):
        F.log_mel(AudioClip(np.zeros(159), FS))


def naive_mel_energy(x, cfg):
    win, hop, nfft = cfg.win_length, cfg.hop_length, cfg.fft_size
    padded = np.pad(x, (win // 2, win // 2), mode="reflect")
    n = np.arange(win)
    hamming = 0.54 - 0.46 * np.cos(2 * np.pi * n / (win - 1))
    k = np.arange(nfft // 2 + 1)
    dft = np.exp(-2j * np.pi * np.outer(k, n) / nfft)
    fb = F.mel_filterbank(cfg.n_mels, nfft, FS, cfg.fmin_hz, cfg.fmax_hz)
    total = 0.0
    for t in range(math.ceil(x.size / hop)):
        frame = padded[t * hop: t * hop + win] * hamming
        total += float(np.sum(fb @ np.abs(dft @ frame) ** 2))
    return total


@pytest.mark.parametrize("freq", [250.0, 1000.0, 3100.0, 7000.0])
def test_mel_energy_matches_naive_dft(freq):
    cfg = F.FeatureConfig()
    x = sine(freq, 0.2, amp=1.0).samples
    ours = float(np.sum(np.exp(F.log_mel(AudioClip(x, FS), cfg).data.astype(np.float64)) - 1e-10))
    ref = naive_mel_energy(x, cfg)
    assert abs(10 * math.log10(ours / ref)) < 3.0
    assert abs(ours / ref - 1) < 1e-4


def test_filterbank_invariants():
    fb = F.mel_filterbank(128, 512, FS, 0.0, 8000.0)
    assert fb.shape == (128, 257)
    assert np.all(fb >= 0)
    assert np.all(fb.sum(axis=1) > 0)
    # every bin strictly inside (fmin, fmax) is covered by some filter
    assert np.all(fb[:, 1:-1].sum(axis=0) > 0)
    # neighbours share support
    for i in range(127):
        assert np.any((fb[i] > 0) & (fb[i + 1] > 0))


def test_filterbank_peaks_sit_on_mel_centres():
    fb = F.mel_filterbank(40, 512, FS, 0.0, 8000.0)
    centres = F.mel_to_hz(np.linspace(0, F.hz_to_mel(8000), 42))[1:-1]
    peak_hz = np.argmax(fb, axis=1) * FS / 512
    assert np.all(np.abs(peak_hz - centres) <= FS / 512)


def test_mel_scale_round_trip():
    f = np.linspace(0, 8000, 50)
    np.testing.assert_allclose(F.mel_to_hz(F.hz_to_mel(f)), f, atol=1e-9)
    assert F.hz_to_mel(700.0) == pytest.approx(2595 * math.log10(2))


def test_tone_energy_lands_in_right_band():
    spec = F.log_mel(sine(2000.0, amp=0.8))
    centres = F.mel_to_hz(np.linspace(0, F.hz_to_mel(8000), 130))[1:-1]
    band = int(np.argmax(spec.data[50]))
    assert abs(centres[band] - 2000.0) < 60


def test_log_mel_deterministic_across_threads():
    clip = AudioClip(np.random.default_rng(4).uniform(-1, 1, FS), FS)
    ref = F.log_mel(clip).data
    results = [None] * 4

    def run(i):
        results[i] = F.log_mel(clip).data

    threads = [threading.Thread(target=run, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(np.array_equal(r, ref) for r in results)


def test_normalize():
    spec = F.Spectrogram(np.random.default_rng(0).standard_normal((10, 128)).astype(np.float32))
    assert np.array_equal(F.normalize(spec, 0.0, 1.0).data, spec.data)
    const = F.Spectrogram(np.full((5, 128), 3.5, np.float32))
    assert not F.normalize(const, 3.5, 1.0).data.any()
    for bad in (0.0, -1.0):
        with pytest.raises(F.FeatureError):
            F.normalize(spec, 0.0, bad)


@settings(max_examples=30, deadline=None)
@given(sizes=st.lists(st.integers(1, 60), min_size=1, max_size=8), seed=st.integers(0, 1000))
def test_streaming_stats_match_two_pass(sizes, seed):
    rng = np.random.default_rng(seed)
    specs = [F.Spectrogram((rng.standard_normal((n, 128)) * 4 - 11).astype(np.float32))
             for n in sizes]
    acc = F.RunningStats()
    for s in specs:
        acc.update(s)
    allv = np.concatenate([s.data.astype(np.float64).ravel() for s in specs])
    mean = allv.sum() / allv.size
    std = math.sqrt(((allv - mean) ** 2).sum() / allv.size)
    assert abs(acc.mean - mean) < 1e-6 and abs(acc.std - std) < 1e-6


def test_feature_cache_round_trip(tmp_path):
    spec = F.log_mel(AudioClip(np.random.default_rng(2).uniform(-1, 1, 4000), FS))
    F.save_features(tmp_path / "x.feat", spec)
    raw = (tmp_path / "x.feat").read_bytes()
    assert raw[:8] == b"ASTFEAT1"
    assert int.from_bytes(raw[8:12], "little") == 1
    assert int.from_bytes(raw[12:16], "little") == 25
    assert int.from_bytes(raw[16:20], "little") == 128
    assert len(raw) == 20 + 25 * 128 * 4
    assert np.array_equal(F.load_features(tmp_path / "x.feat").data, spec.data)


@pytest.mark.parametrize("mutate", [lambda b: b[:10], lambda b: b[:-4],
                                    lambda b: b"XSTFEAT1" + b[8:]])
def test_feature_cache_rejects_bad_files(mutate):
    spec = F.Spectrogram(np.zeros((3, 128), np.float32))
    with pytest.raises(F.FeatureError):
        F.decode_features(mutate(F.encode_features(spec)))


def test_config_invariants():
    cfg = F.FeatureConfig()
    assert (cfg.win_length, cfg.hop_length) == (400, 160)
    with pytest.raises(F.FeatureError):
        F.FeatureConfig(window_ms=10.0, hop_ms=10.0)
    with pytest.raises(F.FeatureError):
        F.FeatureConfig(n_mels=300)
