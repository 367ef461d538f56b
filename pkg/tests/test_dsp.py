import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hearbc import dsp
from hearbc.dsp import MultiChannelWaveform, Waveform


# -- independent oracles -------------------------------------------------------

def elementwise_mean_oracle(channels):
    out = []
    for i in range(len(channels[0])):
        total = 0.0
        for ch in channels:
            total += ch[i]
        out.append(total / len(channels))
    return np.array(out)


def direct_dft_power(frame, n_fft):
    """O(N^2) DFT power of a zero-padded frame, bins 0..n_fft/2."""
    padded = np.zeros(n_fft)
    padded[: len(frame)] = frame
    n = np.arange(n_fft)
    out = np.empty(n_fft // 2 + 1)
    for k in range(n_fft // 2 + 1):
        re = np.sum(padded * np.cos(2 * np.pi * k * n / n_fft))
        im = -np.sum(padded * np.sin(2 * np.pi * k * n / n_fft))
        out[k] = re * re + im * im
    return out


def naive_filterbank(n_fft, n_mels, sr, fmin, fmax):
    def mel(f):
        return 2595.0 * math.log10(1.0 + f / 700.0)

    def inv(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    lo, hi = mel(fmin), mel(fmax)
    edges = [inv(lo + (hi - lo) * i / (n_mels + 1)) for i in range(n_mels + 2)]
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(n_mels):
        a, b, c = edges[m], edges[m + 1], edges[m + 2]
        for k in range(n_fft // 2 + 1):
            f = k * sr / n_fft
            if a < f <= b:
                fb[m, k] = (f - a) / (b - a)
            elif b < f < c:
                fb[m, k] = (c - f) / (c - b)
    return fb


def hann_oracle(n):
    return np.array([0.5 - 0.5 * math.cos(2 * math.pi * i / n) for i in range(n)])


def brute_force_log_mel(x):
    """Direct-DFT log-mel (pre z-score) of an unpadded 16 kHz clip."""
    fb = naive_filterbank(512, 80, 16000, 50.0, 8000.0)
    win = hann_oracle(400)
    n_frames = 1 + (len(x) - 400) // 160
    cols = []
    for i in range(n_frames):
        frame = x[i * 160: i * 160 + 400] * win
        cols.append(fb @ direct_dft_power(frame, 512))
    return np.log(np.stack(cols, axis=1) + 1e-6)


def tone(freq, n, rate, amp=1.0, phase=0.0):
    t = np.arange(n) / rate
    return amp * np.sin(2 * np.pi * freq * t + phase)


# -- average_channels ----------------------------------------------------------

def test_average_identical_channels_is_identity():
    w = np.random.default_rng(0).uniform(-1, 1, 1000)
    out = dsp.average_channels(MultiChannelWaveform(np.stack([w] * 4), 32000))
    np.testing.assert_allclose(out.samples, w, rtol=0, atol=1e-15)
    assert out.sample_rate == 32000


def test_average_constant_channels():
    m = np.stack([np.full(100, v) for v in (0.2, 0.4, 0.6, 0.8)])
    out = dsp.average_channels(MultiChannelWaveform(m, 32000))
    np.testing.assert_allclose(out.samples, 0.5, atol=1e-15)


def test_average_matches_elementwise_oracle():
    chans = np.random.default_rng(1).uniform(-1, 1, (4, 500))
    out = dsp.average_channels(MultiChannelWaveform(chans, 32000))
    np.testing.assert_allclose(out.samples, elementwise_mean_oracle(chans), atol=1e-12)


def test_average_zero_channels_rejected():
    with pytest.raises(dsp.InvalidInputError):
        dsp.average_channels(MultiChannelWaveform(np.zeros((0, 10)), 32000))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_average_is_linear(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 4, 64))
    lhs = dsp.average_channels(MultiChannelWaveform(alpha * a + beta * b, 32000)).samples
    rhs = (alpha * dsp.average_channels(MultiChannelWaveform(a, 32000)).samples
           + beta * dsp.average_channels(MultiChannelWaveform(b, 32000)).samples)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


# -- decimation ----------------------------------------------------------------

def test_decimate_constant_passes():
    out = dsp.decimate_to_16k(Waveform(np.full(64000, 0.3), 32000))
    assert len(out) == 32000 and out.sample_rate == 16000
    inner = out.samples[64:-64]
    assert np.max(np.abs(inner - 0.3)) < 1e-3


def test_decimate_passband_tone_fft_peak():
    x = tone(1000, 64000, 32000, amp=0.5)
    out = dsp.decimate_to_16k(Waveform(x, 32000)).samples
    spec = np.abs(np.fft.rfft(out)) * 2 / len(out)
    freqs = np.fft.rfftfreq(len(out), 1 / 16000)
    peak = np.argmax(spec)
    assert freqs[peak] == pytest.approx(1000.0)
    assert spec[peak] == pytest.approx(0.5, rel=0.01)


def test_decimate_stopband_tone_rejected():
    x = tone(15000, 64000, 32000)
    out = dsp.decimate_to_16k(Waveform(x, 32000)).samples
    rms_in = np.sqrt(np.mean(x ** 2))
    rms_out = np.sqrt(np.mean(out[64:-64] ** 2))
    assert rms_out < 0.05 * rms_in


def test_decimate_wrong_rate():
    with pytest.raises(dsp.UnsupportedRateError):
        dsp.decimate_to_16k(Waveform(np.zeros(100), 16000))


@pytest.mark.parametrize("n", [0, 1, 2, 999, 1000])
def test_decimate_length(n):
    assert len(dsp.decimate_to_16k(Waveform(np.ones(n), 32000))) == n // 2


def test_decimate_shift_consistency():
    x = np.random.default_rng(3).normal(size=4000)
    shifted = np.concatenate([np.zeros(2), x[:-2]])
    a = dsp.decimate_to_16k(Waveform(x, 32000)).samples
    b = dsp.decimate_to_16k(Waveform(shifted, 32000)).samples
    np.testing.assert_allclose(b[1 + 40: -40], a[40: -41], atol=1e-6)


def test_decimation_filter_shape():
    taps = dsp.decimation_filter()
    assert len(taps) == 63
    np.testing.assert_allclose(taps, taps[::-1])
    assert taps.sum() == pytest.approx(1.0)


# -- normalization -------------------------------------------------------------

def test_normalize_scaling():
    out = dsp.normalize_peak(Waveform(np.array([0.5, -0.25]), 16000))
    np.testing.assert_array_equal(out.samples, [1.0, -0.5])


def test_normalize_silence():
    out = dsp.normalize_peak(Waveform(np.zeros(16), 16000))
    np.testing.assert_array_equal(out.samples, np.zeros(16))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=50))
def test_normalize_peak_is_one(xs):
    x = np.array(xs)
    out = dsp.normalize_peak(Waveform(x, 16000)).samples
    if np.max(np.abs(x)) >= 1e-8:
        assert np.max(np.abs(out)) == 1.0
    else:
        np.testing.assert_array_equal(out, x)


# -- mel filterbank ------------------------------------------------------------

def test_mel_scale_values():
    assert dsp.hz_to_mel(700.0) == pytest.approx(781.17, abs=0.01)
    assert dsp.hz_to_mel(700.0) == pytest.approx(2595 * math.log10(2), abs=1e-9)
    assert dsp.hz_to_mel(0.0) == 0.0
    assert dsp.mel_to_hz(dsp.hz_to_mel(1234.5)) == pytest.approx(1234.5)


def test_default_filterbank_shape_and_rows():
    fb = dsp.mel_filterbank(512, 80, 16000, 50, 8000)
    assert fb.shape == (80, 257)
    assert np.all(fb.sum(axis=1) > 0)


def test_filterbank_matches_naive_construction():
    np.testing.assert_allclose(dsp.mel_filterbank(), naive_filterbank(512, 80, 16000, 50, 8000),
                               atol=1e-12)


def test_filterbank_covers_band():
    fb = dsp.mel_filterbank()
    freqs = np.arange(257) * 16000 / 512
    inside = (freqs > 50) & (freqs < 8000)
    assert np.all(fb[:, inside].sum(axis=0) > 0)


@pytest.mark.parametrize("kwargs", [
    dict(fmin=100, fmax=50),
    dict(fmin=-1, fmax=8000),
    dict(fmax=9000),
    dict(n_mels=1),
    dict(n_mels=400),
])
def test_filterbank_invalid(kwargs):
    with pytest.raises(dsp.InvalidInputError):
        dsp.mel_filterbank(**kwargs)


# -- log mel -------------------------------------------------------------------

def test_frame_count_two_seconds():
    assert dsp.frame_count(32000) == 198
    spec = dsp.log_mel_spectrogram(Waveform(np.random.default_rng(0).normal(size=32000), 16000))
    assert spec.shape == (80, 198)


def test_log_mel_zscore_stats():
    spec = dsp.log_mel_spectrogram(Waveform(np.random.default_rng(0).normal(size=32000), 16000))
    assert abs(spec.values.mean()) < 1e-5
    assert abs(spec.values.std() - 1.0) < 1e-5


def test_log_mel_left_pads_short_clips():
    x = np.random.default_rng(2).normal(size=5000)
    padded = np.concatenate([np.zeros(32000 - 5000), x])
    a = dsp.log_mel_spectrogram(Waveform(x, 16000)).values
    b = dsp.log_mel_spectrogram(Waveform(padded, 16000)).values
    np.testing.assert_array_equal(a, b)


def test_log_mel_empty_rejected():
    with pytest.raises(dsp.InvalidInputError):
        dsp.log_mel_spectrogram(Waveform(np.zeros(0), 16000))


def test_tone_peaks_at_nearest_mel_center():
    x = tone(440, 32000, 16000)
    spec = dsp.log_mel_spectrogram(Waveform(x, 16000), standardize=False).values
    centers = dsp.mel_center_frequencies()
    expected = int(np.argmin(np.abs(centers - 440)))
    assert int(np.argmax(spec.mean(axis=1))) == expected


def test_single_frame_matches_naive_dft():
    x = np.random.default_rng(5).normal(size=400)
    ours = dsp.mel_power(x)[:, 0]
    oracle = naive_filterbank(512, 80, 16000, 50, 8000) @ direct_dft_power(x * hann_oracle(400), 512)
    np.testing.assert_allclose(ours, oracle, rtol=1e-6)


@pytest.mark.parametrize("seed", range(3))
def test_log_mel_matches_brute_force_oracle(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=int(rng.integers(400, 1600)))
    ours = dsp.log_mel_spectrogram(Waveform(x, 16000), clip_samples=None, standardize=False).values
    np.testing.assert_allclose(ours, brute_force_log_mel(x), rtol=1e-6)


def test_zscore_constant_guard():
    np.testing.assert_array_equal(dsp.zscore(np.full((3, 4), 7.0)), np.zeros((3, 4)))


# -- full pipeline -------------------------------------------------------------

def test_process_clip_identical_channels_equals_mono_pipeline():
    x = tone(1000, 64000, 32000, amp=0.3)
    multi = dsp.process_clip(MultiChannelWaveform(np.stack([x] * 4), 32000)).values
    mono = dsp.log_mel_spectrogram(dsp.normalize_peak(dsp.decimate_to_16k(Waveform(x, 32000)))).values
    np.testing.assert_array_equal(multi, mono)


def test_process_clip_silence_is_zero():
    out = dsp.process_clip(MultiChannelWaveform(np.zeros((4, 64000)), 32000))
    assert out.shape == (80, 198)
    np.testing.assert_array_equal(out.values, 0.0)


def test_process_clip_is_composition_and_deterministic():
    m = MultiChannelWaveform(np.random.default_rng(9).uniform(-0.5, 0.5, (4, 64000)), 32000)
    manual = dsp.log_mel_spectrogram(
        dsp.normalize_peak(dsp.decimate_to_16k(dsp.average_channels(m))))
    a = dsp.process_clip(m)
    b = dsp.process_clip(MultiChannelWaveform(m.samples.copy(), 32000))
    assert a.values.tobytes() == manual.values.tobytes() == b.values.tobytes()


# -- persistence ---------------------------------------------------------------

def test_wav_round_trip(tmp_path):
    x = np.random.default_rng(0).uniform(-1, 1, (4, 3000))
    dsp.write_wav(tmp_path / "a.wav", MultiChannelWaveform(x, 32000))
    back = dsp.read_wav(tmp_path / "a.wav")
    assert back.sample_rate == 32000 and back.samples.shape == (4, 3000)
    assert np.max(np.abs(back.samples - x)) <= 2 ** -15


def test_spectrogram_round_trip(tmp_path):
    spec = dsp.log_mel_spectrogram(Waveform(np.random.default_rng(0).normal(size=32000), 16000))
    dsp.save_spectrogram(tmp_path / "s", spec)
    back = dsp.load_spectrogram(tmp_path / "s")
    assert back.shape == (80, 198)
    np.testing.assert_allclose(back.values, spec.values, atol=1e-6)
