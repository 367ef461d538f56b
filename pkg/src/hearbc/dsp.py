"""Contact-audio preprocessing.

Raw contact audio arrives as four channels at 32 kHz. The policy consumes a
z-scored log-mel spectrogram of a 2 s mono clip at 16 kHz, produced by

    average_channels -> decimate_to_16k -> normalize_peak -> log_mel_spectrogram

Everything here is a pure function of its inputs and runs in float64.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.io import wavfile

RAW_RATE = 32000
TARGET_RATE = 16000
CLIP_SECONDS = 2.0
CLIP_SAMPLES = int(TARGET_RATE * CLIP_SECONDS)  # 32000
RAW_CLIP_SAMPLES = int(RAW_RATE * CLIP_SECONDS)  # 64000

WIN_LENGTH = 400  # 25 ms
HOP_LENGTH = 160  # 10 ms
N_FFT = 512
N_MELS = 80
FMIN = 50.0
FMAX = 8000.0
LOG_OFFSET = 1e-6

DECIM_TAPS = 63
DECIM_CUTOFF = 7200.0

SILENCE_THRESHOLD = 1e-8
ZSCORE_MIN_STD = 1e-8


class InvalidInputError(ValueError):
    """Raised when an input violates a documented precondition."""


class UnsupportedRateError(InvalidInputError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise InvalidInputError(f"Waveform must be 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise InvalidInputError("Waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise InvalidInputError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.shape[0]


@dataclass(frozen=True)
class MultiChannelWaveform:
    samples: np.ndarray  # [channels, samples]
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 2:
            raise InvalidInputError(f"expected [channels, samples], got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise InvalidInputError("MultiChannelWaveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise InvalidInputError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    def __len__(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray  # [n_mels, frames]
    n_mels: int = N_MELS
    hop: int = HOP_LENGTH
    window: int = WIN_LENGTH
    source_rate: int = TARGET_RATE

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def average_channels(m: MultiChannelWaveform) -> Waveform:
    if m.n_channels < 1:
        raise InvalidInputError("cannot average a waveform with zero channels")
    return Waveform(m.samples.mean(axis=0), m.sample_rate)


@lru_cache(maxsize=None)
def decimation_filter(numtaps: int = DECIM_TAPS, cutoff: float = DECIM_CUTOFF,
                      fs: int = RAW_RATE) -> np.ndarray:
    """Hamming windowed-sinc low-pass taps (unity DC gain)."""
    taps = signal.firwin(numtaps, cutoff, window="hamming", fs=fs)
    taps.setflags(write=False)
    return taps


def decimate_to_16k(w: Waveform) -> Waveform:
    """Low-pass at 7.2 kHz and keep every other sample.

    The filter is symmetric and the convolution is centred on each output
    sample, so there is no group delay.
    """
    if w.sample_rate != RAW_RATE:
        raise UnsupportedRateError(
            f"only 2:1 decimation from {RAW_RATE} Hz is supported, got {w.sample_rate} Hz")
    n_out = len(w) // 2
    if n_out == 0:
        return Waveform(np.zeros(0), TARGET_RATE)
    filtered = signal.oaconvolve(w.samples, decimation_filter(), mode="same")
    return Waveform(filtered[: 2 * n_out : 2], TARGET_RATE)


def normalize_peak(w: Waveform) -> Waveform:
    if len(w) == 0:
        return w
    peak = np.max(np.abs(w.samples))
    if peak < SILENCE_THRESHOLD:
        return w
    return Waveform(w.samples / peak, w.sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int = N_MELS, fmin: float = FMIN,
                           fmax: float = FMAX) -> np.ndarray:
    """Centre frequency (Hz) of each triangular filter."""
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    return edges[1:-1]


def mel_filterbank(n_fft: int = N_FFT, n_mels: int = N_MELS, sample_rate: int = TARGET_RATE,
                   fmin: float = FMIN, fmax: float = FMAX) -> np.ndarray:
    """Triangular filters, peak weight 1, shape [n_mels, n_fft // 2 + 1]."""
    if n_mels < 2:
        raise InvalidInputError(f"n_mels must be >= 2, got {n_mels}")
    if n_fft < 2:
        raise InvalidInputError(f"n_fft must be >= 2, got {n_fft}")
    if not (0 <= fmin < fmax <= sample_rate / 2):
        raise InvalidInputError(
            f"need 0 <= fmin < fmax <= sample_rate/2, got fmin={fmin}, fmax={fmax}, sr={sample_rate}")
    return _mel_filterbank(n_fft, n_mels, sample_rate, float(fmin), float(fmax))


@lru_cache(maxsize=16)
def _mel_filterbank(n_fft, n_mels, sample_rate, fmin, fmax) -> np.ndarray:
    bin_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_freqs - lower) / (center - lower)
    falling = (upper - bin_freqs) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.sum(axis=1) == 0)
    if empty.size:
        raise InvalidInputError(
            f"mel filters {empty.tolist()} cover no FFT bin; use fewer mels or a larger n_fft")
    fb.setflags(write=False)
    return fb


def frame_count(n_samples: int, window: int = WIN_LENGTH, hop: int = HOP_LENGTH) -> int:
    if n_samples < window:
        return 0
    return 1 + (n_samples - window) // hop


@lru_cache(maxsize=4)
def _hann(n: int) -> np.ndarray:
    win = signal.get_window("hann", n, fftbins=True)
    win.setflags(write=False)
    return win


def mel_power(samples: np.ndarray, sample_rate: int = TARGET_RATE) -> np.ndarray:
    """Mel-projected power spectrogram [n_mels, frames], no padding, no log."""
    x = np.asarray(samples, dtype=np.float64)
    n_frames = frame_count(len(x))
    if n_frames == 0:
        raise InvalidInputError(f"need at least {WIN_LENGTH} samples, got {len(x)}")
    frames = np.lib.stride_tricks.sliding_window_view(x, WIN_LENGTH)[::HOP_LENGTH][:n_frames]
    spectrum = np.fft.rfft(frames * _hann(WIN_LENGTH), n=N_FFT, axis=1)
    power = spectrum.real ** 2 + spectrum.imag ** 2
    return mel_filterbank(N_FFT, N_MELS, sample_rate, FMIN, FMAX) @ power.T


def zscore(values: np.ndarray) -> np.ndarray:
    std = values.std()
    if std < ZSCORE_MIN_STD:
        return np.zeros_like(values)
    return (values - values.mean()) / std


def log_mel_spectrogram(w: Waveform, clip_samples: int | None = CLIP_SAMPLES,
                        standardize: bool = True) -> MelSpectrogram:
    """Log-mel spectrogram of a 16 kHz clip.

    Clips shorter than ``clip_samples`` are left-padded with zeros; longer
    clips keep their most recent ``clip_samples`` samples. Pass
    ``clip_samples=None`` to use the waveform length as is.
    """
    if w.sample_rate != TARGET_RATE:
        raise UnsupportedRateError(f"expected {TARGET_RATE} Hz input, got {w.sample_rate} Hz")
    if len(w) == 0:
        raise InvalidInputError("cannot compute a spectrogram of an empty waveform")
    x = w.samples
    if clip_samples is not None:
        if len(x) < clip_samples:
            x = np.concatenate([np.zeros(clip_samples - len(x)), x])
        else:
            x = x[len(x) - clip_samples:]
    values = np.log(mel_power(x) + LOG_OFFSET)
    if standardize:
        values = zscore(values)
    return MelSpectrogram(values)


def process_clip(m: MultiChannelWaveform) -> MelSpectrogram:
    """Full pipeline from raw 4-channel 32 kHz audio to the encoder input."""
    return log_mel_spectrogram(normalize_peak(decimate_to_16k(average_channels(m))))


# -- persistence ---------------------------------------------------------------

def to_pcm16(samples: np.ndarray) -> np.ndarray:
    clipped = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0 - 2.0 ** -15)
    return np.round(clipped * 32768.0).astype(np.int16)


def from_pcm16(pcm: np.ndarray) -> np.ndarray:
    return pcm.astype(np.float64) / 32768.0


def write_wav(path, audio: Waveform | MultiChannelWaveform) -> None:
    data = audio.samples if audio.samples.ndim == 1 else audio.samples.T
    wavfile.write(str(path), audio.sample_rate, to_pcm16(data))


def read_wav(path) -> MultiChannelWaveform:
    """Always returns a [channels, samples] waveform, mono files included."""
    rate, data = wavfile.read(str(path))
    if data.dtype != np.int16:
        raise InvalidInputError(f"{path}: expected PCM16, got {data.dtype}")
    if data.ndim == 1:
        data = data[:, None]
    return MultiChannelWaveform(from_pcm16(data.T), int(rate))


def save_spectrogram(path, spec: MelSpectrogram) -> None:
    """Write ``<path>.npy`` plus a ``<path>.json`` sidecar with the constants used."""
    path = Path(path)
    np.save(path.with_suffix(".npy"), spec.values.astype(np.float32))
    sidecar = {
        "shape": list(spec.values.shape),
        "dtype": "float32",
        "n_mels": spec.n_mels,
        "hop": spec.hop,
        "window": spec.window,
        "n_fft": N_FFT,
        "fmin": FMIN,
        "fmax": FMAX,
        "log_offset": LOG_OFFSET,
        "source_rate": spec.source_rate,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))


def load_spectrogram(path) -> MelSpectrogram:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    values = np.load(path.with_suffix(".npy"))
    if list(values.shape) != meta["shape"]:
        raise InvalidInputError(f"{path}: array shape {values.shape} != sidecar {meta['shape']}")
    return MelSpectrogram(values.astype(np.float64), meta["n_mels"], meta["hop"],
                          meta["window"], meta["source_rate"])
