"""128-band log-mel frontend and the on-disk feature cache."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .audio_io import CANONICAL_RATE, AudioClip

FEATURE_MAGIC = b"ASTFEAT1"
FEATURE_VERSION = 1


class FeatureError(ValueError):
    pass


class SampleRateError(FeatureError):
    pass


class TooShortError(FeatureError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 128
    fft_size: int = 512
    fmin_hz: float = 0.0
    fmax_hz: float = 8000.0
    log_floor: float = 1e-10
    sample_rate_hz: int = CANONICAL_RATE

    def __post_init__(self):
        if self.window_ms <= self.hop_ms:
            raise FeatureError("window must be longer than hop")
        if self.n_mels > self.fft_size // 2:
            raise FeatureError("too many mel bands for fft size")
        if self.win_length > self.fft_size:
            raise FeatureError("window longer than fft size")

    @property
    def win_length(self) -> int:
        return int(round(self.window_ms * self.sample_rate_hz / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.hop_ms * self.sample_rate_hz / 1000.0))


@dataclass
class Spectrogram:
    data: np.ndarray  # frames x n_mels

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_mels(self) -> int:
        return self.data.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(n_mels, fft_size, sample_rate_hz, fmin_hz, fmax_hz):
    """Triangular HTK-mel filters, shape (n_mels, fft_size // 2 + 1).

    Each triangle's slopes are at least one FFT bin wide, so the narrow
    low-frequency filters still land on a bin instead of vanishing.
    """
    bins = np.arange(fft_size // 2 + 1) * sample_rate_hz / fft_size
    df = sample_rate_hz / fft_size
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin_hz), hz_to_mel(fmax_hz), n_mels + 2))
    lower, center, upper = edges[:-2], edges[1:-1], edges[2:]
    left = np.maximum(center - lower, df)[:, None]
    right = np.maximum(upper - center, df)[:, None]
    rel = bins[None, :] - center[:, None]
    w = np.where(rel < 0, 1.0 + rel / left, 1.0 - rel / right)
    w = np.clip(w, 0.0, None)
    w.setflags(write=False)
    return w


def frame_count(n_samples: int, hop: int) -> int:
    return -(-n_samples // hop)


def power_spectrogram(x: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    win, hop = cfg.win_length, cfg.hop_length
    n_frames = frame_count(x.size, hop)
    half = win // 2
    padded = np.pad(x, (half, half), mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(padded, win)[::hop][:n_frames]
    spec = np.fft.rfft(frames * np.hamming(win), n=cfg.fft_size, axis=1)
    return spec.real ** 2 + spec.imag ** 2


def log_mel(clip: AudioClip, cfg: FeatureConfig = FeatureConfig()) -> Spectrogram:
    if clip.sample_rate_hz != cfg.sample_rate_hz:
        raise SampleRateError(
            f"expected {cfg.sample_rate_hz} Hz input, got {clip.sample_rate_hz} Hz; resample first")
    if clip.samples.size < cfg.hop_length:
        raise TooShortError(f"clip shorter than one hop ({cfg.hop_length} samples)")
    power = power_spectrogram(np.asarray(clip.samples, dtype=np.float64), cfg)
    fb = mel_filterbank(cfg.n_mels, cfg.fft_size, cfg.sample_rate_hz,
                        cfg.fmin_hz, cfg.fmax_hz)
    mel = power @ fb.T
    return Spectrogram(np.log(mel + cfg.log_floor).astype(np.float32))


def normalize(spec: Spectrogram, mean: float, std: float) -> Spectrogram:
    if not std > 0:
        raise FeatureError(f"std must be positive, got {std}")
    return Spectrogram(((spec.data - mean) / std).astype(spec.data.dtype))


class RunningStats:
    """Streaming scalar mean/std over every entry of many spectrograms."""

    def __init__(self):
        self.count = 0
        self.mean = 0.0
        self._m2 = 0.0

    def update(self, spec: Spectrogram):
        x = np.asarray(spec.data, dtype=np.float64).ravel()
        n = x.size
        if n == 0:
            return
        b_mean = float(x.mean())
        b_m2 = float(((x - b_mean) ** 2).sum())
        total = self.count + n
        delta = b_mean - self.mean
        self.mean += delta * n / total
        self._m2 += b_m2 + delta * delta * self.count * n / total
        self.count = total

    @property
    def std(self) -> float:
        if self.count == 0:
            return 0.0
        return math.sqrt(self._m2 / self.count)


# ---------------------------------------------------------------------------
# feature cache: magic, u32 version, u32 frames, u32 n_mels, then f32 LE rows
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<8sIII")


def encode_features(spec: Spectrogram) -> bytes:
    header = _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, spec.frames, spec.n_mels)
    return header + np.ascontiguousarray(spec.data, dtype="<f4").tobytes()


def decode_features(data: bytes) -> Spectrogram:
    if len(data) < _HEADER.size:
        raise FeatureError("feature file truncated")
    magic, version, frames, n_mels = _HEADER.unpack_from(data, 0)
    if magic != FEATURE_MAGIC or version != FEATURE_VERSION:
        raise FeatureError("not a feature cache file")
    body = data[_HEADER.size:]
    if len(body) != frames * n_mels * 4:
        raise FeatureError("feature payload size mismatch")
    arr = np.frombuffer(body, dtype="<f4").reshape(frames, n_mels)
    return Spectrogram(arr.astype(np.float32))


def save_features(path, spec: Spectrogram) -> None:
    Path(path).write_bytes(encode_features(spec))


def load_features(path) -> Spectrogram:
    return decode_features(Path(path).read_bytes())
