"""WAV loading/writing, resampling to the canonical rate, and corpus manifests."""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from . import kernels

CANONICAL_RATE = 16000
MIN_DURATION_S = 0.2
MAX_DURATION_S = 30.0

LABELS = ("bonafide", "spoof")
SPLITS = ("train", "validation", "test")
HUMAN = "human"


class AudioError(Exception):
    """Base class for audio loading failures."""


class WavFormatError(AudioError):
    pass


class UnsupportedCodecError(AudioError):
    pass


class EmptyAudioError(AudioError):
    pass


class ManifestError(ValueError):
    pass


class ManifestParseError(ManifestError):
    def __init__(self, lineno, msg):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class ManifestValidationError(ManifestError):
    pass


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int
    source_id: str = ""
    clipped: bool = False

    def __post_init__(self):
        if self.sample_rate_hz <= 0:
            raise ValueError("sample rate must be positive")
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise EmptyAudioError("clip needs at least one mono sample")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz

    def with_samples(self, samples: np.ndarray) -> "AudioClip":
        return replace(self, samples=samples)


# ---------------------------------------------------------------------------
# WAV
# ---------------------------------------------------------------------------


def _iter_chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise WavFormatError(f"chunk {cid!r} truncated")
        yield cid, body
        pos += 8 + size + (size & 1)


def decode_wav(data: bytes, source_id: str = "") -> AudioClip:
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError("not a RIFF/WAVE file")
    fmt = None
    payload = None
    for cid, body in _iter_chunks(data):
        if cid == b"fmt ":
            if len(body) < 16:
                raise WavFormatError("fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            payload = body
    if fmt is None or payload is None:
        raise WavFormatError("missing fmt or data chunk")
    code, channels, rate, _, block_align, bits = fmt
    if channels not in (1, 2):
        raise UnsupportedCodecError(f"{channels} channels not supported")
    if code == 1 and bits == 16:
        raw = np.frombuffer(payload[: len(payload) // 2 * 2], dtype="<i2")
        x = raw.astype(np.float64) / 32768.0
    elif code == 3 and bits == 32:
        raw = np.frombuffer(payload[: len(payload) // 4 * 4], dtype="<f4")
        x = raw.astype(np.float64)
    else:
        raise UnsupportedCodecError(f"format code {code} with {bits} bits")
    if rate <= 0:
        raise WavFormatError("sample rate is zero")
    x = x[: x.size // channels * channels].reshape(-1, channels)
    if x.shape[0] == 0:
        raise EmptyAudioError("no samples in data chunk")
    mono = x.mean(axis=1) if channels == 2 else x[:, 0].copy()
    if not np.all(np.isfinite(mono)):
        raise WavFormatError("non-finite samples")
    clipped = bool(np.any(np.abs(mono) > 1.0))
    if clipped:
        mono = np.clip(mono, -1.0, 1.0)
    return AudioClip(mono, int(rate), source_id, clipped)


def load_wav(path) -> AudioClip:
    path = Path(path)
    return decode_wav(path.read_bytes(), source_id=str(path))


def encode_wav(clip: AudioClip, encoding: str = "pcm16") -> bytes:
    x = np.asarray(clip.samples, dtype=np.float64)
    if encoding == "pcm16":
        q = np.clip(np.floor(x * 32768.0 + 0.5), -32768, 32767).astype("<i2")
        code, bits = 1, 16
    elif encoding == "float32":
        q = x.astype("<f4")
        code, bits = 3, 32
    else:
        raise UnsupportedCodecError(encoding)
    payload = q.tobytes()
    block = bits // 8
    fmt = struct.pack("<HHIIHH", code, 1, clip.sample_rate_hz,
                      clip.sample_rate_hz * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\x00"
    return b"RIFF" + struct.pack("<I", len(body)) + body


def write_wav(path, clip: AudioClip, encoding: str = "pcm16") -> None:
    Path(path).write_bytes(encode_wav(clip, encoding))


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def resample_array(x: np.ndarray, ratio: float, n_out: int | None = None) -> np.ndarray:
    if n_out is None:
        n_out = max(1, int(math.floor(x.size * ratio + 0.5)))
    return kernels.sinc_resample(x, ratio, n_out, half_width=32, beta=8.0)


def resample(clip: AudioClip, target_hz: int) -> AudioClip:
    """Windowed-sinc (Kaiser, beta 8, 32 taps per side) rate conversion."""
    if target_hz < 8000:
        raise ValueError("target rate must be at least 8000 Hz")
    if target_hz == clip.sample_rate_hz:
        return replace(clip, samples=clip.samples.copy())
    ratio = target_hz / clip.sample_rate_hz
    y = np.clip(resample_array(clip.samples, ratio), -1.0, 1.0)
    return AudioClip(y, int(target_hz), clip.source_id, clip.clipped)


def to_canonical(clip: AudioClip, target_hz: int = CANONICAL_RATE) -> AudioClip:
    return resample(clip, target_hz)


def check_duration(clip: AudioClip, lo: float = MIN_DURATION_S,
                   hi: float = MAX_DURATION_S) -> AudioClip:
    if not lo <= clip.duration_s <= hi:
        raise AudioError(
            f"{clip.source_id or 'clip'}: duration {clip.duration_s:.3f}s "
            f"outside [{lo}, {hi}] s")
    return clip


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SampleRecord:
    path: str
    label: str
    technology: str
    split: str

    def __post_init__(self):
        if self.label not in LABELS:
            raise ManifestValidationError(f"unknown label {self.label!r}")
        if self.split not in SPLITS:
            raise ManifestValidationError(f"unknown split {self.split!r}")
        if (self.label == "bonafide") != (self.technology == HUMAN):
            raise ManifestValidationError(
                f"{self.path}: label {self.label} incompatible with "
                f"technology {self.technology!r}")

    @property
    def is_spoof(self) -> bool:
        return self.label == "spoof"


def parse_manifest(text: str) -> list[SampleRecord]:
    records = []
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.rstrip("\r").split("\t")
        if len(fields) != 4:
            raise ManifestParseError(lineno, f"expected 4 tab-separated fields, got {len(fields)}")
        path, label, tech, split = fields
        if label not in LABELS:
            raise ManifestParseError(lineno, f"unknown label {label!r}")
        if split not in SPLITS:
            raise ManifestParseError(lineno, f"unknown split {split!r}")
        if path in seen:
            raise ManifestParseError(lineno, f"duplicate path {path!r}")
        seen.add(path)
        try:
            records.append(SampleRecord(path, label, tech, split))
        except ManifestValidationError as exc:
            raise ManifestValidationError(f"line {lineno}: {exc}") from None
    return records


def serialize_manifest(records: Iterable[SampleRecord]) -> str:
    lines = ["\t".join((r.path, r.label, r.technology, r.split)) for r in records]
    return "".join(line + "\n" for line in lines)


def read_manifest(path) -> list[SampleRecord]:
    return parse_manifest(Path(path).read_text(encoding="utf-8"))


def write_manifest(path, records: Iterable[SampleRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(serialize_manifest(records))


def _unit_hash(*parts) -> float:
    h = hashlib.blake2b("\x1f".join(str(p) for p in parts).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little") / 2.0 ** 64


def assign_splits(records: Iterable[SampleRecord], seed: int,
                  validation: float = 0.1, test: float = 0.0) -> list[SampleRecord]:
    """Reassign splits by hashing each record with ``seed``.

    The decision for one record depends only on its own fields and the seed,
    so adding or removing other rows never moves it.
    """
    out = []
    for r in records:
        u = _unit_hash(seed, r.path, r.label, r.technology)
        split = "test" if u < test else "validation" if u < test + validation else "train"
        out.append(replace(r, split=split))
    return out


def resolve_path(record: SampleRecord, root) -> Path:
    p = Path(record.path)
    return p if p.is_absolute() else Path(root) / p
