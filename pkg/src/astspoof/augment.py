"""Label-dependent waveform augmentation.

Spoofed clips get an aggressive eleven-stage chain (rooms, masking, pitch,
EQ, noise, band limiting, gain, codec artefacts); bonafide clips only get a
mild room and a little noise. Each stage is gated independently.
"""

from __future__ import annotations

import copy
import hashlib
import math
import shlex
import subprocess
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from . import kernels
from .audio_io import AudioClip, decode_wav, encode_wav, resample_array

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SPEED_OF_SOUND = 343.0
RIR_ORDER = 6
WALL_MARGIN_M = 0.5
EQ_CENTERS_HZ = tuple(62.5 * 2.0 ** k for k in range(7))
EQ_Q = 1.0


class ParameterError(ValueError):
    pass


class UndefinedSNRError(ValueError):
    pass


class PolicyError(ValueError):
    pass


def make_rng(seed: int, *keys) -> np.random.Generator:
    """PCG64 stream keyed by ``seed`` and any number of extra keys.

    Per-item streams (``make_rng(seed, source_id, epoch)``) keep results
    independent of worker scheduling.
    """
    h = hashlib.blake2b(digest_size=16)
    h.update(str(int(seed)).encode())
    for k in keys:
        h.update(b"\x1f" + str(k).encode())
    entropy = int.from_bytes(h.digest(), "little")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def _finish(clip: AudioClip, y: np.ndarray) -> AudioClip:
    return clip.with_samples(np.clip(y, -1.0, 1.0))


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------


def room_simulate(clip, width_m, length_m, height_m, absorption, rng=None,
                  source=None, receiver=None, order=RIR_ORDER):
    """Convolve with an image-source room response.

    Source and receiver are placed uniformly at least 0.5 m from every wall
    unless given. The output is rescaled only if its peak would exceed 1.
    """
    room = np.array([width_m, length_m, height_m], dtype=np.float64)
    if np.any(room < 2.0):
        raise ParameterError(f"room dimensions {room.tolist()} below 2 m")
    if not 0.0 < absorption <= 1.0:
        raise ParameterError(f"absorption {absorption} outside (0, 1]")
    if source is None or receiver is None:
        if rng is None:
            raise ParameterError("rng required for random placement")
        lo, hi = WALL_MARGIN_M, room - WALL_MARGIN_M
        source = rng.uniform(lo, hi) if source is None else source
        receiver = rng.uniform(lo, hi) if receiver is None else receiver
    h = room_impulse_response(room, source, receiver, absorption,
                              clip.sample_rate_hz, clip.samples.size, order)
    y = signal.fftconvolve(clip.samples, h)[: clip.samples.size]
    peak = np.max(np.abs(y))
    if peak > 1.0:
        y = y / peak
    return _finish(clip, y)


def room_impulse_response(room, source, receiver, absorption, fs, max_len,
                          order=RIR_ORDER):
    room = np.asarray(room, dtype=np.float64)
    beta = math.sqrt(max(0.0, 1.0 - absorption))
    longest = (order + 1) * float(np.linalg.norm(room))
    n_taps = int(min(max_len, math.ceil(longest / SPEED_OF_SOUND * fs) + 1))
    return kernels.image_source_rir(room, source, receiver, beta, order,
                                    fs, SPEED_OF_SOUND, max(n_taps, 1))


def time_mask(clip, fraction, rng):
    n = clip.samples.size
    width = int(math.floor(fraction * n + 0.5))
    start = int(rng.integers(0, n - width + 1))
    y = clip.samples.copy()
    y[start:start + width] = 0.0
    return clip.with_samples(y)


def _wsola_stretch(x, factor, frame=512, tolerance=128):
    """Time-stretch by ``factor`` (>1 lengthens) keeping pitch."""
    hop_out = frame // 2
    hop_in = hop_out / factor
    win = np.hanning(frame + 1)[:frame]
    n_out = int(math.floor(x.size * factor + 0.5))
    pad = np.concatenate([np.zeros(tolerance), x, np.zeros(frame + 2 * tolerance)])
    n_frames = n_out // hop_out + 2
    out = np.zeros(n_frames * hop_out + frame)
    norm = np.zeros_like(out)
    prev = 0
    for j in range(n_frames):
        nominal = int(round(j * hop_in)) + tolerance
        if j == 0:
            pos = nominal
        else:
            target = pad[prev + hop_out: prev + hop_out + frame]
            lo = max(0, nominal - tolerance)
            region = pad[lo: nominal + tolerance + frame]
            if region.size < frame or not np.any(target):
                pos = nominal
            else:
                score = np.correlate(region, target, mode="valid")
                pos = lo + int(np.argmax(score))
        seg = pad[pos: pos + frame]
        if seg.size < frame:
            seg = np.pad(seg, (0, frame - seg.size))
        out[j * hop_out: j * hop_out + frame] += seg * win
        norm[j * hop_out: j * hop_out + frame] += win
        prev = pos
    out = out / np.maximum(norm, 1e-3)
    return out[:n_out]


def pitch_shift(clip, semitones):
    """Shift pitch keeping duration: time-stretch then resample back."""
    if semitones == 0:
        return clip.with_samples(clip.samples.copy())
    factor = 2.0 ** (semitones / 12.0)
    n = clip.samples.size
    frame = 512
    while frame > 64 and 4 * frame > n:
        frame //= 2
    stretched = _wsola_stretch(clip.samples, factor, frame, frame // 4)
    y = resample_array(stretched, 1.0 / factor, n_out=n)
    return _finish(clip, y)


def peaking_sos(f0, gain_db, q, fs):
    w0 = 2.0 * math.pi * f0 / fs
    alpha = math.sin(w0) / (2.0 * q)
    a = 10.0 ** (gain_db / 40.0)
    b = [1 + alpha * a, -2 * math.cos(w0), 1 - alpha * a]
    den = [1 + alpha / a, -2 * math.cos(w0), 1 - alpha / a]
    return np.array([b[0], b[1], b[2], den[0], den[1], den[2]]) / den[0]


def lowpass_sos(fc, fs, q=1.0 / math.sqrt(2.0)):
    w0 = 2.0 * math.pi * fc / fs
    alpha = math.sin(w0) / (2.0 * q)
    c = math.cos(w0)
    row = np.array([(1 - c) / 2, 1 - c, (1 - c) / 2, 1 + alpha, -2 * c, 1 - alpha])
    return row / row[3]


def _band_response_db(rows, fs):
    w = 2.0 * np.pi * np.asarray(EQ_CENTERS_HZ) / fs
    _, h = signal.sosfreqz(rows, worN=w)
    return 20.0 * np.log10(np.abs(h))


def _cascade_rows(gains, fs):
    return np.vstack([peaking_sos(f0, gk, EQ_Q, fs) for f0, gk in zip(EQ_CENTERS_HZ, gains)])


def eq_filter_gains(gains_db, fs, iterations=6):
    """Per-filter gains that put the cascade's response at each centre on target.

    Octave-spaced Q = 1 bands overlap, so each filter leaks into its
    neighbours. The leakage is nearly linear in dB, so an interaction
    matrix solve plus a few correction passes lands on target.
    """
    target = np.asarray(gains_db, dtype=np.float64)
    probe = 12.0
    interaction = np.column_stack([
        _band_response_db(peaking_sos(f0, probe, EQ_Q, fs)[None, :], fs) / probe
        for f0 in EQ_CENTERS_HZ])
    g = np.linalg.solve(interaction, target)
    for _ in range(iterations):
        g = g + np.linalg.solve(interaction, target - _band_response_db(_cascade_rows(g, fs), fs))
    return g


def parametric_eq(clip, gains_db):
    gains_db = np.asarray(gains_db, dtype=np.float64)
    if gains_db.shape != (len(EQ_CENTERS_HZ),):
        raise ParameterError(f"expected {len(EQ_CENTERS_HZ)} band gains")
    fs = clip.sample_rate_hz
    if not np.any(gains_db) or max(EQ_CENTERS_HZ) >= 0.45 * fs:
        if not np.any(gains_db):
            return clip.with_samples(clip.samples.copy())
        raise ParameterError(f"sample rate {fs} too low for the top EQ band")
    rows = _cascade_rows(eq_filter_gains(gains_db, fs), fs)
    return _finish(clip, kernels.sosfilt(rows, clip.samples))


def add_noise_amplitude(clip, amplitude, rng):
    noise = amplitude * rng.standard_normal(clip.samples.size)
    return _finish(clip, clip.samples + noise)


def add_noise_snr(clip, snr_db, rng):
    p_sig = float(np.mean(clip.samples ** 2))
    if p_sig == 0.0:
        raise UndefinedSNRError("SNR undefined for an all-zero clip")
    noise = rng.standard_normal(clip.samples.size)
    p_noise = float(np.mean(noise ** 2))
    noise *= math.sqrt(p_sig / (p_noise * 10.0 ** (snr_db / 10.0)))
    y = clip.samples + noise
    # scale rather than clip so the signal-to-noise ratio survives
    peak = np.max(np.abs(y))
    return _finish(clip, y / peak if peak > 1.0 else y)


def bandpass_edges(center_hz, bandwidth_fraction, fs):
    nyq = fs / 2.0
    lo = max(center_hz * (1.0 - bandwidth_fraction / 2.0), 1.0)
    hi = min(center_hz * (1.0 + bandwidth_fraction / 2.0), 0.98 * nyq)
    return lo, hi


def bandpass_filter(clip, center_hz, bandwidth_fraction):
    fs = clip.sample_rate_hz
    lo, hi = bandpass_edges(center_hz, bandwidth_fraction, fs)
    if hi >= 0.98 * fs / 2.0:
        sos = signal.butter(2, lo, btype="highpass", fs=fs, output="sos")
    else:
        sos = signal.butter(2, [lo, hi], btype="bandpass", fs=fs, output="sos")
    return _finish(clip, kernels.sosfilt(sos, clip.samples))


def lowpass_filter(clip, cutoff_hz):
    fs = clip.sample_rate_hz
    if cutoff_hz >= fs / 2.0:
        return clip.with_samples(clip.samples.copy())
    sos = lowpass_sos(cutoff_hz, fs)[None, :]
    return _finish(clip, kernels.sosfilt(sos, clip.samples))


def apply_gain(clip, gain_db):
    if gain_db == 0:
        return clip.with_samples(clip.samples.copy())
    return _finish(clip, clip.samples * 10.0 ** (gain_db / 20.0))


def gain_transition(clip, from_db, to_db, duration_s, rng):
    n = clip.samples.size
    width = int(math.floor(duration_s * clip.sample_rate_hz + 0.5))
    if width >= n:
        start, width = 0, n
    else:
        start = int(rng.integers(0, n - width + 1))
    db = np.empty(n)
    db[:start] = from_db
    ramp = np.linspace(from_db, to_db, width) if width > 1 else np.full(width, to_db)
    db[start:start + width] = ramp
    db[start + width:] = to_db
    return _finish(clip, clip.samples * 10.0 ** (db / 20.0))


# MDCT block: 256 coefficients per hop, sine window.
_MDCT_M = 256


def _mdct_basis(m):
    n = np.arange(2 * m)
    k = np.arange(m)
    window = np.sin(np.pi * (n + 0.5) / (2 * m))
    basis = np.cos(np.pi / m * (n[None, :] + 0.5 + m / 2) * (k[:, None] + 0.5))
    return window, basis


def codec_cutoff_hz(bitrate_kbps):
    return 4000.0 + (bitrate_kbps - 32.0) / 160.0 * 3500.0


def codec_simulate(clip, bitrate_kbps, step_scale=16.0):
    """Lossy-codec stand-in: band-limited, coarsely quantized MDCT.

    The quantizer step per block is ``peak * step_scale / bitrate``, so
    higher bitrates always quantize at least as finely and keep more band.
    """
    m = _MDCT_M
    x = clip.samples
    n = x.size
    window, basis = _mdct_basis(m)
    n_blocks = -(-n // m) + 1
    padded = np.zeros((n_blocks + 1) * m)
    padded[m:m + n] = x
    frames = np.lib.stride_tricks.sliding_window_view(padded, 2 * m)[::m][:n_blocks]
    coefs = (frames * window) @ basis.T
    freqs = (np.arange(m) + 0.5) * clip.sample_rate_hz / (2 * m)
    coefs[:, freqs > codec_cutoff_hz(bitrate_kbps)] = 0.0
    peak = np.max(np.abs(coefs), axis=1, keepdims=True)
    step = peak * step_scale / bitrate_kbps
    safe = np.where(step > 0, step, 1.0)
    coefs = np.where(step > 0, np.round(coefs / safe) * safe, 0.0)
    blocks = (coefs @ basis) * window * (2.0 / m)
    out = np.zeros_like(padded)
    for i in range(n_blocks):
        out[i * m: i * m + 2 * m] += blocks[i]
    return _finish(clip, out[m:m + n])


def external_codec(clip, bitrate_kbps, command):
    """Round-trip through a user command.

    ``command`` is a template with ``{input}``, ``{output}`` and
    ``{bitrate}`` placeholders; it must leave a WAV file at ``{output}``.
    """
    with tempfile.TemporaryDirectory() as tmp:
        src = Path(tmp) / "in.wav"
        dst = Path(tmp) / "out.wav"
        src.write_bytes(encode_wav(clip, "float32"))
        argv = [a.format(input=src, output=dst, bitrate=int(round(bitrate_kbps)))
                for a in shlex.split(command)]
        subprocess.run(argv, check=True, capture_output=True)
        back = decode_wav(dst.read_bytes())
    y = back.samples
    if back.sample_rate_hz != clip.sample_rate_hz:
        y = resample_array(y, clip.sample_rate_hz / back.sample_rate_hz)
    n = clip.samples.size
    y = y[:n] if y.size >= n else np.pad(y, (0, n - y.size))
    return _finish(clip, y)


# ---------------------------------------------------------------------------
# policies
# ---------------------------------------------------------------------------


@dataclass
class Stage:
    name: str
    p: float
    ranges: dict

    def draw(self, rng):
        out = {}
        for key, (lo, hi) in self.ranges.items():
            if key == "gain_db" and self.name == "eq":
                out[key] = rng.uniform(lo, hi, size=len(EQ_CENTERS_HZ))
            else:
                out[key] = float(rng.uniform(lo, hi))
        return out


@dataclass
class AugmentPolicy:
    kind: str
    stages: list
    external_codec: str | None = None

    def validate(self):
        if self.kind not in ("synthetic", "bonafide"):
            raise PolicyError(f"unknown policy kind {self.kind!r}")
        for st in self.stages:
            if st.name not in TRANSFORMS:
                raise PolicyError(f"unknown stage {st.name!r}")
            if not 0.0 <= st.p <= 1.0:
                raise PolicyError(f"{st.name}.p = {st.p} outside [0, 1]")
            for key, (lo, hi) in st.ranges.items():
                if lo > hi:
                    raise PolicyError(f"{st.name}.{key}: low {lo} > high {hi}")
        return self

    def stage(self, name):
        for st in self.stages:
            if st.name == name:
                return st
        raise KeyError(name)

    def with_probabilities(self, p):
        out = copy.deepcopy(self)
        for st in out.stages:
            st.p = p
        return out


_SYNTHETIC = [
    ("room", 0.1, {"width_m": (2.0, 12.0), "length_m": (2.0, 12.0),
                   "height_m": (2.0, 5.0), "absorption": (0.05, 0.5)}),
    ("time_mask", 0.3, {"fraction": (0.05, 0.15)}),
    ("pitch", 0.3, {"semitones": (-1.0, 1.0)}),
    ("eq", 0.3, {"gain_db": (-12.0, 12.0)}),
    ("noise", 0.5, {"amplitude": (0.0005, 0.01)}),
    ("snr", 0.5, {"snr_db": (10.0, 40.0)}),
    ("bandpass", 0.1, {"center_hz": (200.0, 5000.0), "bandwidth_fraction": (0.4, 1.8)}),
    ("lowpass", 0.1, {"cutoff_hz": (2000.0, 7500.0)}),
    ("gain", 0.5, {"gain_db": (-10.0, 10.0)}),
    ("gain_transition", 0.4, {"from_db": (-10.0, 3.0), "to_db": (-10.0, 3.0),
                              "duration_s": (0.3, 0.7)}),
    ("codec", 0.4, {"bitrate_kbps": (32.0, 192.0)}),
]

_BONAFIDE = [
    ("room", 0.3, {"width_m": (2.0, 8.0), "length_m": (2.0, 8.0),
                   "height_m": (2.0, 5.0), "absorption": (0.1, 0.3)}),
    ("noise", 0.3, {"amplitude": (0.0005, 0.005)}),
]


def _build(kind, table):
    stages = [Stage(name, p, dict(ranges)) for name, p, ranges in table]
    return AugmentPolicy(kind, stages).validate()


def synthetic_policy() -> AugmentPolicy:
    return _build("synthetic", _SYNTHETIC)


def bonafide_policy() -> AugmentPolicy:
    return _build("bonafide", _BONAFIDE)


def default_policies() -> dict:
    return {"synthetic": synthetic_policy(), "bonafide": bonafide_policy()}


def _apply_overrides(policy, table):
    for stage_name, keys in table.items():
        if not isinstance(keys, dict):
            raise PolicyError(f"{policy.kind}.{stage_name}: expected a table of keys")
        try:
            st = policy.stage(stage_name)
        except KeyError:
            raise PolicyError(f"{policy.kind}: unknown stage {stage_name!r}") from None
        for key, value in keys.items():
            if key == "p":
                st.p = float(value)
            elif key == "external_command" and stage_name == "codec":
                policy.external_codec = str(value)
            elif key in st.ranges:
                if not (isinstance(value, list) and len(value) == 2):
                    raise PolicyError(f"{stage_name}.{key}: expected [low, high]")
                st.ranges[key] = (float(value[0]), float(value[1]))
            else:
                raise PolicyError(f"{policy.kind}.{stage_name}: unknown key {key!r}")
    return policy.validate()


def parse_policy_text(text: str) -> dict:
    """Parse a TOML policy file into ``{"synthetic": ..., "bonafide": ...}``.

    Keys look like ``room.p = 0.1`` or ``room.width_m = [2.0, 12.0]`` under a
    ``[synthetic]`` or ``[bonafide]`` table. Missing keys keep the defaults,
    so an empty file yields the stock policies.
    """
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise PolicyError(f"bad policy file: {exc}") from None
    policies = default_policies()
    for kind, table in doc.items():
        if kind not in policies:
            raise PolicyError(f"unknown policy section {kind!r}")
        _apply_overrides(policies[kind], table)
    return policies


def load_policy_file(path) -> dict:
    if path is None:
        return default_policies()
    return parse_policy_text(Path(path).read_text(encoding="utf-8"))


def _run_stage(clip, stage, params, rng, policy):
    name = stage.name
    if name == "room":
        return room_simulate(clip, params["width_m"], params["length_m"],
                             params["height_m"], params["absorption"], rng)
    if name == "time_mask":
        return time_mask(clip, params["fraction"], rng)
    if name == "pitch":
        return pitch_shift(clip, params["semitones"])
    if name == "eq":
        return parametric_eq(clip, params["gain_db"])
    if name == "noise":
        return add_noise_amplitude(clip, params["amplitude"], rng)
    if name == "snr":
        if float(np.mean(clip.samples ** 2)) == 0.0:
            return clip
        return add_noise_snr(clip, params["snr_db"], rng)
    if name == "bandpass":
        return bandpass_filter(clip, params["center_hz"], params["bandwidth_fraction"])
    if name == "lowpass":
        return lowpass_filter(clip, params["cutoff_hz"])
    if name == "gain":
        return apply_gain(clip, params["gain_db"])
    if name == "gain_transition":
        return gain_transition(clip, params["from_db"], params["to_db"],
                               params["duration_s"], rng)
    if name == "codec":
        if policy.external_codec:
            return external_codec(clip, params["bitrate_kbps"], policy.external_codec)
        return codec_simulate(clip, params["bitrate_kbps"])
    raise PolicyError(f"unknown stage {name!r}")


TRANSFORMS = ("room", "time_mask", "pitch", "eq", "noise", "snr", "bandpass",
              "lowpass", "gain", "gain_transition", "codec")


def augment(clip: AudioClip, policy: AugmentPolicy, rng: np.random.Generator,
            trace: list | None = None) -> AudioClip:
    """Run ``policy`` over ``clip``.

    All gate values are drawn up front, one per stage, so parameter draws of
    a fired stage never shift the gating of later stages.
    """
    gates = rng.random(len(policy.stages))
    out = clip
    for stage, g in zip(policy.stages, gates):
        if g < stage.p:
            params = stage.draw(rng)
            out = _run_stage(out, stage, params, rng, policy)
            if trace is not None:
                trace.append(stage.name)
    return out


def policy_for_label(policies: dict, label: str) -> AugmentPolicy:
    return policies["bonafide" if label == "bonafide" else "synthetic"]


def clip_rng(seed, source_id, epoch=0):
    return make_rng(seed, "augment", source_id, epoch)

