"""Synthetic stand-in corpora.

"Bonafide" clips are band-limited noise plus a harmonic stack with a random
fundamental. "Spoof" clips are generated the same way and then passed
through a fixed notch, one notch frequency per stand-in technology.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from scipy import signal

from . import kernels
from .audio_io import CANONICAL_RATE, HUMAN, AudioClip, SampleRecord, write_manifest, write_wav
from .augment import make_rng

NOTCH_HZ = {"elevenlabs": 2500.0, "notebooklm": 3200.0, "minimax": 1800.0, "toyspoof": 2500.0}
NOTCH_Q = 1.0

# Full-scale protocol: 500 bonafide + 102 of one generator to train on,
# the remainder held out with two generators never seen in training.
PROTOCOL_TRAIN = {HUMAN: 500, "elevenlabs": 102}
PROTOCOL_TEST = {HUMAN: 4500, "elevenlabs": 927, "notebooklm": 257, "minimax": 59}


def notch_sos(f0, fs, q=NOTCH_Q):
    w0 = 2.0 * math.pi * f0 / fs
    alpha = math.sin(w0) / (2.0 * q)
    c = math.cos(w0)
    row = np.array([1.0, -2 * c, 1.0, 1 + alpha, -2 * c, 1 - alpha])
    return (row / row[3])[None, :]


def voice_like(rng, n, fs=CANONICAL_RATE):
    noise = rng.standard_normal(n)
    lo = rng.uniform(100.0, 400.0)
    hi = rng.uniform(3500.0, 7000.0)
    sos = signal.butter(2, [lo, hi], btype="bandpass", fs=fs, output="sos")
    x = 0.3 * kernels.sosfilt(sos, noise)
    f0 = rng.uniform(90.0, 260.0)
    t = np.arange(n) / fs
    vibrato = 1.0 + 0.01 * np.sin(2 * np.pi * rng.uniform(3, 6) * t)
    phase = 2 * np.pi * f0 * np.cumsum(vibrato) / fs
    for k in range(1, int(4000 // f0) + 1):
        x += rng.uniform(0.3, 1.0) / k * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    return 0.5 * x / np.max(np.abs(x))


def toy_clip(label, technology, index, seed=0, duration_s=1.0, fs=CANONICAL_RATE):
    rng = make_rng(seed, "toy", label, technology, index)
    x = voice_like(rng, int(round(duration_s * fs)), fs)
    if label == "spoof":
        x = kernels.sosfilt(notch_sos(NOTCH_HZ[technology], fs), x)
    return AudioClip(np.clip(x, -1.0, 1.0), fs, f"{technology}-{index}")


def write_corpus(out_dir, plan, seed=0, duration_s=1.0, manifest_name="manifest.tsv"):
    """Write clips and a manifest.

    ``plan`` maps split -> technology -> count; ``"human"`` rows are
    bonafide, anything else is spoof. Returns the records written.
    """
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    records = []
    for split, techs in plan.items():
        for tech, count in techs.items():
            label = "bonafide" if tech == HUMAN else "spoof"
            for i in range(count):
                rel = f"audio/{split}_{tech}_{i:05d}.wav"
                clip = toy_clip(label, tech, f"{split}-{i}", seed, duration_s)
                write_wav(out / rel, clip)
                records.append(SampleRecord(rel, label, tech, split))
    write_manifest(out / manifest_name, records)
    return records


def toy_plan(n_bonafide=200, n_spoof=200, validation_fraction=0.25):
    n_vb = int(round(n_bonafide * validation_fraction))
    n_vs = int(round(n_spoof * validation_fraction))
    return {
        "train": {HUMAN: n_bonafide - n_vb, "toyspoof": n_spoof - n_vs},
        "validation": {HUMAN: n_vb, "toyspoof": n_vs},
    }


def protocol_plan(scale=1.0):
    def scaled(d):
        return {k: max(1, int(round(v * scale))) for k, v in d.items()}
    return {"train": scaled(PROTOCOL_TRAIN), "test": scaled(PROTOCOL_TEST)}
