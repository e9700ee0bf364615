"""Glue between records on disk and model-ready patch sequences."""

from __future__ import annotations

from collections import defaultdict

import numpy as np

from . import model as M
from .audio_io import CANONICAL_RATE, AudioClip, check_duration, load_wav, resample, resolve_path
from .features import FeatureConfig, Spectrogram, log_mel, normalize


def load_clip(record, root, rate: int = CANONICAL_RATE, check: bool = True) -> AudioClip:
    clip = load_wav(resolve_path(record, root))
    if clip.sample_rate_hz != rate:
        clip = resample(clip, rate)
    if check:
        check_duration(clip)
    return clip


def featurize(clip: AudioClip, stats: M.NormStats | None = None,
              cfg: FeatureConfig = FeatureConfig()) -> Spectrogram:
    spec = log_mel(clip, cfg)
    if stats is not None:
        spec = normalize(spec, stats.mean, stats.std)
    return spec


def to_patches(spec: Spectrogram, mcfg: M.ModelConfig) -> np.ndarray:
    return M.patchify(spec, mcfg)[0]


def group_by_length(patch_list):
    """Indices of equal-length patch sequences, in first-seen order."""
    groups = defaultdict(list)
    for i, p in enumerate(patch_list):
        groups[p.shape[0]].append(i)
    return list(groups.values())


def score_patches(patch_list, params, mcfg: M.ModelConfig, batch: int = 32) -> np.ndarray:
    """Synthetic-minus-bonafide logit for every sequence."""
    scores = np.empty(len(patch_list))
    for idx in group_by_length(patch_list):
        for start in range(0, len(idx), batch):
            chunk = idx[start:start + batch]
            logits = M.forward_patches(np.stack([patch_list[i] for i in chunk]), params, mcfg)
            logits = logits.astype(np.float64)
            scores[chunk] = logits[:, M.SYNTHETIC] - logits[:, M.BONAFIDE]
    return scores
