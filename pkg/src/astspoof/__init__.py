"""Synthetic speech detection with an Audio Spectrogram Transformer."""

from ._accel import backend_name
from .audio_io import AudioClip, SampleRecord, load_wav, parse_manifest, resample, serialize_manifest
from .augment import bonafide_policy, default_policies, synthetic_policy
from .evaluation import compute_eer, det_curve, evaluate
from .features import FeatureConfig, Spectrogram, log_mel
from .model import ModelConfig, forward, load_checkpoint, save_checkpoint
from .train import TrainConfig, fit

__version__ = "0.1.0"
