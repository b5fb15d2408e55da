"""Lip-sync evaluation and training losses built on audio-visual speech features."""

__version__ = "0.1.0"

from .errors import AVSyncError
from .features import ExtractorSpec, FeatureSequence, extract_audio, extract_fused, extract_visual, toy_spec
from .losses import LossConfig, sync_loss, total_loss
from .media import MediaClip, MouthTrack, SegmentSpan, crop_mouth, load_clip, mel_spectrogram
from .metrics import SyncScore, avs_m, avs_u, avs_v, lmd, lse_cd

__all__ = [
    "AVSyncError", "ExtractorSpec", "FeatureSequence", "LossConfig", "MediaClip", "MouthTrack", "SegmentSpan",
    "SyncScore", "avs_m", "avs_u", "avs_v", "crop_mouth", "extract_audio", "extract_fused", "extract_visual",
    "lmd", "load_clip", "lse_cd", "mel_spectrogram", "sync_loss", "toy_spec", "total_loss",
]
