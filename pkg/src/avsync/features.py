"""Feature-extractor boundary: per-timestep audio/visual embeddings at 25 Hz.

Extraction always goes through a joint encoder with two input slots. When
only one modality is wanted, the other slot receives an all-zero tensor of
its raw input shape (mouth crops ``u8[T, 96, 96, 3]`` or mel ``f32[T_a, 80]``),
never a truncated one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np
import torch

from .errors import AlignmentError, AudioTooShort, ModelLoadError, ShapeError, SpanOutOfBounds
from .media import (
    CROP_SIZE,
    HOP,
    N_MELS,
    SAMPLES_PER_FRAME,
    TARGET_SR,
    MelSpectrogram,
    MouthTrack,
    SegmentSpan,
    mel_spectrogram,
)

FEATURE_HZ = 25.0
MEL_PER_FRAME = SAMPLES_PER_FRAME / HOP  # 3.2

EXTERNAL_DIMS = {"external_avhubert": 768, "external_syncnet": 512}
KINDS = ("external_avhubert", "external_syncnet", "toy")

AudioInput = Union[MelSpectrogram, np.ndarray]


@dataclass
class FeatureSequence:
    values: np.ndarray  # (T, D)
    modality: str  # audio | visual | fused
    timestep_hz: float = FEATURE_HZ
    extractor_id: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ShapeError(f"feature values must be 2-D, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ShapeError("feature values contain NaN or Inf")
        if self.modality not in ("audio", "visual", "fused"):
            raise ValueError(f"unknown modality {self.modality!r}")
        self.values = values

    @property
    def T(self) -> int:
        return int(self.values.shape[0])

    @property
    def D(self) -> int:
        return int(self.values.shape[1])


@dataclass(frozen=True)
class ExtractorSpec:
    kind: str = "toy"
    model_ref: str = ""
    embed_dim: Optional[int] = None
    deterministic: bool = True
    model: Optional[torch.nn.Module] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown extractor kind {self.kind!r}")
        if self.kind == "toy":
            if not self.deterministic:
                raise ValueError("toy extractors are deterministic")
            if self.embed_dim is None and self.model is not None:
                object.__setattr__(self, "embed_dim", int(self.model.embed_dim))
        else:
            expected = EXTERNAL_DIMS[self.kind]
            if self.embed_dim is None:
                object.__setattr__(self, "embed_dim", expected)
            elif self.embed_dim != expected:
                raise ValueError(f"{self.kind} adapters declare embed_dim {expected}, got {self.embed_dim}")
        if self.embed_dim is not None and self.embed_dim <= 0:
            raise ValueError("embed_dim must be positive")


def toy_spec(model, model_ref: str = "") -> ExtractorSpec:
    return ExtractorSpec(kind="toy", model_ref=model_ref or "memory", embed_dim=model.embed_dim, model=model)


def zero_placeholder(shape, dtype=np.float32) -> np.ndarray:
    """All-zero stand-in for an absent modality's raw input."""
    return np.zeros(shape, dtype=dtype)


# ---------------------------------------------------------------------------
# audio handling


def as_mel(audio: AudioInput) -> np.ndarray:
    if isinstance(audio, MelSpectrogram):
        return audio.values
    arr = np.asarray(audio)
    if arr.ndim == 1:
        return mel_spectrogram(arr, TARGET_SR).values
    if arr.ndim == 2 and arr.shape[1] == N_MELS:
        return arr
    raise ShapeError(f"audio must be a waveform or (T_a, {N_MELS}) mel, got shape {arr.shape}")


def audio_covers(audio: AudioInput, n_steps: int) -> bool:
    """True when the audio lasts at least ``n_steps`` video frames."""
    arr = audio.values if isinstance(audio, MelSpectrogram) else np.asarray(audio)
    if arr.ndim == 1:
        return len(arr) >= n_steps * SAMPLES_PER_FRAME
    return arr.shape[0] * HOP >= n_steps * SAMPLES_PER_FRAME


def mel_windows(mel: np.ndarray, n_steps: int, context: int) -> np.ndarray:
    """Gather a ``context``-frame mel window around each video frame: (T, context, 80).

    Video frame i spans samples [640 i, 640 i + 640); mel frame j is centered
    on [200 j, 200 j + 200), so the frame's midpoint sits at mel index
    3.2 i + 1.1. Indices past either end repeat the edge frame.
    """
    centers = MEL_PER_FRAME * np.arange(n_steps) + 1.1
    starts = np.floor(centers - (context - 1) / 2.0 + 0.5).astype(int)
    idx = np.clip(starts[:, None] + np.arange(context)[None, :], 0, mel.shape[0] - 1)
    return np.ascontiguousarray(mel[idx], dtype=np.float32)


# ---------------------------------------------------------------------------
# backends


class _ToyBackend:
    def __init__(self, model):
        self.model = model.float64_copy()
        self.extractor_id = model.extractor_id()
        self.context = model.arch.audio_context

    def run(self, crops: np.ndarray, mel: np.ndarray, n_steps: int, modality: str) -> np.ndarray:
        frames = torch.from_numpy(np.ascontiguousarray(crops)).to(torch.float64).permute(0, 3, 1, 2) / 255.0
        windows = torch.from_numpy(mel_windows(mel, n_steps, self.context)).to(torch.float64)
        with torch.no_grad():
            return self.model.encode(frames, windows).numpy()


def _backend(spec: ExtractorSpec):
    if spec.kind == "toy":
        model = spec.model
        if model is None:
            if not spec.model_ref:
                raise ModelLoadError("toy extractor spec has neither a model nor a model_ref")
            from .toy import load_toy_extractor
            try:
                model = load_toy_extractor(spec.model_ref)
            except (OSError, RuntimeError, KeyError) as exc:
                raise ModelLoadError(f"cannot load toy extractor {spec.model_ref}: {exc}") from exc
        return _ToyBackend(model)
    from .adapter import AdapterBackend

    return AdapterBackend(spec)


def _run(spec: ExtractorSpec, crops: np.ndarray, mel: np.ndarray, n_steps: int, modality: str,
         clip_id: str = "") -> FeatureSequence:
    backend = _backend(spec)
    if isinstance(backend, _ToyBackend):
        values = backend.run(crops, mel, n_steps, modality)
        extractor_id = backend.extractor_id
    else:
        values, extractor_id = backend.run(crops, mel, n_steps, modality, clip_id=clip_id)
    values = np.asarray(values)
    if values.ndim != 2 or values.shape[0] != n_steps or (spec.embed_dim and values.shape[1] != spec.embed_dim):
        raise ShapeError(f"extractor returned {values.shape}, expected ({n_steps}, {spec.embed_dim})")
    if not np.all(np.isfinite(values)):
        raise ShapeError("extractor returned NaN/Inf features")
    return FeatureSequence(values=values, modality=modality, extractor_id=extractor_id)


def _placeholder_mel(n_steps: int) -> np.ndarray:
    return zero_placeholder((int(math.ceil(n_steps * MEL_PER_FRAME)), N_MELS))


# ---------------------------------------------------------------------------
# public operations


def extract_visual(track: MouthTrack, spec: ExtractorSpec, clip_id: str = "") -> FeatureSequence:
    """Visual-only features: mouth crops in the visual slot, zeros in the audio slot."""
    if len(track) == 0:
        raise ValueError("cannot extract features from an empty track")
    n = len(track)
    return _run(spec, track.crops, _placeholder_mel(n), n, "visual", clip_id)


def extract_audio(audio: AudioInput, spec: ExtractorSpec, target_T: int, clip_id: str = "") -> FeatureSequence:
    """Audio-only features for ``target_T`` video-rate timesteps (visual slot zeroed)."""
    if target_T <= 0:
        raise ValueError("target_T must be positive")
    if not audio_covers(audio, target_T):
        raise AudioTooShort(f"audio is shorter than {target_T / FEATURE_HZ:.2f}s")
    crops = zero_placeholder((target_T, CROP_SIZE, CROP_SIZE, 3), dtype=np.uint8)
    return _run(spec, crops, as_mel(audio), target_T, "audio", clip_id)


def extract_fused(track: MouthTrack, audio: AudioInput, spec: ExtractorSpec, clip_id: str = "") -> FeatureSequence:
    if len(track) == 0:
        raise ValueError("cannot extract features from an empty track")
    n = len(track)
    if not audio_covers(audio, n):
        raise AlignmentError(f"audio does not cover the {n}-frame track ({n / FEATURE_HZ:.2f}s)")
    return _run(spec, track.crops, as_mel(audio), n, "fused", clip_id)


def slice_features(f: FeatureSequence, span: SegmentSpan) -> FeatureSequence:
    if span.stop > f.T:
        raise SpanOutOfBounds(f"span [{span.t}, {span.stop}) exceeds {f.T} timesteps")
    return replace(f, values=f.values[span.as_slice()].copy())
