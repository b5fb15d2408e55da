"""Lip-sync scores: the cosine-similarity AVS family, LMD and LSE-C/D."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Union

import numpy as np

from .errors import ClipTooShort, LengthMismatch, ShapeMismatch, ZeroNormRow
from .features import AudioInput, ExtractorSpec, FeatureSequence, extract_audio, extract_fused, extract_visual
from .media import MouthTrack

METRICS = ("AVS_u", "AVS_m", "AVS_v", "LMD", "LSE_C", "LSE_D")

ArrayLike = Union[FeatureSequence, np.ndarray]


@dataclass
class SyncScore:
    value: float
    metric: str
    clip_id: str = ""
    extractor_id: str = ""
    params_digest: str = ""
    flags: tuple = field(default_factory=tuple)

    def to_record(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "metric": self.metric,
            "value": float(self.value),
            "extractor_id": self.extractor_id,
            "params_digest": self.params_digest,
            "flags": list(self.flags),
        }


@dataclass
class LandmarkTrack:
    points: np.ndarray  # (N, M, 2) as (x, y) pixels

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 3 or pts.shape[2] != 2:
            raise ShapeMismatch(f"landmarks must be (frames, points, 2), got {pts.shape}")
        self.points = pts


def params_digest(**params) -> str:
    blob = json.dumps(params, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def mean_std(xs) -> tuple[float, float]:
    """Mean and population std; fsum is exactly rounded, so input order never matters."""
    xs = [float(x) for x in xs]
    n = len(xs)
    if n == 0:
        return math.nan, math.nan
    mean = math.fsum(xs) / n
    return mean, math.sqrt(math.fsum((x - mean) ** 2 for x in xs) / n)


def _values(x: ArrayLike) -> np.ndarray:
    return x.values if isinstance(x, FeatureSequence) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# cosine similarity


def rowwise_cosine(a: ArrayLike, b: ArrayLike, zero_norm: str = "error") -> tuple[np.ndarray, list[int]]:
    """Per-timestep cosine similarity. Zero-norm rows raise, or score 0 with ``zero_norm="zero"``."""
    a, b = _values(a), _values(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"feature shapes differ: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    zero = np.flatnonzero((na == 0) | (nb == 0)).tolist()
    if zero and zero_norm == "error":
        raise ZeroNormRow(zero)
    denom = np.where((na == 0) | (nb == 0), 1.0, na * nb)
    cs = np.einsum("td,td->t", a, b) / denom
    cs[zero] = 0.0
    return np.clip(cs, -1.0, 1.0), zero


def cosine_similarity_sequence(a: ArrayLike, b: ArrayLike, flatten: bool = False, zero_norm: str = "error") -> float:
    """Mean over timesteps of row-wise cosine similarity.

    ``flatten=True`` instead treats each sequence as one long vector.
    """
    if flatten:
        va, vb = _values(a).ravel(), _values(b).ravel()
        if va.shape != vb.shape:
            raise ShapeMismatch(f"feature shapes differ: {_values(a).shape} vs {_values(b).shape}")
        na, nb = np.linalg.norm(va), np.linalg.norm(vb)
        if na == 0 or nb == 0:
            if zero_norm == "error":
                raise ZeroNormRow([0])
            return 0.0
        return float(np.clip(va @ vb / (na * nb), -1.0, 1.0))
    cs, _ = rowwise_cosine(a, b, zero_norm)
    return float(cs.mean())


def _avs(metric: str, a: FeatureSequence, b: FeatureSequence, clip_id: str, flatten: bool,
         permissive: bool, extra: dict) -> SyncScore:
    zero_norm = "zero" if permissive else "error"
    flags: tuple = ()
    if flatten:
        value = cosine_similarity_sequence(a, b, flatten=True, zero_norm=zero_norm)
    else:
        cs, zero = rowwise_cosine(a, b, zero_norm)
        value = float(cs.mean())
        if zero:
            flags = (f"zero_norm_rows={len(zero)}",)
    digest = params_digest(metric=metric, flatten=flatten, permissive=permissive, extractor=a.extractor_id, **extra)
    return SyncScore(value=value, metric=metric, clip_id=clip_id, extractor_id=a.extractor_id,
                     params_digest=digest, flags=flags)


def avs_u(generated_track: MouthTrack, audio: AudioInput, spec: ExtractorSpec, clip_id: str = "",
          flatten: bool = False, permissive: bool = False) -> SyncScore:
    """Visual-only vs audio-only embeddings of the same clip. Needs no ground truth."""
    visual = extract_visual(generated_track, spec, clip_id)
    heard = extract_audio(audio, spec, len(generated_track), clip_id)
    return _avs("AVS_u", visual, heard, clip_id, flatten, permissive, {})


def avs_m(generated_track: MouthTrack, gt_track: MouthTrack, audio: AudioInput, spec: ExtractorSpec,
          clip_id: str = "", flatten: bool = False, permissive: bool = False) -> SyncScore:
    """Fused (generated, audio) vs fused (ground truth, audio) embeddings."""
    if len(generated_track) != len(gt_track):
        raise LengthMismatch(f"generated track has {len(generated_track)} frames, GT has {len(gt_track)}")
    gen = extract_fused(generated_track, audio, spec, clip_id)
    ref = extract_fused(gt_track, audio, spec, clip_id)
    return _avs("AVS_m", gen, ref, clip_id, flatten, permissive, {})


def avs_v(generated_track: MouthTrack, gt_track: MouthTrack, spec: ExtractorSpec, clip_id: str = "",
          flatten: bool = False, permissive: bool = False) -> SyncScore:
    """Visual-only embeddings of generated vs ground-truth lips; audio is never read."""
    if len(generated_track) != len(gt_track):
        raise LengthMismatch(f"generated track has {len(generated_track)} frames, GT has {len(gt_track)}")
    gen = extract_visual(generated_track, spec, clip_id)
    ref = extract_visual(gt_track, spec, clip_id)
    return _avs("AVS_v", gen, ref, clip_id, flatten, permissive, {})


# ---------------------------------------------------------------------------
# landmark distance


def lmd(gen_landmarks: LandmarkTrack, gt_landmarks: LandmarkTrack, normalize: bool = False,
        clip_id: str = "") -> SyncScore:
    """Mean Euclidean distance between corresponding mouth landmarks.

    With ``normalize`` each frame's distances are divided by the largest
    pairwise distance among that frame's ground-truth points.
    """
    gen, gt = gen_landmarks.points, gt_landmarks.points
    if gen.shape != gt.shape:
        raise ShapeMismatch(f"landmark shapes differ: {gen.shape} vs {gt.shape}")
    dist = np.linalg.norm(gen - gt, axis=2)  # (N, M)
    if normalize:
        diffs = gt[:, :, None, :] - gt[:, None, :, :]
        scale = np.linalg.norm(diffs, axis=3).max(axis=(1, 2))
        if np.any(scale == 0):
            raise ShapeMismatch("ground-truth landmarks collapse to a point in some frame")
        dist = dist / scale[:, None]
    return SyncScore(value=float(dist.mean()), metric="LMD", clip_id=clip_id,
                     params_digest=params_digest(metric="LMD", normalize=normalize))


# ---------------------------------------------------------------------------
# LSE-C / LSE-D


class OffsetSearch(NamedTuple):
    lse_c: float
    lse_d: float
    offsets: np.ndarray  # best audio offset per window
    distances: np.ndarray  # (n_windows, 2 * max_offset + 1)


def offset_search(video: ArrayLike, audio: ArrayLike, window: int = 5, max_offset: int = 15) -> OffsetSearch:
    """Sliding-window audio/video offset search over per-frame embeddings.

    Each window stacks ``window`` consecutive rows into one vector. For the
    video window starting at s the audio window starting at s + o is compared
    for every o in [-max_offset, max_offset] by Euclidean distance. Offset
    +o means the audio lags the video by o frames.
    """
    v, a = _values(video), _values(audio)
    if v.shape != a.shape:
        raise ShapeMismatch(f"feature shapes differ: {v.shape} vs {a.shape}")
    T = v.shape[0]
    if T < window + 2 * max_offset:
        raise ClipTooShort(f"{T} frames < window {window} + 2 * max_offset {max_offset}")
    starts = np.arange(max_offset, T - window - max_offset + 1)
    offsets = np.arange(-max_offset, max_offset + 1)
    rows = starts[:, None] + np.arange(window)[None, :]
    v_win = v[rows].reshape(len(starts), -1)
    a_win = a[(rows[:, None, :] + offsets[None, :, None])].reshape(len(starts), len(offsets), -1)
    dist = np.linalg.norm(a_win - v_win[:, None, :], axis=2)
    best = dist.argmin(axis=1)
    minimum = dist[np.arange(len(starts)), best]
    conf = np.median(dist, axis=1) - minimum
    return OffsetSearch(lse_c=float(conf.mean()), lse_d=float(minimum.mean()),
                        offsets=offsets[best], distances=dist)


def lse_cd(track: MouthTrack, audio: AudioInput, spec: ExtractorSpec, window: int = 5, max_offset: int = 15,
           clip_id: str = "") -> tuple[SyncScore, SyncScore]:
    if len(track) < window + 2 * max_offset:
        raise ClipTooShort(f"{len(track)} frames < window {window} + 2 * max_offset {max_offset}")
    visual = extract_visual(track, spec, clip_id)
    heard = extract_audio(audio, spec, len(track), clip_id)
    result = offset_search(visual, heard, window, max_offset)
    digest = params_digest(metric="LSE", window=window, max_offset=max_offset, extractor=visual.extractor_id)
    return (
        SyncScore(result.lse_c, "LSE_C", clip_id, visual.extractor_id, digest),
        SyncScore(result.lse_d, "LSE_D", clip_id, visual.extractor_id, digest),
    )


def score_clip(metric: str, spec: ExtractorSpec, track: MouthTrack, audio: AudioInput,
               gt_track: Optional[MouthTrack] = None, clip_id: str = "", permissive: bool = False,
               landmarks: Optional[LandmarkTrack] = None, gt_landmarks: Optional[LandmarkTrack] = None) -> SyncScore:
    """Dispatch one metric by name."""
    if metric == "AVS_u":
        return avs_u(track, audio, spec, clip_id, permissive=permissive)
    if metric == "AVS_m":
        return avs_m(track, gt_track, audio, spec, clip_id, permissive=permissive)
    if metric == "AVS_v":
        return avs_v(track, gt_track, spec, clip_id, permissive=permissive)
    if metric == "LMD":
        return lmd(landmarks, gt_landmarks, clip_id=clip_id)
    if metric in ("LSE_C", "LSE_D"):
        c, d = lse_cd(track, audio, spec, clip_id=clip_id)
        return c if metric == "LSE_C" else d
    raise ValueError(f"unknown metric {metric!r}")
