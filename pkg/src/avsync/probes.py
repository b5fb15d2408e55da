"""Perturbation sweeps: how far metrics and sync losses move when mouth crops are shifted or rotated."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import DegenerateCurve, OutOfRangePerturbation
from .features import AudioInput, ExtractorSpec, extract_audio, extract_visual
from .losses import LossConfig, similarity_to_loss, sync_loss
from .media import AffinePerturbation, MouthTrack, SegmentSpan, apply_perturbation
from .metrics import avs_m, avs_u, avs_v, lse_cd, mean_std, rowwise_cosine

logger = logging.getLogger(__name__)

AXES = ("shift_px", "rotation_deg")
DEFAULT_GRIDS = {
    "shift_px": (-16, -8, -4, -2, 0, 2, 4, 8, 16),
    "rotation_deg": (-20, -10, -5, 0, 5, 10, 20),
}
METRIC_SELECTORS = ("AVS_u", "AVS_m", "AVS_v", "LSE_C", "LSE_D")
LOSS_SELECTORS = ("loss_unsupervised", "loss_visual_visual", "loss_multimodal")
SELECTORS = METRIC_SELECTORS + LOSS_SELECTORS


@dataclass
class ProbeClip:
    clip_id: str
    track: MouthTrack
    audio: AudioInput
    gt_track: Optional[MouthTrack] = None  # defaults to the unperturbed track


@dataclass(frozen=True)
class SweepSpec:
    perturbation_axis: str
    values: tuple
    metrics: tuple
    extractor: ExtractorSpec

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(self.values))
        object.__setattr__(self, "metrics", tuple(self.metrics))
        if self.perturbation_axis not in AXES:
            raise ValueError(f"unknown perturbation axis {self.perturbation_axis!r}")
        if not self.metrics:
            raise ValueError("sweep needs at least one metric")
        unknown = [m for m in self.metrics if m not in SELECTORS]
        if unknown:
            raise ValueError(f"unknown metric selectors {unknown}")
        if 0 not in self.values:
            raise ValueError("sweep settings must include 0")
        if list(self.values) != sorted(self.values):
            raise ValueError("sweep settings must be sorted")
        for v in self.values:
            self.perturbation(v).check()

    def perturbation(self, value) -> AffinePerturbation:
        if self.perturbation_axis == "shift_px":
            if float(value) != int(value):
                raise OutOfRangePerturbation(f"shift must be whole pixels, got {value}")
            return AffinePerturbation(shift_px=int(value))
        return AffinePerturbation(rotation_deg=float(value))


def default_sweep(axis: str, metrics: Sequence[str], extractor: ExtractorSpec) -> SweepSpec:
    return SweepSpec(axis, DEFAULT_GRIDS[axis], tuple(metrics), extractor)


@dataclass
class StabilityCurve:
    metric: str
    axis: str
    settings: tuple
    mean: tuple
    std: tuple
    n: int
    per_clip: dict = field(default_factory=dict)  # clip_id -> values aligned with settings
    excluded: dict = field(default_factory=dict)  # clip_id -> error message

    @property
    def baseline(self) -> float:
        return self.mean[self.settings.index(0)]

    def to_records(self) -> list[dict]:
        return [
            {"axis": self.axis, "setting": s, "metric": self.metric, "mean": m, "std": sd, "n": self.n}
            for s, m, sd in zip(self.settings, self.mean, self.std)
        ]


class StabilityIndex(float):
    """A float that also says whether it was normalized by the baseline."""

    def __new__(cls, value: float, normalized: bool = True):
        obj = super().__new__(cls, value)
        obj.normalized = normalized
        return obj


def _sync_probe_loss(variant: str, track: MouthTrack, gt: MouthTrack, audio, spec: ExtractorSpec) -> float:
    # the whole clip is the "generated" span
    span = SegmentSpan(0, len(track))
    with torch.no_grad():
        loss = sync_loss(variant, track, gt, audio, span, spec, LossConfig(sync_variant=variant))
    return float(loss)


def evaluate_selector(metric: str, clip: ProbeClip, track: MouthTrack, spec: ExtractorSpec) -> float:
    """One metric or loss value for ``track`` standing in for ``clip``'s mouth track."""
    gt = clip.gt_track if clip.gt_track is not None else clip.track
    if metric == "AVS_u":
        return avs_u(track, clip.audio, spec, clip.clip_id).value
    if metric == "AVS_m":
        return avs_m(track, gt, clip.audio, spec, clip.clip_id).value
    if metric == "AVS_v":
        return avs_v(track, gt, spec, clip.clip_id).value
    if metric in ("LSE_C", "LSE_D"):
        c, d = lse_cd(track, clip.audio, spec, clip_id=clip.clip_id)
        return c.value if metric == "LSE_C" else d.value
    if metric in LOSS_SELECTORS:
        return _sync_probe_loss(metric[len("loss_"):], track, gt, clip.audio, spec)
    raise ValueError(f"unknown metric selector {metric!r}")


def _clip_values(clip: ProbeClip, spec: SweepSpec):
    """(setting, metric) grid of values for one clip, or the error that stopped it."""
    values = {}
    try:
        for setting in spec.values:
            track = apply_perturbation(clip.track, spec.perturbation(setting))
            for metric in spec.metrics:
                values[(setting, metric)] = evaluate_selector(metric, clip, track, spec.extractor)
    except Exception as exc:  # recorded per clip; the sweep carries on
        logger.warning("clip %s dropped from sweep: %s", clip.clip_id, exc)
        return None, f"{type(exc).__name__}: {exc}"
    return values, None


def run_sweep(clips: Sequence[ProbeClip], spec: SweepSpec, workers: int = 1) -> dict[str, StabilityCurve]:
    """Apply every setting of ``spec`` to every clip and aggregate each metric.

    A clip that fails at any setting is excluded from every setting, so all
    points of a curve average the same clips.
    """
    if not clips:
        raise ValueError("sweep needs at least one clip")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda c: _clip_values(c, spec), clips))
    else:
        results = [_clip_values(c, spec) for c in clips]
    kept = {c.clip_id: vals for c, (vals, _) in zip(clips, results) if vals is not None}
    excluded = {c.clip_id: err for c, (_, err) in zip(clips, results) if err is not None}
    curves = {}
    for metric in spec.metrics:
        means, stds = [], []
        for setting in spec.values:
            m, s = mean_std([vals[(setting, metric)] for vals in kept.values()])
            means.append(m)
            stds.append(s)
        per_clip = {cid: tuple(vals[(s, metric)] for s in spec.values) for cid, vals in kept.items()}
        curves[metric] = StabilityCurve(metric, spec.perturbation_axis, spec.values, tuple(means), tuple(stds),
                                        len(kept), per_clip, dict(excluded))
    return curves


def stability_index(curve: StabilityCurve, max_abs_setting: Optional[float] = None) -> StabilityIndex:
    """Largest absolute deviation from the setting-0 value, relative to |baseline|.

    ``max_abs_setting`` restricts the curve to settings with |s| at most
    that value. A zero baseline gives the raw deviation, flagged
    ``normalized=False``.
    """
    pts = [(s, m) for s, m in zip(curve.settings, curve.mean)
           if max_abs_setting is None or abs(s) <= max_abs_setting]
    if len(pts) < 2:
        raise DegenerateCurve(f"curve for {curve.metric} has {len(pts)} setting(s); need at least 2")
    base = curve.baseline
    worst = max(abs(m - base) for _, m in pts)
    if base == 0:
        return StabilityIndex(worst, normalized=False)
    return StabilityIndex(worst / abs(base), normalized=True)


@dataclass
class SimilarityScan:
    clip_id: str
    cs: float  # mean over frames
    loss: float  # clamped -log of the mean
    cs_per_frame: np.ndarray
    loss_per_frame: np.ndarray

    def to_record(self) -> dict:
        return {"clip_id": self.clip_id, "cs": self.cs, "loss": self.loss,
                "cs_per_frame": self.cs_per_frame.tolist(), "loss_per_frame": self.loss_per_frame.tolist()}


def gt_similarity_scan(clips: Sequence[ProbeClip], spec: ExtractorSpec, eps: float = 1e-7) -> list[SimilarityScan]:
    """Audio-vs-visual cosine similarity and its clamped -log for ground-truth pairs."""
    out = []
    for clip in clips:
        visual = extract_visual(clip.track, spec, clip.clip_id)
        heard = extract_audio(clip.audio, spec, len(clip.track), clip.clip_id)
        cs, _ = rowwise_cosine(visual, heard, zero_norm="zero")
        loss = similarity_to_loss(torch.from_numpy(cs), eps).numpy()
        mean = float(cs.mean())
        mean_loss = float(similarity_to_loss(torch.tensor(mean, dtype=torch.float64), eps))
        out.append(SimilarityScan(clip.clip_id, mean, mean_loss, cs, loss))
    return out
