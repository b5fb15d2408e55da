"""Generator losses: three lip-sync variants, pixel, perceptual and their weighted total.

All sync variants splice the generated crops into the full ground-truth
track, extract features over the whole clip, and only then cut the
generated span out in feature space. Gradients reach the generated frames
only; the extractor is frozen.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import (AudioTooShort, BackboneUnavailable, LengthMismatch, ModelLoadError, NonFiniteLoss,
                     ShapeMismatch)
from .features import AudioInput, ExtractorSpec, as_mel, audio_covers, mel_windows
from .media import MouthTrack, SegmentSpan

SYNC_VARIANTS = ("unsupervised", "visual_visual", "multimodal", "none")


@dataclass
class LossConfig:
    lambda_pixel: float = 10.0
    lambda_perceptual: float = 1.0
    lambda_sync: float = 0.5
    lambda_gan: float = 1.0
    sync_variant: str = "unsupervised"
    cs_clamp_eps: float = 1e-7
    probability: str = "clamp"  # or "affine": p = (CS + 1) / 2

    def __post_init__(self):
        if min(self.lambda_pixel, self.lambda_perceptual, self.lambda_sync, self.lambda_gan) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 < self.cs_clamp_eps < 1:
            raise ValueError("cs_clamp_eps must lie in (0, 1)")
        if self.sync_variant not in SYNC_VARIANTS:
            raise ValueError(f"unknown sync variant {self.sync_variant!r}")
        if self.probability not in ("clamp", "affine"):
            raise ValueError(f"unknown probability mapping {self.probability!r}")


@dataclass
class LossBreakdown:
    total: float
    gan: float
    pixel: float
    perceptual: float
    sync: float
    gradient_available: bool = False
    tensor: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)

    def to_record(self) -> dict:
        return {k: getattr(self, k) for k in ("total", "gan", "pixel", "perceptual", "sync", "gradient_available")}


# ---------------------------------------------------------------------------
# sync losses


def similarity_to_loss(cs: torch.Tensor, eps: float = 1e-7, probability: str = "clamp") -> torch.Tensor:
    """-log p with p = clamp(CS, eps, 1), or p = (CS + 1) / 2 clamped likewise."""
    p = (cs + 1) / 2 if probability == "affine" else cs
    return -torch.log(p.clamp(eps, 1.0))


def mean_row_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # eps keeps a zero row finite (CS 0) instead of NaN
    return F.cosine_similarity(a, b, dim=-1, eps=1e-12).mean(dim=-1)


def sync_loss_from_features(fa: torch.Tensor, fb: torch.Tensor, eps: float = 1e-7,
                            probability: str = "clamp") -> torch.Tensor:
    """Lip-sync loss between two already-sliced (k, D) feature blocks."""
    fa, fb = torch.as_tensor(fa), torch.as_tensor(fb)
    if fa.shape != fb.shape:
        raise ShapeMismatch(f"feature shapes differ: {tuple(fa.shape)} vs {tuple(fb.shape)}")
    return similarity_to_loss(mean_row_cosine(fa, fb), eps, probability)


def _toy_model(spec: ExtractorSpec) -> nn.Module:
    if spec.model is None:
        if spec.kind != "toy" or not spec.model_ref:
            raise ModelLoadError("sync losses need an in-process differentiable extractor (toy kind)")
        from .toy import load_toy_extractor
        object.__setattr__(spec, "model", load_toy_extractor(spec.model_ref))
    return spec.model


def _model_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def as_frames(x, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Mouth crops as (N, 3, H, W) floats in [0, 1].

    Accepts a MouthTrack, uint8 NHWC arrays, or tensors already in NCHW.
    """
    if isinstance(x, MouthTrack):
        x = x.crops
    if isinstance(x, np.ndarray):
        scale = 255.0 if x.dtype == np.uint8 else 1.0
        return torch.from_numpy(np.ascontiguousarray(x)).to(dtype).permute(0, 3, 1, 2) / scale
    if x.dtype == torch.uint8:
        return x.to(dtype).permute(0, 3, 1, 2) / 255.0
    return x.to(dtype)


def splice_frames(gt: torch.Tensor, generated: torch.Tensor, span: SegmentSpan) -> torch.Tensor:
    """Differentiable counterpart of :func:`avsync.media.splice_segment`."""
    span.check(gt.shape[0])
    if generated.shape[0] != span.k:
        raise LengthMismatch(f"{generated.shape[0]} generated frames for span of length {span.k}")
    if generated.shape[1:] != gt.shape[1:]:
        raise LengthMismatch(f"generated frame shape {tuple(generated.shape[1:])} != {tuple(gt.shape[1:])}")
    return torch.cat([gt[:span.t], generated, gt[span.stop:]], dim=0)


def _audio_windows(audio, n_steps: int, context: int, dtype) -> torch.Tensor:
    if isinstance(audio, torch.Tensor):  # precomputed (T, context, 80) windows
        return audio.to(dtype)
    if not audio_covers(audio, n_steps):
        raise AudioTooShort(f"audio does not cover {n_steps} frames")
    return torch.from_numpy(mel_windows(as_mel(audio), n_steps, context)).to(dtype)


def _prepare(generated, gt_track, span: SegmentSpan, spec: ExtractorSpec):
    model = _toy_model(spec)
    dtype = _model_dtype(model)
    gen = as_frames(generated, dtype)
    gt = as_frames(gt_track, dtype)
    spliced = splice_frames(gt, gen, span)
    return model, dtype, gt, spliced


def _cfg(cfg: Optional[LossConfig]) -> LossConfig:
    return cfg or LossConfig()


def sync_loss_unsupervised(generated, gt_track, audio: AudioInput, span: SegmentSpan, spec: ExtractorSpec,
                           cfg: Optional[LossConfig] = None) -> torch.Tensor:
    """Visual features of the spliced clip against audio features, on the span only."""
    cfg = _cfg(cfg)
    model, dtype, _, spliced = _prepare(generated, gt_track, span, spec)
    n = spliced.shape[0]
    visual = model.encode(spliced, torch.zeros(n, model.arch.audio_context, 80, dtype=dtype))
    windows = _audio_windows(audio, n, model.arch.audio_context, dtype)
    heard = model.encode(torch.zeros_like(spliced), windows)
    sl = span.as_slice()
    return sync_loss_from_features(visual[sl], heard[sl], cfg.cs_clamp_eps, cfg.probability)


def sync_loss_visual_visual(generated, gt_track, span: SegmentSpan, spec: ExtractorSpec,
                            cfg: Optional[LossConfig] = None) -> torch.Tensor:
    """Visual features of the spliced clip against those of the untouched GT clip."""
    cfg = _cfg(cfg)
    model, dtype, gt, spliced = _prepare(generated, gt_track, span, spec)
    silent = torch.zeros(spliced.shape[0], model.arch.audio_context, 80, dtype=dtype)
    gen_feat = model.encode(spliced, silent)
    gt_feat = model.encode(gt, silent)
    sl = span.as_slice()
    return sync_loss_from_features(gen_feat[sl], gt_feat[sl], cfg.cs_clamp_eps, cfg.probability)


def sync_loss_multimodal(generated, gt_track, audio: AudioInput, span: SegmentSpan, spec: ExtractorSpec,
                         cfg: Optional[LossConfig] = None) -> torch.Tensor:
    """Fused (spliced, audio) features against fused (GT, audio) features."""
    cfg = _cfg(cfg)
    model, dtype, gt, spliced = _prepare(generated, gt_track, span, spec)
    windows = _audio_windows(audio, spliced.shape[0], model.arch.audio_context, dtype)
    gen_feat = model.encode(spliced, windows)
    gt_feat = model.encode(gt, windows)
    sl = span.as_slice()
    return sync_loss_from_features(gen_feat[sl], gt_feat[sl], cfg.cs_clamp_eps, cfg.probability)


def sync_loss(variant: str, generated, gt_track, audio, span: SegmentSpan, spec: ExtractorSpec,
              cfg: Optional[LossConfig] = None) -> torch.Tensor:
    if variant == "unsupervised":
        return sync_loss_unsupervised(generated, gt_track, audio, span, spec, cfg)
    if variant == "visual_visual":
        return sync_loss_visual_visual(generated, gt_track, span, spec, cfg)
    if variant == "multimodal":
        return sync_loss_multimodal(generated, gt_track, audio, span, spec, cfg)
    if variant == "none":
        return torch.zeros(())
    raise ValueError(f"unknown sync variant {variant!r}")


# ---------------------------------------------------------------------------
# image losses


def pixel_loss(generated: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference."""
    generated, gt = torch.as_tensor(generated), torch.as_tensor(gt)
    if generated.shape != gt.shape:
        raise ShapeMismatch(f"image shapes differ: {tuple(generated.shape)} vs {tuple(gt.shape)}")
    return (generated - gt).abs().mean()


class IdentityBackbone(nn.Module):
    """phi(x) = x with weight 1."""

    weights = (1.0,)

    def forward(self, x):
        return [x]


class TinyConvBackbone(nn.Module):
    """Three fixed random conv stages; a self-contained stand-in for a pretrained network.

    Each stage's weight is 1 / sqrt(C * H * W) of its output, turning the
    per-layer L2 distance into a root-mean-square difference.
    """

    def __init__(self, seed: int = 0, channels: Sequence[int] = (8, 16, 16)):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            layers, c_in = [], 3
            for i, c in enumerate(channels):
                layers.append(nn.Conv2d(c_in, c, 3, stride=1 if i == 0 else 2, padding=1))
                c_in = c
            self.stages = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)
        self.weights = None

    def forward(self, x):
        feats = []
        for conv in self.stages:
            x = torch.tanh(conv(x))
            feats.append(x)
        return feats


class VGGBackbone(nn.Module):
    """VGG-19 relu1_2, relu2_2, relu3_4, relu4_4 and relu5_4 activations.

    Needs ImageNet weights from ``weights_path`` or the torchvision cache;
    raises BackboneUnavailable otherwise.
    """

    taps = (3, 8, 17, 26, 35)

    def __init__(self, weights_path: Optional[str] = None):
        super().__init__()
        try:
            from torchvision.models import VGG19_Weights, vgg19
        except ImportError as exc:
            raise BackboneUnavailable(f"torchvision unavailable: {exc}") from exc
        try:
            if weights_path:
                net = vgg19()
                net.load_state_dict(torch.load(weights_path, map_location="cpu"))
            else:
                net = vgg19(weights=VGG19_Weights.IMAGENET1K_V1)
        except Exception as exc:  # download or file errors
            raise BackboneUnavailable(f"VGG-19 weights unavailable: {exc}") from exc
        self.features = net.features[: self.taps[-1] + 1].eval()
        for p in self.parameters():
            p.requires_grad_(False)
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        self.weights = None

    def forward(self, x):
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        feats = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self.taps:
                feats.append(x)
        return feats


def _l2(diff: torch.Tensor) -> torch.Tensor:
    """Per-sample L2 norm with a zero (not NaN) gradient at the origin."""
    sq = diff.flatten(1).pow(2).sum(dim=1)
    safe = torch.where(sq > 0, sq, torch.ones_like(sq))
    return torch.where(sq > 0, safe.sqrt(), torch.zeros_like(sq))


def perceptual_loss(generated: torch.Tensor, gt: torch.Tensor, backbone: Optional[nn.Module] = None,
                    weights: Optional[Sequence[float]] = None, fallback: bool = False) -> torch.Tensor:
    """Weighted sum over backbone layers of the L2 distance between feature maps, batch-averaged.

    ``backbone=None`` asks for VGG-19; if its weights cannot be loaded,
    BackboneUnavailable is raised, or with ``fallback=True`` a pixel-space L2
    proxy is used and a warning is emitted.
    """
    generated, gt = torch.as_tensor(generated), torch.as_tensor(gt)
    if generated.shape != gt.shape:
        raise ShapeMismatch(f"image shapes differ: {tuple(generated.shape)} vs {tuple(gt.shape)}")
    if backbone is None:
        try:
            backbone = VGGBackbone()
        except BackboneUnavailable as exc:
            if not fallback:
                raise
            warnings.warn(f"perceptual backbone unavailable, using pixel-space proxy: {exc}", RuntimeWarning)
            backbone = IdentityBackbone()
    feats_g = backbone(generated)
    with torch.no_grad():
        feats_t = backbone(gt)
    if weights is None:
        weights = getattr(backbone, "weights", None)
    if weights is None:
        weights = [1.0 / math.sqrt(f[0].numel()) for f in feats_t]
    if len(weights) != len(feats_g) or not feats_g:
        raise ValueError(f"{len(weights)} weights for {len(feats_g)} backbone layers")
    total = generated.new_zeros(())
    for c, fg, ft in zip(weights, feats_g, feats_t):
        total = total + c * _l2(fg - ft).mean()
    return total


# ---------------------------------------------------------------------------
# total


def _finite(x) -> bool:
    return bool(torch.isfinite(torch.as_tensor(x)).all())


def total_loss(parts: dict, cfg: Optional[LossConfig] = None) -> LossBreakdown:
    """lambda_gan * gan + lambda_pixel * pixel + lambda_perceptual * perceptual + lambda_sync * sync.

    ``parts`` maps gan/pixel/perceptual/sync to floats or scalar tensors. With
    ``sync_variant="none"`` the sync entry is ignored and recorded as 0.
    """
    cfg = _cfg(cfg)
    parts = dict(parts)
    if cfg.sync_variant == "none":
        parts["sync"] = 0.0
    for name in ("gan", "pixel", "perceptual", "sync"):
        parts.setdefault(name, 0.0)
        if not _finite(parts[name]):
            raise NonFiniteLoss(f"{name} loss is not finite")
    total = (cfg.lambda_gan * parts["gan"] + cfg.lambda_pixel * parts["pixel"]
             + cfg.lambda_perceptual * parts["perceptual"] + cfg.lambda_sync * parts["sync"])
    if not _finite(total):
        raise NonFiniteLoss("total loss is not finite")
    grad = isinstance(total, torch.Tensor) and total.requires_grad
    as_float = lambda x: float(x.detach()) if isinstance(x, torch.Tensor) else float(x)  # noqa: E731
    return LossBreakdown(
        total=as_float(total), gan=as_float(parts["gan"]), pixel=as_float(parts["pixel"]),
        perceptual=as_float(parts["perceptual"]), sync=as_float(parts["sync"]),
        gradient_available=grad, tensor=total if isinstance(total, torch.Tensor) else None,
    )
