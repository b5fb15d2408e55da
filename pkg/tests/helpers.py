"""Shared test tooling: finite-difference gradient probes and small float64 inputs."""

import cv2
import numpy as np
import torch

from avsync.features import mel_windows, toy_spec
from avsync.losses import LossConfig, TinyConvBackbone, perceptual_loss, pixel_loss, sync_loss
from avsync.media import SegmentSpan, mel_spectrogram

SIDE = 8


def directional_probes(fn, x, n, seed, h=1e-5):
    """Relative errors of grad . d against a central difference, for ``n`` random unit directions d."""
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    grad = x.grad.detach()
    gen = torch.Generator().manual_seed(seed)
    errors = []
    with torch.no_grad():
        for _ in range(n):
            d = torch.randn(x.shape, generator=gen, dtype=x.dtype)
            d /= d.norm()
            analytic = float((grad * d).sum())
            numeric = float((fn(x + h * d) - fn(x - h * d)) / (2 * h))
            scale = max(abs(analytic), abs(numeric))
            errors.append(0.0 if scale < 1e-12 else abs(analytic - numeric) / scale)
    return errors


def small_inputs(fixture, k=5, t=10, noise=0.05, seed=0):
    """8x8 float64 crops of a fixture clip: (gt clip, generated span, audio windows, span)."""
    crops = np.stack([cv2.resize(c, (SIDE, SIDE), interpolation=cv2.INTER_AREA) for c in fixture.track().crops])
    gt = torch.from_numpy(crops).double().permute(0, 3, 1, 2) / 255.0
    span = SegmentSpan(t, k)
    gen = torch.Generator().manual_seed(seed)
    generated = (gt[span.as_slice()] + noise * torch.randn(gt[span.as_slice()].shape, generator=gen,
                                                           dtype=torch.float64)).clamp(0.0, 1.0)
    return gt, generated, span


def float64_spec(model):
    return toy_spec(model.float64_copy(), "float64")


def audio_windows(fixture, model, n):
    mel = mel_spectrogram(fixture.clip.audio).values
    return torch.from_numpy(mel_windows(mel, n, model.arch.audio_context)).double()


def _interior(loss, eps):
    # strictly inside the clamp: p in (eps, 1)
    return 0.0 < float(loss) < -np.log(eps) - 1e-9


def gradient_check(models, fixture, probes_per_case=20, seed=0):
    """Relative errors per case for every sync variant, the pixel loss and the perceptual loss.

    Sync cases run for each model and probability mapping whose operating
    point is strictly inside the clamp, so no case has a vacuous zero gradient.
    """
    results = {}
    gt = generated = span = None
    for m_i, model in enumerate(models):
        spec = float64_spec(model)
        gt, generated, span = small_inputs(fixture, seed=seed)
        windows = audio_windows(fixture, model, gt.shape[0])
        for variant in ("unsupervised", "visual_visual", "multimodal"):
            for probability in ("clamp", "affine"):
                cfg = LossConfig(probability=probability)
                fn = lambda g, v=variant, c=cfg: sync_loss(v, g, gt, windows, span, spec, c)  # noqa: E731
                if not _interior(fn(generated), cfg.cs_clamp_eps):
                    continue
                results[f"sync_{variant}_{probability}_m{m_i}"] = directional_probes(
                    fn, generated, probes_per_case, seed + len(results))
    target = gt[span.as_slice()]
    results["pixel"] = directional_probes(lambda g: pixel_loss(g, target), generated, 2 * probes_per_case, seed + 100)
    backbone = TinyConvBackbone(seed=0).double()
    results["perceptual"] = directional_probes(lambda g: perceptual_loss(g, target, backbone), generated,
                                               2 * probes_per_case, seed + 101)
    return results
