"""Reduced-width talking-face generator and its training harness.

Generator skeleton: identity and pose encoders of strided conv blocks, a
1x1 conv squeezing their concatenated bottleneck, a learned audio embedding
tiled over space, and transposed-conv generator blocks with additive skips
from the reciprocal encoder blocks. Trained on fixture clips with the
weighted GAN + pixel + perceptual + sync objective.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import NonFiniteLoss, ShapeError, SpecInvalid
from .features import ExtractorSpec, mel_windows
from .losses import LossConfig, TinyConvBackbone, perceptual_loss, pixel_loss, sync_loss, total_loss
from .media import CROP_SIZE, HEURISTIC_WINDOW, MouthTrack, SegmentSpan, crop_mouth, mel_spectrogram

logger = logging.getLogger(__name__)

GEN_MEL_CONTEXT = 16  # 0.2 s of mel frames per generated frame


@dataclass(frozen=True)
class ToyGeneratorSpec:
    """Toy generator shape. ``widths[i]`` is the channel count of encoder
    block i (finest first); generator blocks mirror it so skips pair off.
    The conv stacks run at 96 / ``internal_scale`` pixels; the output is
    upsampled back to 96 and joined by a full-resolution shortcut."""

    widths: tuple = (16, 32, 32)
    internal_scale: int = 2
    generator_depth: int = 3
    audio_dim: int = 32
    k: int = 5
    disc_depth: int = 4
    disc_width: int = 32

    @property
    def encoder_depth(self) -> int:
        return len(self.widths)

    def validate(self) -> None:
        if self.encoder_depth != self.generator_depth:
            raise SpecInvalid(f"encoder depth {self.encoder_depth} != generator depth {self.generator_depth};"
                              " skip connections must pair off")
        if self.encoder_depth < 1 or min(self.widths) < 1 or self.k < 1 or self.audio_dim < 1:
            raise SpecInvalid("depths, widths and k must be positive")
        if self.internal_scale not in (1, 2, 4):
            raise SpecInvalid("internal_scale must be 1, 2 or 4")
        side = CROP_SIZE // self.internal_scale
        if side % (2 ** self.encoder_depth) or side % (2 ** self.disc_depth):
            raise SpecInvalid("96 px frames must divide evenly through every strided block")


@dataclass
class TrainRunConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    steps: int = 500
    batch_size: int = 2
    seed: int = 0
    lr: float = 1e-4
    optimizer: str = "adam"


@dataclass
class AblationResult:
    table: dict  # variant -> metric -> mean over seeds
    per_seed: dict  # variant -> list of metric dicts
    seeds: tuple
    eval_clip_ids: tuple

    def to_record(self) -> dict:
        return {"table": self.table, "per_seed": self.per_seed, "seeds": list(self.seeds),
                "eval_clip_ids": list(self.eval_clip_ids)}


# ---------------------------------------------------------------------------
# models


def _conv_bn(c_in, c_out, stride=1):
    return [nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1), nn.BatchNorm2d(c_out), nn.ReLU()]


class _EncoderBlock(nn.Sequential):
    def __init__(self, c_in, c_out):
        super().__init__(*_conv_bn(c_in, c_out, 2), *_conv_bn(c_out, c_out), *_conv_bn(c_out, c_out))


class _GeneratorBlock(nn.Sequential):
    def __init__(self, c_in, c_out):
        super().__init__(nn.ConvTranspose2d(c_in, c_out, 4, stride=2, padding=1), nn.BatchNorm2d(c_out), nn.ReLU(),
                         *_conv_bn(c_out, c_out), *_conv_bn(c_out, c_out))


class FaceEncoder(nn.Module):
    def __init__(self, widths):
        super().__init__()
        ins = (3,) + tuple(widths[:-1])
        self.blocks = nn.ModuleList([_EncoderBlock(c_in, c_out) for c_in, c_out in zip(ins, widths)])

    def forward(self, x):
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats


class ToyGenerator(nn.Module):
    def __init__(self, spec: ToyGeneratorSpec):
        super().__init__()
        self.spec = spec
        widths = tuple(spec.widths)
        w = widths[-1]
        self.identity_encoder = FaceEncoder(widths)
        self.pose_encoder = FaceEncoder(widths)
        self.audio_encoder = nn.Sequential(
            nn.Linear(GEN_MEL_CONTEXT * 80, 128), nn.ReLU(), nn.Linear(128, spec.audio_dim), nn.ReLU()
        )
        self.squeeze = nn.Sequential(nn.Conv2d(2 * w, w, 1), nn.BatchNorm2d(w), nn.ReLU())
        # block i upsamples into the resolution of encoder block depth - 2 - i
        outs = tuple(reversed(widths[:-1])) + (widths[0],)
        ins = (w + spec.audio_dim,) + outs[:-1]
        self.blocks = nn.ModuleList([_GeneratorBlock(c_in, c_out) for c_in, c_out in zip(ins, outs)])
        self.to_rgb = nn.Conv2d(outs[-1], 3, 3, padding=1)
        # full-resolution shortcut from the masked pose frame straight to the output logits
        self.reference_skip = nn.Conv2d(3, 3, 1)

    def forward(self, identity, pose, mel):
        """identity, pose: (N, 3, 96, 96) in [0, 1]; mel: (N, 16, 80) -> (N, 3, 96, 96)."""
        scale = self.spec.internal_scale
        small = (lambda x: F.avg_pool2d(x, scale)) if scale > 1 else (lambda x: x)
        ids = self.identity_encoder(small(identity))
        poses = self.pose_encoder(small(pose))
        x = self.squeeze(torch.cat([ids[-1], poses[-1]], dim=1))
        audio = self.audio_encoder(mel.flatten(1) / 10.0)
        x = torch.cat([x, audio[:, :, None, None].expand(-1, -1, x.shape[2], x.shape[3])], dim=1)
        depth = len(self.blocks)
        for i, block in enumerate(self.blocks):
            if i > 0:
                skip = depth - 1 - i
                x = x + ids[skip] + poses[skip]
            x = block(x)
        logits = self.to_rgb(x)
        if scale > 1:
            logits = F.interpolate(logits, scale_factor=scale, mode="bilinear", align_corners=False)
        return torch.sigmoid(logits + self.reference_skip(pose * 4.0 - 2.0))

    def generate_frames(self, identity, pose, mel):
        """Same as forward but returns (k, 96, 96, 3) channels-last."""
        return self.forward(identity, pose, mel).permute(0, 2, 3, 1)


class ToyDiscriminator(nn.Module):
    """Strided spectral-norm convs on the frame average-pooled to the generator's working size."""

    def __init__(self, spec: ToyGeneratorSpec):
        super().__init__()
        self.scale = spec.internal_scale
        layers, c_in = [], 3
        for _ in range(spec.disc_depth):
            layers += [nn.utils.spectral_norm(nn.Conv2d(c_in, spec.disc_width, 4, stride=2, padding=1)),
                       nn.LeakyReLU(0.2)]
            c_in = spec.disc_width
        side = CROP_SIZE // spec.internal_scale // 2 ** spec.disc_depth
        layers.append(nn.utils.spectral_norm(nn.Conv2d(c_in, 1, side)))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        if self.scale > 1:
            x = F.avg_pool2d(x, self.scale)
        return self.net(x).flatten()


def build_toy_models(spec: ToyGeneratorSpec = ToyGeneratorSpec(), seed: int = 0):
    spec.validate()
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        generator = ToyGenerator(spec)
        discriminator = ToyDiscriminator(spec)
    return generator, discriminator


def mask_pose_reference(frame):
    """Zero the bottom half (rows 48..95) of a 96x96 frame; numpy HWC or torch (..., C, H, W)."""
    if isinstance(frame, torch.Tensor):
        if frame.shape[-2:] != (CROP_SIZE, CROP_SIZE):
            raise ShapeError(f"expected (..., 3, 96, 96), got {tuple(frame.shape)}")
        out = frame.clone()
        out[..., CROP_SIZE // 2:, :] = 0
        return out
    frame = np.asarray(frame)
    if frame.shape[-3:] != (CROP_SIZE, CROP_SIZE, 3):
        raise ShapeError(f"expected (96, 96, 3), got {frame.shape}")
    out = frame.copy()
    out[..., CROP_SIZE // 2:, :, :] = 0
    return out


def crop_mouth_torch(faces: torch.Tensor) -> torch.Tensor:
    """Differentiable heuristic mouth crop: (N, 3, 96, 96) -> (N, 3, 96, 96)."""
    h, w = faces.shape[-2:]
    fx0, fx1, fy0, fy1 = HEURISTIC_WINDOW
    x0, x1, y0, y1 = round(fx0 * w), round(fx1 * w), round(fy0 * h), round(fy1 * h)
    return F.interpolate(faces[..., y0:y1, x0:x1], size=(CROP_SIZE, CROP_SIZE), mode="bilinear",
                         align_corners=False)


# ---------------------------------------------------------------------------
# data


@dataclass
class _ClipTensors:
    clip_id: str
    faces: torch.Tensor  # (T, 3, 96, 96)
    crops: torch.Tensor  # (T, 3, 96, 96) torch-cropped GT mouths
    gen_mel: torch.Tensor  # (T, 16, 80)
    sync_windows: dict  # audio context -> (T, context, 80)
    mel: np.ndarray


def _prepare_clip(fx, contexts: Sequence[int]) -> _ClipTensors:
    faces = torch.from_numpy(fx.clip.frames).float().permute(0, 3, 1, 2) / 255.0
    mel = mel_spectrogram(fx.clip.audio, fx.clip.sample_rate).values
    T = faces.shape[0]
    return _ClipTensors(
        clip_id=fx.clip_id,
        faces=faces,
        crops=crop_mouth_torch(faces),
        gen_mel=torch.from_numpy(mel_windows(mel, T, GEN_MEL_CONTEXT)),
        sync_windows={c: torch.from_numpy(mel_windows(mel, T, c)) for c in set(contexts)},
        mel=mel,
    )


def _identity_index(rng: np.random.Generator, T: int, span: SegmentSpan) -> int:
    choices = np.concatenate([np.arange(0, span.t), np.arange(span.stop, T)])
    return int(rng.choice(choices)) if len(choices) else span.t


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    generator: ToyGenerator
    discriminator: ToyDiscriminator
    history: list
    checkpoint: dict


def _nonsat_g(logits_fake):
    return F.softplus(-logits_fake).mean()


def _d_loss(logits_real, logits_fake):
    return F.softplus(-logits_real).mean() + F.softplus(logits_fake).mean()


def make_checkpoint(generator, discriminator, spec: ToyGeneratorSpec, run: TrainRunConfig, step: int) -> dict:
    return {
        "generator": {k: v.detach().clone() for k, v in generator.state_dict().items()},
        "discriminator": {k: v.detach().clone() for k, v in discriminator.state_dict().items()},
        "spec": asdict(spec),
        "run": {**asdict(replace(run, loss=LossConfig())), "loss": asdict(run.loss)},
        "seed": run.seed,
        "step": step,
    }


def save_checkpoint(checkpoint: dict, path) -> None:
    torch.save(checkpoint, str(path))


def load_checkpoint(path):
    ckpt = torch.load(str(path), map_location="cpu", weights_only=False)
    spec = ToyGeneratorSpec(**ckpt["spec"])
    generator, discriminator = build_toy_models(spec, ckpt["seed"])
    generator.load_state_dict(ckpt["generator"])
    discriminator.load_state_dict(ckpt["discriminator"])
    return generator, discriminator, ckpt


def train(run: TrainRunConfig, fixtures, extractor: ExtractorSpec, spec: ToyGeneratorSpec = ToyGeneratorSpec(),
          backbone: Optional[nn.Module] = None, checkpoint_path=None, history_path=None,
          log_every: int = 0, init: Optional[dict] = None) -> TrainResult:
    """Train the toy generator; one history record per step, numbered from 1.

    The sync extractor stays frozen, so the sync gradient reaches generated
    pixels only. ``init`` is a checkpoint dict to start from instead of the
    seeded initialization. Any non-finite loss aborts with the step index.
    """
    if len(fixtures) < run.batch_size:
        raise ValueError(f"{len(fixtures)} fixture clips < batch size {run.batch_size}")
    if run.optimizer != "adam":
        raise ValueError(f"unsupported optimizer {run.optimizer!r}")
    generator, discriminator = build_toy_models(spec, run.seed)
    if init is not None:
        if ToyGeneratorSpec(**init["spec"]) != spec:
            raise SpecInvalid("initial checkpoint was built from a different generator spec")
        generator.load_state_dict(init["generator"])
        discriminator.load_state_dict(init["discriminator"])
    backbone = backbone if backbone is not None else TinyConvBackbone(seed=0)
    context = extractor.model.arch.audio_context if extractor.model is not None else 4
    clips = [_prepare_clip(fx, [context]) for fx in fixtures]
    rng = np.random.default_rng(run.seed)
    opt_g = torch.optim.Adam(generator.parameters(), lr=run.lr)
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=run.lr)
    k, cfg = spec.k, run.loss
    use_sync = cfg.sync_variant != "none"
    history = []
    generator.train()
    discriminator.train()
    started = time.time()
    for step in range(run.steps):
        picks = rng.choice(len(clips), size=run.batch_size, replace=False)
        spans, ids, poses, mels, targets = [], [], [], [], []
        for ci in picks:
            c = clips[ci]
            T = c.faces.shape[0]
            span = SegmentSpan(int(rng.integers(0, T - k + 1)), k)
            spans.append(span)
            ids.append(c.faces[_identity_index(rng, T, span)].expand(k, -1, -1, -1))
            target = c.faces[span.as_slice()]
            poses.append(mask_pose_reference(target))
            mels.append(c.gen_mel[span.as_slice()])
            targets.append(target)
        real = torch.cat(targets)
        fake = generator(torch.cat(ids), torch.cat(poses), torch.cat(mels))

        if cfg.lambda_gan > 0:
            opt_d.zero_grad()
            d_loss = _d_loss(discriminator(real), discriminator(fake.detach()))
            d_loss.backward()
            opt_d.step()
            gan = _nonsat_g(discriminator(fake))
        else:
            d_loss = gan = torch.zeros(())
        pix = pixel_loss(fake, real)
        per = perceptual_loss(fake, real, backbone) if cfg.lambda_perceptual > 0 else torch.zeros(())
        if use_sync:
            mouths = crop_mouth_torch(fake)
            terms = []
            for j, (ci, span) in enumerate(zip(picks, spans)):
                c = clips[ci]
                terms.append(sync_loss(cfg.sync_variant, mouths[j * k:(j + 1) * k], c.crops,
                                       c.sync_windows[context], span, extractor, cfg))
            sync = torch.stack(terms).mean()
        else:
            sync = torch.zeros(())
        try:
            breakdown = total_loss({"gan": gan, "pixel": pix, "perceptual": per, "sync": sync}, cfg)
        except NonFiniteLoss as exc:
            raise NonFiniteLoss(str(exc), step=step + 1) from exc
        opt_g.zero_grad()
        breakdown.tensor.backward()
        opt_g.step()

        record = {"step": step + 1, **breakdown.to_record(), "d_loss": float(d_loss.detach())}
        history.append(record)
        if log_every and ((step + 1) % log_every == 0 or step == 0):
            logger.info("step %d total %.4f pixel %.4f sync %.4f (%.1fs)", step + 1, record["total"],
                        record["pixel"], record["sync"], time.time() - started)

    generator.eval()
    discriminator.eval()
    checkpoint = make_checkpoint(generator, discriminator, spec, run, run.steps)
    if checkpoint_path:
        save_checkpoint(checkpoint, checkpoint_path)
    if history_path:
        Path(history_path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in history))
    return TrainResult(generator, discriminator, history, checkpoint)


# ---------------------------------------------------------------------------
# evaluation and ablation


def generate_clip(generator: ToyGenerator, fx, k: int = 5) -> np.ndarray:
    """Re-generate every frame of a clip, k at a time, as uint8 (T, 96, 96, 3).

    The identity reference for each chunk is the frame half a clip away.
    """
    faces = torch.from_numpy(fx.clip.frames).float().permute(0, 3, 1, 2) / 255.0
    mel = mel_spectrogram(fx.clip.audio, fx.clip.sample_rate).values
    T = faces.shape[0]
    gen_mel = torch.from_numpy(mel_windows(mel, T, GEN_MEL_CONTEXT))
    out = []
    generator.eval()
    with torch.no_grad():
        for t in range(0, T, k):
            stop = min(T, t + k)
            ident = faces[(t + T // 2) % T].expand(stop - t, -1, -1, -1)
            frames = generator(ident, mask_pose_reference(faces[t:stop]), gen_mel[t:stop])
            out.append(frames)
    gen = torch.cat(out).permute(0, 2, 3, 1).numpy()
    return np.clip(np.round(gen * 255.0), 0, 255).astype(np.uint8)


def evaluate_generator(generator: ToyGenerator, eval_fixtures, extractor: ExtractorSpec,
                       lse_extractor: Optional[ExtractorSpec] = None, k: int = 5) -> dict:
    """Mean metric table over held-out clips."""
    from .metrics import avs_m, avs_u, avs_v, lse_cd

    rows = {"AVS_u": [], "AVS_m": [], "AVS_v": [], "pixel_l1": [], "LSE_C": [], "LSE_D": []}
    for fx in eval_fixtures:
        gen_frames = generate_clip(generator, fx, k)
        gen_track = crop_mouth(gen_frames)
        gt_track = fx.track()
        audio = fx.clip.audio
        rows["AVS_u"].append(avs_u(gen_track, audio, extractor, permissive=True).value)
        rows["AVS_m"].append(avs_m(gen_track, gt_track, audio, extractor, permissive=True).value)
        rows["AVS_v"].append(avs_v(gen_track, gt_track, extractor, permissive=True).value)
        rows["pixel_l1"].append(float(np.abs(gen_frames.astype(np.float64) - fx.clip.frames).mean() / 255.0))
        if lse_extractor is not None and len(gt_track) >= 35:
            c, d = lse_cd(gen_track, audio, lse_extractor)
            rows["LSE_C"].append(c.value)
            rows["LSE_D"].append(d.value)
    return {name: float(np.mean(vals)) for name, vals in rows.items() if vals}


ABLATION_VARIANTS = ("baseline", "visual_visual", "multimodal", "unsupervised")
WARMUP_LOSS = LossConfig(lambda_gan=0.0, lambda_perceptual=0.0, sync_variant="none")


def run_ablation(base: TrainRunConfig, fixtures, extractor: ExtractorSpec, baseline_extractor: ExtractorSpec,
                 eval_fixtures, seeds: Sequence[int] = (0, 1, 2), spec: ToyGeneratorSpec = ToyGeneratorSpec(),
                 variants: Sequence[str] = ABLATION_VARIANTS, warmup_steps: int = 0,
                 warmup_loss: LossConfig = WARMUP_LOSS) -> AblationResult:
    """Train one generator per (seed, variant), differing only in the sync loss.

    ``baseline`` uses the unsupervised loss form on the short-window
    ``baseline_extractor``; the other three use ``extractor``. With
    ``warmup_steps`` each seed first trains a sync-free generator on
    ``warmup_loss`` (pixel loss only by default) that all variants of that
    seed start from. Every run is scored on
    ``eval_fixtures`` with ``extractor`` (AVS) and ``baseline_extractor`` (LSE).
    """
    per_seed = {v: [] for v in variants}
    for seed in seeds:
        init = None
        if warmup_steps:
            warm = replace(base, seed=seed, steps=warmup_steps, loss=warmup_loss)
            init = train(warm, fixtures, extractor, spec).checkpoint
        for variant in variants:
            sync_variant = "unsupervised" if variant == "baseline" else variant
            sync_extractor = baseline_extractor if variant == "baseline" else extractor
            run = replace(base, seed=seed, loss=replace(base.loss, sync_variant=sync_variant))
            result = train(run, fixtures, sync_extractor, spec, init=init)
            metrics = evaluate_generator(result.generator, eval_fixtures, extractor, baseline_extractor, spec.k)
            logger.info("ablation seed %d %s: %s", seed, variant, metrics)
            per_seed[variant].append(metrics)
    table = {
        v: {m: float(np.mean([row[m] for row in rows])) for m in rows[0]}
        for v, rows in per_seed.items()
    }
    return AblationResult(table=table, per_seed=per_seed, seeds=tuple(seeds),
                          eval_clip_ids=tuple(fx.clip_id for fx in eval_fixtures))
