"""Desk-scale audio-visual feature extractors.

Two small encoders map a mouth crop and a short mel window to D-dim
embeddings in a shared space. Both are bias-free with ReLU hidden
activations, so an all-zero input maps to an all-zero embedding. The joint
encoder sums the two embeddings after scaling each to unit length (a zero
embedding stays zero), so the zero placeholder behaves like an absent
modality and neither modality drowns out the other:

    encode(V, A) = unit(visual(V)) + unit(audio(A))
    encode(V, 0) = unit(visual(V)),  encode(0, A) = unit(audio(A))

The visual encoder is frame-local: row i of its output depends on frame i
only. ``style="avhubert"`` pools globally over space (close to shift
invariant); ``style="syncnet"`` flattens its spatial map and listens to a
single mel frame, standing in for the short-window lip expert.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import InsufficientClasses, NonConvergence
from .media import N_MELS, mel_spectrogram


@dataclass(frozen=True)
class ToyArch:
    style: str = "avhubert"
    embed_dim: int = 32
    audio_context: int = 4
    hidden: int = 64
    pool: int = 24

    def __post_init__(self):
        if self.style not in ("avhubert", "syncnet"):
            raise ValueError(f"unknown toy style {self.style!r}")


SYNCNET_ARCH = ToyArch(style="syncnet", audio_context=1)


def unit_rows(x: torch.Tensor) -> torch.Tensor:
    """Scale rows to unit length; smooth everywhere and exactly zero at zero."""
    return x / torch.sqrt(x.pow(2).sum(dim=-1, keepdim=True) + 1e-12)


class ToyExtractor(nn.Module):
    def __init__(self, arch: ToyArch = ToyArch()):
        super().__init__()
        self.arch = arch
        h, d = arch.hidden, arch.embed_dim
        if arch.style == "avhubert":
            self.visual_net = nn.Sequential(
                nn.Conv2d(3, 16, 3, padding=1, bias=False), nn.ReLU(),
                nn.Conv2d(16, 32, 3, stride=2, padding=1, bias=False), nn.ReLU(),
                nn.Conv2d(32, 32, 3, stride=2, padding=1, bias=False), nn.ReLU(),
            )
            flat = 32
        else:
            self.visual_net = nn.Sequential(
                nn.Conv2d(3, 16, 3, stride=2, padding=1, bias=False), nn.ReLU(),
                nn.Conv2d(16, 16, 3, stride=2, padding=1, bias=False), nn.ReLU(),
            )
            flat = 16 * (arch.pool // 4) ** 2
        self.visual_head = nn.Sequential(
            nn.Linear(flat, h, bias=False), nn.ReLU(), nn.Linear(h, d, bias=False)
        )
        self.audio_net = nn.Sequential(
            nn.Linear(arch.audio_context * N_MELS, h, bias=False), nn.ReLU(),
            nn.Linear(h, h, bias=False), nn.ReLU(),
            nn.Linear(h, d, bias=False),
        )

    @property
    def embed_dim(self) -> int:
        return self.arch.embed_dim

    def visual(self, frames: torch.Tensor) -> torch.Tensor:
        """(N, 3, H, W) crops in [0, 1] -> (N, D)."""
        x = F.adaptive_avg_pool2d(frames, self.arch.pool)
        x = self.visual_net(x)
        x = x.mean(dim=(2, 3)) if self.arch.style == "avhubert" else x.flatten(1)
        return self.visual_head(x)

    def audio(self, mel_windows: torch.Tensor) -> torch.Tensor:
        """(N, context, 80) log-mel windows -> (N, D)."""
        return self.audio_net(mel_windows.flatten(1) / 10.0)

    def encode(self, frames: torch.Tensor, mel_windows: torch.Tensor) -> torch.Tensor:
        """Joint encoder: the fixed [I | I] projection of the concatenated unit-scaled embeddings."""
        return unit_rows(self.visual(frames)) + unit_rows(self.audio(mel_windows))

    def digest(self) -> str:
        h = hashlib.sha256(repr(asdict(self.arch)).encode())
        for name, p in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().to(torch.float64).cpu().numpy().tobytes())
        return h.hexdigest()

    def extractor_id(self) -> str:
        return f"toy-{self.arch.style}-d{self.arch.embed_dim}-{self.digest()[:12]}"

    def float64_copy(self) -> "ToyExtractor":
        cached = getattr(self, "_f64_cache", None)
        key = self.digest()
        if cached is None or cached[0] != key:
            clone = copy.deepcopy(self).double().eval()
            for p in clone.parameters():
                p.requires_grad_(False)
            object.__setattr__(self, "_f64_cache", (key, clone))
            cached = (key, clone)
        return cached[1]


def build_toy_extractor(arch: ToyArch = ToyArch(), seed: int = 0) -> ToyExtractor:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = ToyExtractor(arch)
    return model


def save_toy_extractor(model: ToyExtractor, path) -> None:
    torch.save({"arch": asdict(model.arch), "state_dict": model.state_dict(),
                "summary": getattr(model, "training_summary", None)}, str(path))


def load_toy_extractor(path) -> ToyExtractor:
    blob = torch.load(str(path), map_location="cpu", weights_only=False)
    model = ToyExtractor(ToyArch(**blob["arch"]))
    model.load_state_dict(blob["state_dict"])
    model.training_summary = blob.get("summary")
    return model.eval()


# ---------------------------------------------------------------------------
# training on fixtures


def crops_to_tensor(crops: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(N, H, W, 3) uint8 -> (N, 3, H, W) float in [0, 1]."""
    return torch.from_numpy(np.ascontiguousarray(crops)).to(dtype).permute(0, 3, 1, 2) / 255.0


def _fixture_arrays(fixtures, context: int):
    """Every frame twice: heuristic-window crop and landmark crop, so either cropping path works."""
    from .features import mel_windows

    crops, windows, states = [], [], []
    for fx in fixtures:
        mel = mel_spectrogram(fx.clip.audio, fx.clip.sample_rate).values
        for use_landmarks in (False, True):
            track = fx.track(use_landmarks)
            crops.append(track.crops)
            windows.append(mel_windows(mel, len(track), context))
            states.append(np.asarray(fx.states))
    return (crops_to_tensor(np.concatenate(crops)),
            torch.from_numpy(np.concatenate(windows)).float(),
            torch.from_numpy(np.concatenate(states)))


def _negative_index(states: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """For every row pick another row whose state differs."""
    n = len(states)
    idx = torch.randint(n, (n,), generator=gen)
    for _ in range(100):
        bad = states[idx] == states
        if not bad.any():
            break
        idx[bad] = torch.randint(n, (int(bad.sum()),), generator=gen)
    return idx


def _bce_on_cosine(v, a, target, eps=1e-7):
    # signed embeddings: map CS in [-1, 1] to a probability
    p = ((F.cosine_similarity(v, a, dim=1, eps=1e-12) + 1) / 2).clamp(eps, 1 - eps)
    return F.binary_cross_entropy(p, target)


def sync_margin(model: ToyExtractor, fixtures, seed: int = 0) -> dict:
    """Mean matched-pair CS minus mean mismatched-pair CS over every frame of ``fixtures``."""
    frames, windows, states = _fixture_arrays(fixtures, model.arch.audio_context)
    gen = torch.Generator().manual_seed(seed)
    neg = _negative_index(states, gen)
    with torch.no_grad():
        v = model.visual(frames)
        a = model.audio(windows)
        matched = F.cosine_similarity(v, a, dim=1, eps=1e-12)
        mismatched = F.cosine_similarity(v, a[neg], dim=1, eps=1e-12)
    return {
        "matched": float(matched.mean()),
        "mismatched": float(mismatched.mean()),
        "margin": float(matched.mean() - mismatched.mean()),
    }


def train_toy(fixtures: Sequence, epochs: int = 50, seed: int = 7, arch: ToyArch = ToyArch(),
              lr: float = 1e-3, batch_size: int = 64, holdout_fraction: float = 0.2,
              min_margin: float = 0.1) -> ToyExtractor:
    """Fit a toy extractor with binary cross-entropy on the cosine similarity of
    matched (label 1) and mismatched (label 0) frame/audio pairs."""
    classes = set()
    for fx in fixtures:
        classes.update(int(s) for s in np.unique(fx.states))
    if len(classes) < 2:
        raise InsufficientClasses(f"fixtures contain {len(classes)} phoneme class(es); need at least 2")
    n_hold = max(1, int(round(len(fixtures) * holdout_fraction))) if len(fixtures) > 1 else 0
    train_set = list(fixtures[:len(fixtures) - n_hold])
    holdout = list(fixtures[len(fixtures) - n_hold:]) or train_set

    frames, windows, states = _fixture_arrays(train_set, arch.audio_context)
    model = build_toy_extractor(arch, seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    n = len(states)
    model.train()
    for _ in range(epochs):
        order = torch.randperm(n, generator=gen)
        neg = _negative_index(states, gen)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            v = model.visual(frames[idx])
            a_pos = model.audio(windows[idx])
            a_neg = model.audio(windows[neg[idx]])
            loss = (_bce_on_cosine(v, a_pos, torch.ones(len(idx)))
                    + _bce_on_cosine(v, a_neg, torch.zeros(len(idx))))
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    summary = sync_margin(model, holdout, seed=seed)
    summary.update({"epochs": epochs, "seed": seed, "n_train_clips": len(train_set), "n_holdout_clips": len(holdout)})
    model.training_summary = summary
    if summary["margin"] < min_margin:
        raise NonConvergence(f"matched-vs-mismatched margin {summary['margin']:.3f} < {min_margin}")
    return model
