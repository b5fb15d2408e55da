"""Procedural "talking pattern" clips.

Each frame carries a latent phoneme state. The state fixes both the mouth
shape drawn into the face frame and the tone played during that frame, so
lip sync is a learnable signal without any real faces. Per-clip identity
(skin, eyes, lip colour) and per-frame nuisance (mouth jitter, pixel noise)
are drawn from the clip's own RNG stream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np

from .media import (
    SAMPLES_PER_FRAME,
    TARGET_FPS,
    TARGET_SR,
    MediaClip,
    MouthTrack,
    crop_mouth,
    save_clip_archive,
)

FRAME_SIZE = 96
MOUTH_CENTER = (48, 67)  # (x, y) in face-frame pixels
N_LIP_POINTS = 20


@dataclass
class FixtureClip:
    clip: MediaClip
    states: np.ndarray  # (N,) phoneme state per frame
    landmarks: np.ndarray  # (N, 20, 2) outer-lip points, (x, y)
    n_classes: int

    @property
    def clip_id(self) -> str:
        return self.clip.clip_id

    def track(self, use_landmarks: bool = False) -> MouthTrack:
        """Heuristic-window crop by default; the tighter landmark crop with ``use_landmarks``."""
        return crop_mouth(self.clip, self.landmarks if use_landmarks else None)


def tone_frequency(state: int, n_classes: int) -> float:
    if n_classes == 1:
        return 250.0
    return 250.0 * 24.0 ** (state / (n_classes - 1))


def mouth_shape(state: int, n_classes: int) -> tuple[float, float, bool]:
    """Half-width, half-height and teeth flag of the mouth opening for a state."""
    openness = (state + 1) / n_classes
    return 13.0 - 3.0 * openness, 1.5 + 8.0 * openness, state % 2 == 1


def state_sequence(rng: np.random.Generator, n_frames: int, n_classes: int) -> np.ndarray:
    states = np.empty(n_frames, dtype=np.int64)
    current = int(rng.integers(n_classes))
    i = 0
    while i < n_frames:
        run = int(rng.integers(2, 7))
        states[i:i + run] = current
        i += run
        if n_classes > 1:
            current = (current + int(rng.integers(1, n_classes))) % n_classes
    return states


def synth_audio(states: Sequence[int], n_classes: int, rng: np.random.Generator,
                amplitude: float = 0.3, noise: float = 0.01) -> np.ndarray:
    """Phase-continuous tone track, one state per 640-sample frame, plus a weak harmonic."""
    freqs = np.repeat([tone_frequency(int(s), n_classes) for s in states], SAMPLES_PER_FRAME)
    phase = 2 * np.pi * np.cumsum(freqs) / TARGET_SR
    wave = amplitude * (np.sin(phase) + 0.3 * np.sin(2 * phase + 0.5))
    wave += noise * rng.standard_normal(len(wave))
    return np.clip(wave, -1.0, 1.0).astype(np.float32)


def _lip_points(cx: float, cy: float, half_w: float, half_h: float) -> np.ndarray:
    angles = np.linspace(0, 2 * np.pi, N_LIP_POINTS, endpoint=False)
    return np.stack([cx + (half_w + 2.5) * np.cos(angles), cy + (half_h + 2.5) * np.sin(angles)], axis=1)


def _draw_face(identity: dict, state: int, n_classes: int, offset: tuple[int, int],
               rng: np.random.Generator, pixel_noise: float) -> tuple[np.ndarray, np.ndarray]:
    img = np.empty((FRAME_SIZE, FRAME_SIZE, 3), dtype=np.uint8)
    img[...] = identity["background"]
    cv2.ellipse(img, (48, 50), (36, 45), 0, 0, 360, identity["skin"], -1)
    for ex in (48 - identity["eye_gap"], 48 + identity["eye_gap"]):
        cv2.circle(img, (ex, 34), identity["eye_radius"], identity["eye"], -1)
    cv2.line(img, (46, 42), (44, 54), identity["shadow"], 2)

    half_w, half_h, teeth = mouth_shape(state, n_classes)
    cx, cy = MOUTH_CENTER[0] + offset[0], MOUTH_CENTER[1] + offset[1]
    axes_outer = (int(round(half_w + 2.5)), int(round(half_h + 2.5)))
    axes_inner = (int(round(half_w)), int(round(half_h)))
    cv2.ellipse(img, (cx, cy), axes_outer, 0, 0, 360, identity["lips"], -1)
    cv2.ellipse(img, (cx, cy), axes_inner, 0, 0, 360, (35, 8, 18), -1)
    if teeth:
        band = max(1, int(round(half_h * 0.45)))
        cv2.rectangle(img, (cx - axes_inner[0] + 3, cy - axes_inner[1]),
                      (cx + axes_inner[0] - 3, cy - axes_inner[1] + band), (235, 235, 225), -1)
    if pixel_noise > 0:
        noisy = img.astype(np.float64) + pixel_noise * rng.standard_normal(img.shape)
        img = np.clip(np.round(noisy), 0, 255).astype(np.uint8)
    return img, _lip_points(cx, cy, half_w, half_h)


def _identity(rng: np.random.Generator) -> dict:
    skin = rng.integers([150, 100, 70], [240, 190, 150])
    return {
        "background": tuple(int(v) for v in rng.integers(20, 120, size=3)),
        "skin": tuple(int(v) for v in skin),
        "shadow": tuple(int(v) for v in (skin * 0.75)),
        "eye": tuple(int(v) for v in rng.integers(10, 90, size=3)),
        "eye_gap": int(rng.integers(12, 17)),
        "eye_radius": int(rng.integers(3, 6)),
        "lips": tuple(int(v) for v in rng.integers([140, 40, 50], [210, 90, 110])),
    }


def make_fixture_clip(seed, n_frames: int = 50, n_classes: int = 4, states: Optional[Sequence[int]] = None,
                      jitter: int = 1, pixel_noise: float = 3.0, clip_id: Optional[str] = None) -> FixtureClip:
    """Render one synthetic clip at 25 fps / 16 kHz."""
    rng = np.random.default_rng(seed)
    identity = _identity(rng)
    if states is None:
        states = state_sequence(rng, n_frames, n_classes)
    states = np.asarray(states, dtype=np.int64)
    frames, landmarks = [], []
    for s in states:
        offset = tuple(int(v) for v in rng.integers(-jitter, jitter + 1, size=2)) if jitter else (0, 0)
        img, pts = _draw_face(identity, int(s), n_classes, offset, rng, pixel_noise)
        frames.append(img)
        landmarks.append(pts)
    audio = synth_audio(states, n_classes, rng)
    seed_tag = "-".join(str(v) for v in np.atleast_1d(seed))
    clip = MediaClip(frames=np.stack(frames), fps=float(TARGET_FPS), audio=audio, sample_rate=TARGET_SR,
                     clip_id=clip_id or f"fx-{seed_tag}")
    return FixtureClip(clip=clip, states=states, landmarks=np.stack(landmarks), n_classes=n_classes)


def make_fixture_set(n_clips: int, n_classes: int = 4, n_frames: int = 50, seed: int = 0,
                     **kwargs) -> list[FixtureClip]:
    """Clip ``i`` depends only on ``(seed, i)``, never on ``n_clips``."""
    return [
        make_fixture_clip([seed, i], n_frames=n_frames, n_classes=n_classes, clip_id=f"fx{seed}-{i:03d}", **kwargs)
        for i in range(n_clips)
    ]


def mispaired_audio(fixture: FixtureClip, seed: int = 0) -> np.ndarray:
    """Audio whose phoneme differs from the visible one at every frame."""
    shifted = (fixture.states + 1) % fixture.n_classes
    return synth_audio(shifted, fixture.n_classes, np.random.default_rng([seed, 99]))


def write_landmarks(path, landmarks: np.ndarray) -> None:
    """One line per frame: ``x1 y1 x2 y2 ...`` in frame pixels."""
    flat = np.asarray(landmarks, dtype=np.float64).reshape(len(landmarks), -1)
    np.savetxt(str(path), flat, fmt="%.3f")


def write_fixture_manifest(directory, fixtures: Sequence[FixtureClip], generated: Optional[dict] = None,
                           with_gt: bool = True) -> Path:
    """Write clip archives, landmark files and a JSONL manifest for ``fixtures``.

    ``generated`` optionally maps clip_id to replacement frames standing in for a
    model's output; the original frames are then written as the GT video.
    Paths in the manifest are relative to its directory.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.jsonl"
    lines = []
    for fx in fixtures:
        cid = fx.clip_id
        gt_path = directory / f"{cid}.gt.npz"
        lm_path = directory / f"{cid}.landmarks.txt"
        save_clip_archive(gt_path, fx.clip)
        write_landmarks(lm_path, fx.landmarks)
        record = {"clip_id": cid, "video_path": gt_path.name, "landmarks_path": lm_path.name}
        if generated and cid in generated:
            gen_clip = MediaClip(frames=generated[cid], fps=fx.clip.fps, audio=fx.clip.audio,
                                 sample_rate=fx.clip.sample_rate, clip_id=cid)
            gen_path = directory / f"{cid}.gen.npz"
            save_clip_archive(gen_path, gen_clip)
            record["video_path"] = gen_path.name
        if with_gt:
            record["gt_video_path"] = gt_path.name
            record["gt_landmarks_path"] = lm_path.name
        lines.append(json.dumps(record, sort_keys=True))
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
