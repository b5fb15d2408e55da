"""Clip ingestion, mouth cropping, mel-spectrograms and geometric perturbations.

Everything downstream assumes 25 fps video and 16 kHz audio, so one video
frame spans 640 samples and 3.2 mel frames. Other rates are converted here,
at ingest, and nowhere else.
"""

from __future__ import annotations

import math
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence, Union

import cv2
import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import (
    DecodeError,
    DegenerateBox,
    DurationMismatch,
    LandmarkCountMismatch,
    LengthMismatch,
    MissingAudio,
    OutOfRangePerturbation,
    SpanOutOfBounds,
    TooShort,
)

TARGET_FPS = 25
TARGET_SR = 16000
SAMPLES_PER_FRAME = TARGET_SR // TARGET_FPS  # 640
CROP_SIZE = 96

HOP = 200
WINDOW = 800
N_MELS = 80
LOG_FLOOR = 1e-5

MOUTH_MARGIN = 0.3
MIN_MOUTH_POINTS = 20
# lower-central window used when no landmarks are supplied: (x0, x1, y0, y1) fractions
HEURISTIC_WINDOW = (0.2, 0.8, 0.4, 1.0)

MAX_DURATION_GAP_S = 0.5


@dataclass
class MediaClip:
    frames: np.ndarray  # (N, H, W, 3) uint8, RGB
    fps: float
    audio: np.ndarray  # mono, float in [-1, 1]
    sample_rate: int
    clip_id: str = ""

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def duration(self) -> float:
        return self.n_frames / self.fps


@dataclass
class MouthTrack:
    crops: np.ndarray  # (N, 96, 96, 3) uint8
    landmark_source: str = "provided"  # or "centered-heuristic"

    def __len__(self) -> int:
        return int(self.crops.shape[0])

    def __post_init__(self):
        crops = np.asarray(self.crops)
        if crops.ndim != 4 or crops.shape[1:3] != (CROP_SIZE, CROP_SIZE):
            raise ValueError(f"mouth crops must be (N, {CROP_SIZE}, {CROP_SIZE}, C), got {crops.shape}")
        self.crops = crops


@dataclass(frozen=True)
class SegmentSpan:
    """Half-open interval [t, t + k) of generated timesteps."""

    t: int
    k: int = 5

    def __post_init__(self):
        if self.t < 0 or self.k < 1:
            raise SpanOutOfBounds(f"invalid span t={self.t}, k={self.k}")

    @property
    def stop(self) -> int:
        return self.t + self.k

    def check(self, length: int) -> None:
        if self.stop > length:
            raise SpanOutOfBounds(f"span [{self.t}, {self.stop}) exceeds length {length}")

    def as_slice(self) -> slice:
        return slice(self.t, self.stop)


@dataclass
class MelSpectrogram:
    values: np.ndarray  # (T_a, n_mels) natural-log mel energies
    hop: int = HOP
    window: int = WINDOW
    n_mels: int = N_MELS

    @property
    def n_frames(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class AffinePerturbation:
    shift_px: int = 0
    rotation_deg: float = 0.0
    fill: int = 0

    @property
    def is_identity(self) -> bool:
        return self.shift_px == 0 and self.rotation_deg == 0

    def check(self) -> None:
        if abs(self.shift_px) >= CROP_SIZE or abs(self.rotation_deg) > 45:
            raise OutOfRangePerturbation(f"shift {self.shift_px}px / rotation {self.rotation_deg} deg out of range")


# ---------------------------------------------------------------------------
# ingestion


def _to_float_audio(samples: np.ndarray) -> np.ndarray:
    samples = np.asarray(samples)
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if np.issubdtype(samples.dtype, np.integer):
        info = np.iinfo(samples.dtype)
        if info.min == 0:  # unsigned 8-bit wav
            samples = (samples.astype(np.float64) - (info.max + 1) / 2) / ((info.max + 1) / 2)
        else:
            samples = samples.astype(np.float64) / (-float(info.min))
    return np.clip(samples.astype(np.float32), -1.0, 1.0)


def normalize_fps(frames: np.ndarray, fps: float, target: int = TARGET_FPS) -> np.ndarray:
    """Resample a frame sequence to ``target`` fps by duplicating or dropping frames.

    Output frame j shows the source frame on screen at time j / target.
    """
    n = frames.shape[0]
    if fps == target:
        return frames
    n_out = int(round(n * target / fps))
    idx = np.floor(np.arange(n_out) * fps / target + 1e-9).astype(int)
    return frames[np.minimum(idx, n - 1)]


def resample_audio(audio: np.ndarray, sample_rate: int, target: int = TARGET_SR) -> np.ndarray:
    if sample_rate == target:
        return np.asarray(audio, dtype=np.float32)
    ratio = Fraction(target, int(sample_rate)).limit_denominator(10000)
    out = resample_poly(np.asarray(audio, dtype=np.float64), ratio.numerator, ratio.denominator)
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def normalize_clip(clip: MediaClip) -> MediaClip:
    """Bring a clip to 25 fps / 16 kHz and trim or zero-pad audio to the video length.

    Idempotent: a normalized clip passes through unchanged.
    """
    video_s = clip.n_frames / clip.fps
    audio_s = len(clip.audio) / clip.sample_rate
    if abs(video_s - audio_s) > MAX_DURATION_GAP_S:
        raise DurationMismatch(
            f"{clip.clip_id}: video {video_s:.3f}s vs audio {audio_s:.3f}s differ by more than {MAX_DURATION_GAP_S}s"
        )
    frames = normalize_fps(clip.frames, clip.fps)
    audio = resample_audio(clip.audio, clip.sample_rate)
    n_samples = frames.shape[0] * SAMPLES_PER_FRAME
    if len(audio) >= n_samples:
        audio = audio[:n_samples]
    else:
        audio = np.concatenate([audio, np.zeros(n_samples - len(audio), dtype=np.float32)])
    return MediaClip(frames=frames, fps=float(TARGET_FPS), audio=audio, sample_rate=TARGET_SR, clip_id=clip.clip_id)


def _read_video_cv2(path: Path) -> tuple[np.ndarray, float]:
    cap = cv2.VideoCapture(str(path))
    if not cap.isOpened():
        raise DecodeError(f"cannot open video {path}")
    fps = cap.get(cv2.CAP_PROP_FPS)
    frames = []
    while True:
        ok, frame = cap.read()
        if not ok:
            break
        frames.append(cv2.cvtColor(frame, cv2.COLOR_BGR2RGB))
    cap.release()
    if not frames or not fps or fps <= 0:
        raise DecodeError(f"no decodable frames in {path}")
    return np.stack(frames), float(fps)


def _read_wav(path: Path) -> tuple[np.ndarray, int]:
    try:
        sr, samples = wavfile.read(str(path))
    except (ValueError, OSError) as exc:
        raise DecodeError(f"cannot decode audio {path}: {exc}") from exc
    return _to_float_audio(samples), int(sr)


def _ffmpeg_audio(path: Path) -> Optional[tuple[np.ndarray, int]]:
    exe = shutil.which("ffmpeg")
    if exe is None:
        return None
    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp) / "audio.wav"
        proc = subprocess.run(
            [exe, "-loglevel", "error", "-i", str(path), "-vn", "-ac", "1", "-ar", str(TARGET_SR), str(out)],
            capture_output=True,
        )
        if proc.returncode != 0 or not out.exists():
            return None
        return _read_wav(out)


def save_clip_archive(path: Union[str, Path], clip: MediaClip) -> None:
    """Write a lossless ``.npz`` clip archive readable by :func:`load_clip`."""
    np.savez_compressed(
        str(path),
        frames=clip.frames,
        fps=np.float64(clip.fps),
        audio=clip.audio.astype(np.float32),
        sample_rate=np.int64(clip.sample_rate),
    )


def load_clip(video_path, audio_path=None, clip_id: Optional[str] = None) -> MediaClip:
    """Decode a clip and normalize it to 25 fps / 16 kHz.

    ``video_path`` is either a ``.npz`` clip archive (frames, fps and optionally
    audio, sample_rate) or any container OpenCV can decode. Audio comes from
    ``audio_path`` (WAV or ``.npz``) when given, else from the video itself.
    """
    video_path = Path(video_path)
    if not video_path.exists():
        raise FileNotFoundError(video_path)
    clip_id = clip_id or video_path.stem
    audio = sr = None

    if video_path.suffix == ".npz":
        try:
            with np.load(video_path) as data:
                frames = np.asarray(data["frames"], dtype=np.uint8)
                fps = float(data["fps"])
                if "audio" in data.files:
                    audio, sr = _to_float_audio(data["audio"]), int(data["sample_rate"])
        except (KeyError, ValueError, OSError) as exc:
            raise DecodeError(f"bad clip archive {video_path}: {exc}") from exc
    else:
        frames, fps = _read_video_cv2(video_path)

    if frames.ndim != 4 or frames.shape[-1] != 3 or frames.shape[0] == 0:
        raise DecodeError(f"{video_path}: expected (N, H, W, 3) frames, got {frames.shape}")

    if audio_path is not None:
        audio_path = Path(audio_path)
        if not audio_path.exists():
            raise FileNotFoundError(audio_path)
        if audio_path.suffix == ".npz":
            with np.load(audio_path) as data:
                audio, sr = _to_float_audio(data["audio"]), int(data["sample_rate"])
        else:
            audio, sr = _read_wav(audio_path)
    elif audio is None:
        decoded = _ffmpeg_audio(video_path)
        if decoded is None:
            raise MissingAudio(f"{video_path}: no audio stream found and no audio_path given")
        audio, sr = decoded

    if audio is None or len(audio) == 0:
        raise MissingAudio(f"{clip_id}: empty audio")
    return normalize_clip(MediaClip(frames=frames, fps=fps, audio=audio, sample_rate=sr, clip_id=clip_id))


def load_frames(video_path) -> np.ndarray:
    """Frames only, resampled to 25 fps; for ground-truth videos whose audio is not needed."""
    video_path = Path(video_path)
    if not video_path.exists():
        raise FileNotFoundError(video_path)
    if video_path.suffix == ".npz":
        try:
            with np.load(video_path) as data:
                frames, fps = np.asarray(data["frames"], dtype=np.uint8), float(data["fps"])
        except (KeyError, ValueError, OSError) as exc:
            raise DecodeError(f"bad clip archive {video_path}: {exc}") from exc
    else:
        frames, fps = _read_video_cv2(video_path)
    if frames.ndim != 4 or frames.shape[-1] != 3 or frames.shape[0] == 0:
        raise DecodeError(f"{video_path}: expected (N, H, W, 3) frames, got {frames.shape}")
    return normalize_fps(frames, fps)


# ---------------------------------------------------------------------------
# mouth crops


def mouth_box(points: np.ndarray, frame_shape: Sequence[int], margin: float = MOUTH_MARGIN) -> tuple[int, int, int, int]:
    """Integer crop box ``(x0, y0, x1, y1)`` around mouth landmarks, half-open.

    The landmark bounding box is grown by ``margin`` times its width/height on
    each side, rounded outward and clipped to the frame.
    """
    points = np.asarray(points, dtype=np.float64)
    xmin, ymin = points.min(axis=0)
    xmax, ymax = points.max(axis=0)
    w, h = xmax - xmin, ymax - ymin
    if w <= 0 or h <= 0:
        raise DegenerateBox(f"mouth landmarks span zero area ({w:.2f} x {h:.2f})")
    height, width = frame_shape[:2]
    x0 = max(0, math.floor(xmin - margin * w))
    y0 = max(0, math.floor(ymin - margin * h))
    x1 = min(width, math.ceil(xmax + margin * w))
    y1 = min(height, math.ceil(ymax + margin * h))
    if x1 <= x0 or y1 <= y0:
        raise DegenerateBox("mouth box lies outside the frame")
    return x0, y0, x1, y1


def heuristic_box(frame_shape: Sequence[int]) -> tuple[int, int, int, int]:
    height, width = frame_shape[:2]
    fx0, fx1, fy0, fy1 = HEURISTIC_WINDOW
    return round(fx0 * width), round(fy0 * height), round(fx1 * width), round(fy1 * height)


def _resize(patch: np.ndarray) -> np.ndarray:
    return cv2.resize(patch, (CROP_SIZE, CROP_SIZE), interpolation=cv2.INTER_LINEAR)


def crop_mouth(clip: Union[MediaClip, np.ndarray], landmarks=None, margin: float = MOUTH_MARGIN) -> MouthTrack:
    """Cut a 96x96 mouth crop from every frame.

    With ``landmarks`` (one ``(M, 2)`` array of (x, y) per frame, M >= 20) the
    box follows the mouth; without, a fixed lower-central window is used.
    """
    frames = clip.frames if isinstance(clip, MediaClip) else np.asarray(clip)
    if landmarks is None:
        x0, y0, x1, y1 = heuristic_box(frames.shape[1:3])
        crops = np.stack([_resize(np.ascontiguousarray(f[y0:y1, x0:x1])) for f in frames])
        return MouthTrack(crops=crops, landmark_source="centered-heuristic")

    landmarks = [np.asarray(lm, dtype=np.float64).reshape(-1, 2) for lm in landmarks]
    if len(landmarks) != len(frames):
        raise LandmarkCountMismatch(f"{len(landmarks)} landmark sets for {len(frames)} frames")
    crops = []
    for i, (frame, lm) in enumerate(zip(frames, landmarks)):
        if lm.shape[0] < MIN_MOUTH_POINTS:
            raise LandmarkCountMismatch(f"frame {i}: {lm.shape[0]} mouth points, need >= {MIN_MOUTH_POINTS}")
        x0, y0, x1, y1 = mouth_box(lm, frame.shape, margin)
        crops.append(_resize(np.ascontiguousarray(frame[y0:y1, x0:x1])))
    return MouthTrack(crops=np.stack(crops), landmark_source="provided")


# ---------------------------------------------------------------------------
# mel spectrogram


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int = TARGET_SR, n_fft: int = WINDOW, n_mels: int = N_MELS,
                   fmin: float = 0.0, fmax: Optional[float] = None) -> np.ndarray:
    """Area-normalized triangular filters on the HTK mel scale, shape (n_mels, n_fft // 2 + 1)."""
    fmax = sample_rate / 2 if fmax is None else fmax
    fft_freqs = np.linspace(0, sample_rate / 2, n_fft // 2 + 1)
    edges = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    lower = edges[:-2, None]
    center = edges[1:-1, None]
    upper = edges[2:, None]
    rising = (fft_freqs[None, :] - lower) / (center - lower)
    falling = (upper - fft_freqs[None, :]) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    weights *= (2.0 / (upper - lower))
    return weights


def mel_center_frequencies(sample_rate: int = TARGET_SR, n_mels: int = N_MELS) -> np.ndarray:
    return _mel_to_hz(np.linspace(_hz_to_mel(0.0), _hz_to_mel(sample_rate / 2), n_mels + 2))[1:-1]


_FILTERBANK = mel_filterbank()
_HANN = np.hanning(WINDOW + 1)[:-1]  # periodic


def mel_frame_count(n_samples: int) -> int:
    """Frames produced for ``n_samples`` under the centered framing convention."""
    pad = (WINDOW - HOP) // 2
    return (n_samples + 2 * pad - WINDOW) // HOP + 1


def mel_spectrogram(audio, sample_rate: int = TARGET_SR) -> MelSpectrogram:
    """Log mel energies with hop 200, window 800 and 80 bands.

    Framing is centered: the signal is reflect-padded by (window - hop) / 2 on
    both sides so mel frame j is centered on samples [200 j, 200 j + 200).
    A 3200-sample snippet therefore gives exactly 16 frames.
    """
    if sample_rate != TARGET_SR:
        raise ValueError(f"mel_spectrogram expects {TARGET_SR} Hz audio, got {sample_rate}")
    audio = np.asarray(audio, dtype=np.float64)
    if audio.ndim != 1:
        raise ValueError("audio must be mono")
    if len(audio) < WINDOW:
        raise TooShort(f"{len(audio)} samples is shorter than one {WINDOW}-sample window")
    pad = (WINDOW - HOP) // 2
    padded = np.pad(audio, pad, mode="reflect")
    n_frames = (len(padded) - WINDOW) // HOP + 1
    idx = np.arange(WINDOW)[None, :] + HOP * np.arange(n_frames)[:, None]
    spectrum = np.fft.rfft(padded[idx] * _HANN, axis=1)
    power = spectrum.real ** 2 + spectrum.imag ** 2
    mel = power @ _FILTERBANK.T
    return MelSpectrogram(values=np.log(np.maximum(mel, LOG_FLOOR)))


# ---------------------------------------------------------------------------
# perturbations and splicing


def _shift_frames(crops: np.ndarray, shift: int, fill: int) -> np.ndarray:
    out = np.full_like(crops, fill)
    if shift > 0:
        out[:, :, shift:] = crops[:, :, :-shift]
    elif shift < 0:
        out[:, :, :shift] = crops[:, :, -shift:]
    else:
        out[...] = crops
    return out


def _rotate_frames(crops: np.ndarray, degrees: float, fill: int) -> np.ndarray:
    h, w = crops.shape[1:3]
    matrix = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), float(degrees), 1.0)
    return np.stack([
        cv2.warpAffine(frame, matrix, (w, h), flags=cv2.INTER_LINEAR,
                       borderMode=cv2.BORDER_CONSTANT, borderValue=(fill, fill, fill))
        for frame in crops
    ])


def apply_perturbation(track: MouthTrack, p: AffinePerturbation) -> MouthTrack:
    """Shift horizontally (integer, black fill) then rotate about the crop center.

    Positive ``shift_px`` moves content right; positive ``rotation_deg`` turns
    it counter-clockwise as displayed.
    """
    p.check()
    if p.is_identity:
        return MouthTrack(crops=track.crops.copy(), landmark_source=track.landmark_source)
    crops = track.crops
    if p.shift_px:
        crops = _shift_frames(crops, int(p.shift_px), p.fill)
    if p.rotation_deg:
        crops = _rotate_frames(crops, p.rotation_deg, p.fill)
    return MouthTrack(crops=crops, landmark_source=track.landmark_source)


def splice_segment(gt_track: MouthTrack, generated, span: SegmentSpan) -> MouthTrack:
    """Replace frames [t, t + k) of the ground-truth track with generated crops."""
    generated = np.asarray(generated)
    span.check(len(gt_track))
    if len(generated) != span.k:
        raise LengthMismatch(f"{len(generated)} generated frames for span of length {span.k}")
    if generated.shape[1:] != gt_track.crops.shape[1:]:
        raise LengthMismatch(f"generated frame shape {generated.shape[1:]} != {gt_track.crops.shape[1:]}")
    crops = gt_track.crops.copy()
    crops[span.as_slice()] = generated.astype(crops.dtype)
    return replace(gt_track, crops=crops)
