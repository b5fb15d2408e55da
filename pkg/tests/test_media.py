import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avsync.errors import (DecodeError, DegenerateBox, DurationMismatch, LandmarkCountMismatch, LengthMismatch,
                           MissingAudio, OutOfRangePerturbation, SpanOutOfBounds, TooShort)
from avsync.media import (CROP_SIZE, LOG_FLOOR, AffinePerturbation, MediaClip, MouthTrack, SegmentSpan,
                          apply_perturbation, crop_mouth, heuristic_box, load_clip, load_frames, mel_filterbank,
                          mel_frame_count, mel_spectrogram, mouth_box, normalize_clip, normalize_fps,
                          save_clip_archive, splice_segment)


def _clip(n=10, fps=25.0, sr=16000, seconds=None, size=96):
    seconds = n / fps if seconds is None else seconds
    frames = np.random.default_rng(0).integers(0, 256, (n, size, size, 3), dtype=np.uint8)
    audio = np.zeros(int(round(seconds * sr)), dtype=np.float32)
    return MediaClip(frames, fps, audio, sr, "c")


def _track(n=6, seed=0):
    return MouthTrack(np.random.default_rng(seed).integers(0, 256, (n, 96, 96, 3), dtype=np.uint8))


# ---------------------------------------------------------------------------
# normalization


def test_normalize_fps_30_to_25_picks_on_screen_frame():
    frames = np.arange(30)[:, None, None, None] * np.ones((1, 2, 2, 3), dtype=np.int64)
    out = normalize_fps(frames, 30.0)
    assert out.shape[0] == 25
    # frame j at time j/25 shows source floor(j * 30 / 25)
    assert [int(f[0, 0, 0]) for f in out[:6]] == [0, 1, 2, 3, 4, 6]


def test_normalize_clip_trims_audio_to_video_length():
    clip = normalize_clip(_clip(n=25, seconds=1.2))
    assert clip.fps == 25 and clip.sample_rate == 16000
    assert len(clip.audio) == 25 * 640


def test_normalize_clip_resamples_audio():
    clip = normalize_clip(_clip(n=25, sr=48000))
    assert len(clip.audio) == 16000


def test_normalize_clip_is_idempotent():
    once = normalize_clip(_clip(n=30, fps=30.0, sr=22050))
    twice = normalize_clip(once)
    assert np.array_equal(once.frames, twice.frames) and np.array_equal(once.audio, twice.audio)


def test_duration_mismatch_raises():
    with pytest.raises(DurationMismatch):
        normalize_clip(_clip(n=25, seconds=2.0))


def test_archive_round_trip(tmp_path):
    clip = normalize_clip(_clip(n=5))
    save_clip_archive(tmp_path / "c.npz", clip)
    loaded = load_clip(tmp_path / "c.npz")
    assert np.array_equal(loaded.frames, clip.frames)
    assert np.array_equal(loaded.audio, clip.audio)
    assert np.array_equal(load_frames(tmp_path / "c.npz"), clip.frames)


def test_load_clip_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_clip(tmp_path / "missing.npz")
    np.savez(tmp_path / "noframes.npz", fps=25.0)
    with pytest.raises(DecodeError):
        load_clip(tmp_path / "noframes.npz")
    np.savez(tmp_path / "silent.npz", frames=np.zeros((3, 8, 8, 3), np.uint8), fps=25.0)
    with pytest.raises(MissingAudio):
        load_clip(tmp_path / "silent.npz")


# ---------------------------------------------------------------------------
# mouth crops


def test_heuristic_crop_window_on_96_frame():
    assert heuristic_box((96, 96)) == (19, 38, 77, 96)
    track = crop_mouth(_clip(n=3))
    assert track.crops.shape == (3, 96, 96, 3)
    assert track.landmark_source == "centered-heuristic"


def test_mouth_box_margin_and_clipping():
    pts = np.array([[40.0, 60.0], [60.0, 70.0]])
    # 20 x 10 box grown by 0.3 of each side length
    assert mouth_box(pts, (96, 96)) == (34, 57, 66, 73)
    assert mouth_box(np.array([[0.0, 0.0], [95.0, 95.0]]), (96, 96)) == (0, 0, 96, 96)


def test_mouth_box_degenerate():
    with pytest.raises(DegenerateBox):
        mouth_box(np.array([[10.0, 5.0], [10.0, 9.0]]), (96, 96))


def test_crop_with_landmarks():
    clip = _clip(n=2)
    lms = [np.column_stack([np.linspace(30, 60, 20), np.linspace(55, 75, 20)])] * 2
    track = crop_mouth(clip, lms)
    assert track.crops.shape == (2, CROP_SIZE, CROP_SIZE, 3) and track.landmark_source == "provided"
    with pytest.raises(LandmarkCountMismatch):
        crop_mouth(clip, lms[:1])
    with pytest.raises(LandmarkCountMismatch):
        crop_mouth(clip, [lm[:10] for lm in lms])


def test_mouth_track_rejects_wrong_size():
    with pytest.raises(ValueError):
        MouthTrack(np.zeros((2, 64, 64, 3), np.uint8))


# ---------------------------------------------------------------------------
# mel spectrogram


def test_mel_snippet_shape():
    mel = mel_spectrogram(np.random.default_rng(1).standard_normal(3200) * 0.1)
    assert mel.values.shape == (16, 80)


@given(st.integers(min_value=800, max_value=20000))
@settings(max_examples=40, deadline=None)
def test_mel_frame_count_is_floor_len_over_hop(n):
    assert mel_frame_count(n) == n // 200
    assert mel_spectrogram(np.zeros(n)).n_frames == n // 200


def test_mel_silence_is_log_floor():
    mel = mel_spectrogram(np.zeros(3200)).values
    assert np.all(mel == np.log(LOG_FLOOR))


def test_mel_too_short():
    with pytest.raises(TooShort):
        mel_spectrogram(np.zeros(799))


def test_filterbank_is_area_normalized_htk():
    fb = mel_filterbank()
    assert fb.shape == (80, 401)
    hz = np.linspace(0, 8000, 401)
    # each triangle integrates to one; low bands span few 20 Hz bins, so sampling error is larger there
    areas = np.trapezoid(fb, hz, axis=1)
    assert np.allclose(areas, 1.0, atol=0.08)
    assert np.allclose(areas[20:], 1.0, atol=0.03)
    peak_hz = hz[fb.argmax(axis=1)]
    htk = lambda f: 2595 * math.log10(1 + f / 700)  # noqa: E731
    mels = np.linspace(0, htk(8000), 82)[1:-1]
    centers = 700 * (10 ** (mels / 2595) - 1)
    assert np.all(np.abs(peak_hz[10:] - centers[10:]) <= 20.0 + 1e-9)


# ---------------------------------------------------------------------------
# perturbation and splicing


def test_identity_perturbation_is_bit_equal_copy():
    track = _track()
    out = apply_perturbation(track, AffinePerturbation())
    assert np.array_equal(out.crops, track.crops) and out.crops is not track.crops


def test_shift_moves_content_right_with_black_fill():
    track = _track(n=1)
    out = apply_perturbation(track, AffinePerturbation(shift_px=4))
    assert np.all(out.crops[:, :, :4] == 0)
    assert np.array_equal(out.crops[:, :, 4:], track.crops[:, :, :-4])


@pytest.mark.parametrize("p", [AffinePerturbation(shift_px=96), AffinePerturbation(rotation_deg=46)])
def test_out_of_range_perturbation(p):
    with pytest.raises(OutOfRangePerturbation):
        apply_perturbation(_track(), p)


def test_splice_segment_replaces_only_span():
    gt, gen = _track(n=8, seed=1), _track(n=3, seed=2)
    out = splice_segment(gt, gen.crops, SegmentSpan(2, 3))
    assert np.array_equal(out.crops[2:5], gen.crops)
    assert np.array_equal(out.crops[:2], gt.crops[:2]) and np.array_equal(out.crops[5:], gt.crops[5:])


def test_splice_segment_errors():
    gt = _track(n=8)
    with pytest.raises(SpanOutOfBounds):
        splice_segment(gt, _track(n=3).crops, SegmentSpan(6, 3))
    with pytest.raises(LengthMismatch):
        splice_segment(gt, _track(n=2).crops, SegmentSpan(0, 3))
    with pytest.raises(SpanOutOfBounds):
        SegmentSpan(-1, 3)


@given(st.integers(0, 10), st.integers(1, 5), st.integers(0, 5))
@settings(max_examples=30, deadline=None)
def test_splice_then_read_back(t, k, extra):
    n = t + k + extra
    gt = MouthTrack(np.zeros((n, 96, 96, 3), np.uint8))
    gen = np.full((k, 96, 96, 3), 7, np.uint8)
    out = splice_segment(gt, gen, SegmentSpan(t, k))
    assert int((out.crops == 7).all(axis=(1, 2, 3)).sum()) == k
