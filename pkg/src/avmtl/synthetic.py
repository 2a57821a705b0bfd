"""Synthetic audio-visual corpus with labels encoded in both modalities.

Frames: the expression class picks the background hue and a centred white
shape; each active AU paints a textured patch pair (its own texture and
polarity) mirrored about the vertical axis, so horizontal flips keep labels
valid. Audio: every active label contributes a sine tone at its own
frequency for the duration of the frame.
Labels are piecewise constant over short random segments.
"""
from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import (
    FRAME_SIZE, NUM_AUS, NUM_EXPR, Audio, DatasetSplit, FrameAnnotation, VideoRecord,
    frame_path, save_frame, write_annotations, write_wav,
)


@dataclass(frozen=True)
class SynthConfig:
    n_videos: int = 8
    n_val_videos: int = 4
    frames_per_video: int = 60
    fps: float = 30.0
    sample_rate: int = 16000
    min_segment: int = 4
    max_segment: int = 12

    def __post_init__(self):
        for name in ("n_videos", "frames_per_video", "fps", "sample_rate"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.n_val_videos < 0 or not 0 < self.min_segment <= self.max_segment:
            raise ValueError("invalid validation count or segment bounds")


# tone frequencies (Hz): 7 expression tones then 12 AU tones, 400 Hz apart
EXPR_TONES = tuple(500.0 + 400.0 * k for k in range(NUM_EXPR))
AU_TONES = tuple(500.0 + 400.0 * (NUM_EXPR + k) for k in range(NUM_AUS))

_EXPR_HUES = tuple(k / NUM_EXPR for k in range(NUM_EXPR))
_ROW_CENTRES = (11, 29, 47, 65, 83, 101)
_PATCH = 14


def _au_sites() -> list[tuple[int, int, int]]:
    """(row_centre, left_x0, mirrored_x0) for each AU; outer column first."""
    sites = []
    for y in _ROW_CENTRES:
        for x0 in (2, 18):
            sites.append((y, x0, FRAME_SIZE - x0 - _PATCH))
    return sites


def _au_textures() -> list[np.ndarray]:
    """Boolean ink masks: six flip-symmetric textures, each used dark and bright."""
    yy, xx = np.mgrid[0:_PATCH, 0:_PATCH]
    border = (yy < 3) | (yy >= _PATCH - 3) | (xx < 3) | (xx >= _PATCH - 3)
    centre = np.abs(yy - (_PATCH - 1) / 2) <= 2.5
    textures = [
        np.ones((_PATCH, _PATCH), bool),  # solid
        border,  # hollow square
        centre | (np.abs(xx - (_PATCH - 1) / 2) <= 2.5),  # plus
        (yy // 3) % 2 == 0,  # horizontal stripes
        (np.floor(np.abs(xx - (_PATCH - 1) / 2)) // 2) % 2 == 0,  # vertical stripes
        ((yy // 4) + (np.abs(xx - (_PATCH - 1) / 2) // 4).astype(int)) % 2 == 0,  # checks
    ]
    return textures


_AU_SITES = _au_sites()
_AU_INK = [(tex, level) for level in (0.05, 0.95) for tex in _au_textures()]
_YY, _XX = np.mgrid[0:FRAME_SIZE, 0:FRAME_SIZE].astype(np.float32)


def _shape_mask(kind: int, cy: float, cx: float) -> np.ndarray:
    dy, dx = _YY - cy, _XX - cx
    r = np.hypot(dy, dx)
    if kind == 0:  # disc
        return r <= 17
    if kind == 1:  # square
        return (np.abs(dy) <= 14) & (np.abs(dx) <= 14)
    if kind == 2:  # horizontal bar
        return (np.abs(dy) <= 6) & (np.abs(dx) <= 20)
    if kind == 3:  # vertical bar
        return (np.abs(dy) <= 20) & (np.abs(dx) <= 6)
    if kind == 4:  # ring
        return (r <= 19) & (r >= 11)
    if kind == 5:  # plus
        return ((np.abs(dy) <= 5) & (np.abs(dx) <= 19)) | ((np.abs(dx) <= 5) & (np.abs(dy) <= 19))
    # upward triangle
    return (dy <= 14) & (dy >= -16) & (np.abs(dx) <= (dy + 16) * 0.6)


def render_frame(au: np.ndarray, expr: int, rng: np.random.Generator, *,
                 value: float, hue_offset: float, noise: float) -> np.ndarray:
    hue = (_EXPR_HUES[expr] + hue_offset) % 1.0
    bg = np.array(colorsys.hsv_to_rgb(hue, 0.55, value), dtype=np.float32)
    img = np.broadcast_to(bg, (FRAME_SIZE, FRAME_SIZE, 3)).copy()
    cy, cx = 56 + rng.integers(-2, 3), 56 + rng.integers(-2, 3)
    img[_shape_mask(expr, cy, cx)] = (0.95, 0.95, 0.92)
    for k, (y, xl, xr) in enumerate(_AU_SITES):
        if au[k]:
            y0 = y - _PATCH // 2
            ink, level = _AU_INK[k]
            for x0 in (xl, xr):
                img[y0:y0 + _PATCH, x0:x0 + _PATCH][ink] = level
    img += rng.normal(0.0, noise, img.shape).astype(np.float32)
    return (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _label_track(n: int, cfg: SynthConfig, rng: np.random.Generator):
    aus = np.empty((n, NUM_AUS), dtype=np.int64)
    exprs = np.empty(n, dtype=np.int64)
    i = 0
    while i < n:
        length = int(rng.integers(cfg.min_segment, cfg.max_segment + 1))
        aus[i:i + length] = rng.integers(0, 2, NUM_AUS)
        exprs[i:i + length] = rng.integers(0, NUM_EXPR)
        i += length
    return aus, exprs


def synth_audio(aus: np.ndarray, exprs: np.ndarray, fps: float, sample_rate: int,
                rng: np.random.Generator) -> Audio:
    n = len(exprs)
    n_samples = int(round(n / fps * sample_rate))
    t = np.arange(n_samples) / sample_rate
    frame_of_sample = np.minimum((t * fps).astype(np.int64), n - 1)
    freqs = np.array(EXPR_TONES + AU_TONES)
    active = np.concatenate([np.eye(NUM_EXPR, dtype=np.int64)[exprs], aus], axis=1)
    gains = active[frame_of_sample].astype(np.float64)  # (samples, tones)
    phases = rng.uniform(0, 2 * np.pi, len(freqs))
    amp = rng.uniform(0.035, 0.05)
    wave = np.zeros(n_samples)
    for k, f in enumerate(freqs):
        wave += gains[:, k] * np.sin(2 * np.pi * f * t + phases[k])
    wave = amp * wave + rng.normal(0.0, 0.003, n_samples)
    return Audio(wave.astype(np.float32), sample_rate)


def _make_video(vid: str, cfg: SynthConfig, rng: np.random.Generator):
    n = cfg.frames_per_video
    aus, exprs = _label_track(n, cfg, rng)
    value = rng.uniform(0.4, 0.6)
    hue_offset = rng.uniform(-0.02, 0.02)
    noise = rng.uniform(0.02, 0.05)
    pixels = np.stack([
        render_frame(aus[i], int(exprs[i]), rng, value=value, hue_offset=hue_offset, noise=noise)
        for i in range(n)
    ])
    audio = synth_audio(aus, exprs, cfg.fps, cfg.sample_rate, rng)
    video = VideoRecord(vid, cfg.fps, [f"{vid}/{i:05d}.jpg" for i in range(n)], audio=audio, pixels=pixels)
    anns = [FrameAnnotation(vid, i, tuple(aus[i].tolist()), int(exprs[i])) for i in range(n)]
    return video, anns


def generate_synthetic_dataset(cfg: SynthConfig, seed: int) -> tuple[DatasetSplit, DatasetSplit]:
    """Deterministic (train, val) splits; train and val videos are disjoint."""
    splits = []
    for name, count, offset in (("train", cfg.n_videos, 0), ("val", cfg.n_val_videos, cfg.n_videos)):
        anns, videos = [], {}
        for j in range(count):
            vid = f"{name}_{j:03d}"
            rng = np.random.default_rng([seed, offset + j])
            video, video_anns = _make_video(vid, cfg, rng)
            videos[vid] = video
            anns.extend(video_anns)
        splits.append(DatasetSplit(name, anns, videos))
    return splits[0], splits[1]


def write_synthetic_dataset(root: str | Path, cfg: SynthConfig, seed: int) -> dict[str, Path]:
    """Materialise a synthetic corpus in the on-disk annotation/frame/audio layout.

    Returns the directory map (also suitable for a pipeline config).
    """
    root = Path(root)
    dirs = {
        "train_au_dir": root / "annotations" / "au" / "train",
        "train_expr_dir": root / "annotations" / "expr" / "train",
        "val_au_dir": root / "annotations" / "au" / "val",
        "val_expr_dir": root / "annotations" / "expr" / "val",
        "frames_dir": root / "frames",
        "audio_dir": root / "audio",
    }
    train, val = generate_synthetic_dataset(cfg, seed)
    for split in (train, val):
        write_annotations(split, dirs[f"{split.name}_au_dir"], dirs[f"{split.name}_expr_dir"])
        for vid, video in split.videos.items():
            for i in range(video.n_frames):
                save_frame(frame_path(dirs["frames_dir"], vid, i), video.pixels[i])
            write_wav(dirs["audio_dir"] / f"{vid}.wav", video.audio)
    dirs["frames_dir"].mkdir(parents=True, exist_ok=True)
    with open(dirs["frames_dir"] / "fps.csv", "w") as fh:
        fh.write("video_id,fps\n")
        for split in (train, val):
            for vid in split.videos:
                fh.write(f"{vid},{cfg.fps}\n")
    return dirs
