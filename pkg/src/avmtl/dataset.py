"""Annotation ingestion, data hygiene and label statistics.

On-disk layout::

    <au_dir>/<video_id>.txt      12 comma-separated ints in {0, 1, -1} per line
    <expr_dir>/<video_id>.txt    one int in [-1, 6] per line
    <frames_dir>/<video_id>/<frame_index:05d>.jpg
    <audio_dir>/<video_id>.wav   mono PCM

Line ``k`` of an annotation file labels frame ``k``. ``-1`` means "no label";
an AU line holding any ``-1`` drops the whole AU vector for that frame.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import AnnotationParseError, ContractError, DataError

logger = logging.getLogger(__name__)

AU_NAMES = ("AU1", "AU2", "AU4", "AU6", "AU7", "AU10",
            "AU12", "AU15", "AU23", "AU24", "AU25", "AU26")
EXPR_NAMES = ("neutral", "anger", "disgust", "fear", "happiness", "sadness", "surprise")
NUM_AUS = len(AU_NAMES)
NUM_EXPR = len(EXPR_NAMES)
FRAME_SIZE = 112
AUDIO_SAMPLE_RATE = 16000

TASKS = ("au", "expression")


@dataclass(frozen=True)
class FrameAnnotation:
    video_id: str
    frame_index: int
    au: tuple[int, ...] | None = None
    expr: int | None = None

    def __post_init__(self):
        if self.frame_index < 0:
            raise ContractError(f"negative frame index {self.frame_index}")
        if self.au is not None:
            au = tuple(int(v) for v in self.au)
            if len(au) != NUM_AUS or any(v not in (0, 1) for v in au):
                raise ContractError(f"AU vector must be {NUM_AUS} values in {{0,1}}, got {self.au}")
            object.__setattr__(self, "au", au)
        if self.expr is not None and not 0 <= self.expr < NUM_EXPR:
            raise ContractError(f"expression class out of range: {self.expr}")
        if self.au is None and self.expr is None:
            raise ContractError(f"{self.video_id}[{self.frame_index}] carries no label")

    @property
    def key(self) -> tuple[str, int]:
        return (self.video_id, self.frame_index)

    def has(self, task: str) -> bool:
        return (self.au if task == "au" else self.expr) is not None


@dataclass
class Audio:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ContractError("sample_rate must be positive")
        if self.samples.size == 0:
            raise ContractError("audio has no samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class VideoRecord:
    """One video: frame image references, frame rate and (optionally) its audio.

    ``pixels`` holds decoded frames in memory (synthetic data); otherwise frames
    are read lazily from ``frame_paths``. Likewise ``audio`` or ``audio_path``.
    """

    video_id: str
    fps: float
    frame_paths: list[str]
    audio: Audio | None = None
    audio_path: str | None = None
    pixels: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.fps > 0:
            raise ContractError(f"{self.video_id}: fps must be positive")

    @property
    def n_frames(self) -> int:
        return len(self.frame_paths)

    def has_frame(self, index: int) -> bool:
        if not 0 <= index < self.n_frames:
            return False
        if self.pixels is not None:
            return True
        return Path(self.frame_paths[index]).is_file()

    def load_frame(self, index: int) -> np.ndarray:
        """uint8 array of shape (112, 112, 3)."""
        if self.pixels is not None:
            return self.pixels[index]
        with Image.open(self.frame_paths[index]) as im:
            im = im.convert("RGB")
            if im.size != (FRAME_SIZE, FRAME_SIZE):
                im = im.resize((FRAME_SIZE, FRAME_SIZE), Image.BILINEAR)
            return np.asarray(im, dtype=np.uint8)

    def load_audio(self) -> Audio | None:
        if self.audio is not None:
            return self.audio
        if self.audio_path and Path(self.audio_path).is_file():
            return read_wav(self.audio_path)
        return None

    @property
    def has_audio(self) -> bool:
        return self.audio is not None or bool(self.audio_path and Path(self.audio_path).is_file())


@dataclass
class DatasetSplit:
    name: str
    annotations: list[FrameAnnotation]
    videos: dict[str, VideoRecord]

    def validate(self) -> None:
        for ann in self.annotations:
            video = self.videos.get(ann.video_id)
            if video is None:
                raise DataError(f"{self.name}: annotation references unknown video {ann.video_id!r}")
            if ann.frame_index >= video.n_frames:
                raise DataError(
                    f"{self.name}: frame {ann.frame_index} beyond {ann.video_id} "
                    f"({video.n_frames} frames)")

    def keys(self) -> set[tuple[str, int]]:
        return {a.key for a in self.annotations}

    def video_ids(self) -> list[str]:
        """Ids of videos that carry at least one annotation, in first-seen order."""
        return list(dict.fromkeys(a.video_id for a in self.annotations))

    def count(self, task: str) -> int:
        return sum(a.has(task) for a in self.annotations)

    def with_annotations(self, annotations: list[FrameAnnotation], name: str | None = None,
                         prune_videos: bool = False) -> "DatasetSplit":
        videos = self.videos
        if prune_videos:
            keep = {a.video_id for a in annotations}
            videos = {k: v for k, v in self.videos.items() if k in keep}
        return DatasetSplit(name or self.name, annotations, videos)

    def __len__(self) -> int:
        return len(self.annotations)


def task_view(split: DatasetSplit, task: str, name: str | None = None) -> DatasetSplit:
    """Keep only ``task``'s label; frames lacking it are dropped."""
    if task not in TASKS:
        raise ContractError(f"unknown task {task!r}")
    anns = []
    for a in split.annotations:
        if not a.has(task):
            continue
        anns.append(replace(a, expr=None) if task == "au" else replace(a, au=None))
    return split.with_annotations(anns, name=name)


# ---------------------------------------------------------------------------
# media IO


def frame_path(frames_dir: str | Path, video_id: str, index: int) -> str:
    return str(Path(frames_dir) / video_id / f"{index:05d}.jpg")


def save_frame(path: str | Path, image: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image).save(path, format="JPEG", quality=95)


def read_wav(path: str | Path, target_rate: int = AUDIO_SAMPLE_RATE) -> Audio:
    """Read a PCM WAV as mono float32 in [-1, 1], resampled to ``target_rate``."""
    rate, data = wavfile.read(path)
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float64) / float(np.iinfo(data.dtype).max)
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 2:
        data = data.mean(axis=1)
    if rate != target_rate:
        g = math.gcd(int(rate), int(target_rate))
        data = resample_poly(data, target_rate // g, int(rate) // g)
    return Audio(data.astype(np.float32), target_rate)


def write_wav(path: str | Path, audio: Audio) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pcm = np.clip(np.round(audio.samples * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, audio.sample_rate, pcm)


# ---------------------------------------------------------------------------
# annotation text format


def _numbered_lines(path: Path) -> list[tuple[int, str]]:
    """(line number, text) pairs with trailing blank lines dropped."""
    lines = path.read_text().splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    return list(enumerate(lines, start=1))


def _read_au_file(path: Path) -> list[tuple[int, ...] | None]:
    rows: list[tuple[int, ...] | None] = []
    for line_no, line in _numbered_lines(path):
        tokens = [t.strip() for t in line.strip().split(",")]
        if len(tokens) != NUM_AUS:
            raise AnnotationParseError(path, line_no, f"expected {NUM_AUS} fields, got {len(tokens)}")
        try:
            values = tuple(int(t) for t in tokens)
        except ValueError:
            raise AnnotationParseError(path, line_no, f"non-integer token in {line.strip()!r}") from None
        if any(v not in (-1, 0, 1) for v in values):
            raise AnnotationParseError(path, line_no, f"AU values must be in {{-1,0,1}}: {line.strip()!r}")
        rows.append(None if -1 in values else values)
    return rows


def _read_expr_file(path: Path) -> list[int | None]:
    rows: list[int | None] = []
    for line_no, line in _numbered_lines(path):
        tokens = line.strip().split(",")
        if len(tokens) != 1:
            raise AnnotationParseError(path, line_no, f"expected 1 field, got {len(tokens)}")
        try:
            value = int(tokens[0])
        except ValueError:
            raise AnnotationParseError(path, line_no, f"non-integer token {tokens[0]!r}") from None
        if not -1 <= value < NUM_EXPR:
            raise AnnotationParseError(path, line_no, f"expression value out of range: {value}")
        rows.append(None if value == -1 else value)
    return rows


def _read_fps_table(frames_dir: Path | None) -> dict[str, float]:
    table = {}
    if frames_dir is not None and (frames_dir / "fps.csv").is_file():
        with open(frames_dir / "fps.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                table[row["video_id"]] = float(row["fps"])
    return table


def parse_annotations(au_dir: str | Path | None, expr_dir: str | Path | None, *,
                      frames_dir: str | Path | None = None,
                      audio_dir: str | Path | None = None,
                      fps: float = 30.0, name: str = "train") -> DatasetSplit:
    """Read per-video AU and expression files into one split.

    Either directory may be ``None``. ``-1`` labels are discarded on the way in
    and frames left with no label at all are omitted. Per-video frame rates may
    be overridden by ``<frames_dir>/fps.csv`` (columns ``video_id,fps``).
    """
    au_rows: dict[str, list] = {}
    expr_rows: dict[str, list] = {}
    for directory, reader, out in ((au_dir, _read_au_file, au_rows),
                                   (expr_dir, _read_expr_file, expr_rows)):
        if directory is None:
            continue
        directory = Path(directory)
        if not directory.is_dir():
            raise DataError(f"annotation directory not found: {directory}")
        for path in sorted(directory.glob("*.txt")):
            out[path.stem] = reader(path)

    frames_root = Path(frames_dir) if frames_dir is not None else None
    fps_table = _read_fps_table(frames_root)
    annotations: list[FrameAnnotation] = []
    videos: dict[str, VideoRecord] = {}
    for vid in sorted(set(au_rows) | set(expr_rows)):
        aus = au_rows.get(vid, [])
        exprs = expr_rows.get(vid, [])
        n = max(len(aus), len(exprs))
        for i in range(n):
            au = aus[i] if i < len(aus) else None
            ex = exprs[i] if i < len(exprs) else None
            if au is None and ex is None:
                continue
            annotations.append(FrameAnnotation(vid, i, au, ex))
        audio_path = None
        if audio_dir is not None:
            audio_path = str(Path(audio_dir) / f"{vid}.wav")
        videos[vid] = VideoRecord(
            video_id=vid,
            fps=fps_table.get(vid, fps),
            frame_paths=[frame_path(frames_root or ".", vid, i) for i in range(n)],
            audio_path=audio_path,
        )
    split = DatasetSplit(name, annotations, videos)
    split.validate()
    return split


def write_annotations(split: DatasetSplit, au_dir: str | Path, expr_dir: str | Path) -> None:
    """Inverse of :func:`parse_annotations` for the label content.

    Unlabelled frames are written as ``-1`` so line numbers keep matching frame
    indices. A video without any label of a task gets no file for that task.
    """
    au_dir, expr_dir = Path(au_dir), Path(expr_dir)
    au_dir.mkdir(parents=True, exist_ok=True)
    expr_dir.mkdir(parents=True, exist_ok=True)
    by_video: dict[str, dict[int, FrameAnnotation]] = {}
    for a in split.annotations:
        by_video.setdefault(a.video_id, {})[a.frame_index] = a
    missing_au = ",".join(["-1"] * NUM_AUS)
    for vid, frames in by_video.items():
        n = max(frames) + 1
        if any(a.au is not None for a in frames.values()):
            last = max(i for i, a in frames.items() if a.au is not None)
            lines = []
            for i in range(last + 1):
                a = frames.get(i)
                lines.append(",".join(map(str, a.au)) if a is not None and a.au is not None else missing_au)
            (au_dir / f"{vid}.txt").write_text("\n".join(lines) + "\n")
        if any(a.expr is not None for a in frames.values()):
            lines = []
            for i in range(n):
                a = frames.get(i)
                lines.append(str(a.expr) if a is not None and a.expr is not None else "-1")
            (expr_dir / f"{vid}.txt").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# hygiene


def find_overlap(au_train: DatasetSplit, au_val: DatasetSplit, expr_train: DatasetSplit,
                 expr_val: DatasetSplit, mode: str = "video") -> dict:
    """Entries of each validation split that also occur in the other task's train split.

    Returns ``{"au_val": [...], "expr_val": [...]}`` holding video ids
    (``mode="video"``) or ``[video_id, frame_index]`` pairs (``mode="frame"``).
    """
    if mode == "video":
        expr_train_ids = {a.video_id for a in expr_train.annotations}
        au_train_ids = {a.video_id for a in au_train.annotations}
        return {
            "au_val": sorted({a.video_id for a in au_val.annotations} & expr_train_ids),
            "expr_val": sorted({a.video_id for a in expr_val.annotations} & au_train_ids),
        }
    if mode == "frame":
        return {
            "au_val": sorted(au_val.keys() & expr_train.keys()),
            "expr_val": sorted(expr_val.keys() & au_train.keys()),
        }
    raise ContractError(f"unknown dedup mode {mode!r}")


def deduplicate_validation(au_train: DatasetSplit, au_val: DatasetSplit,
                           expr_train: DatasetSplit, expr_val: DatasetSplit,
                           mode: str = "video") -> tuple[DatasetSplit, DatasetSplit]:
    """Remove from each validation split what the other task trains on.

    ``mode="video"`` drops whole validation videos seen in the other task's
    training set; ``mode="frame"`` drops only shared ``(video_id, frame_index)``
    pairs. Order of the surviving annotations is preserved.
    """
    overlap = find_overlap(au_train, au_val, expr_train, expr_val, mode)
    out = []
    for split, drop in ((au_val, overlap["au_val"]), (expr_val, overlap["expr_val"])):
        if mode == "video":
            drop_set = set(drop)
            anns = [a for a in split.annotations if a.video_id not in drop_set]
            videos = {k: v for k, v in split.videos.items() if k not in drop_set}
            out.append(DatasetSplit(split.name, anns, videos))
        else:
            drop_set = {tuple(k) for k in drop}
            out.append(split.with_annotations([a for a in split.annotations if a.key not in drop_set]))
    return out[0], out[1]


def filter_missing_crops(split: DatasetSplit) -> tuple[DatasetSplit, int]:
    """Drop annotations whose frame image is absent. Returns the split and the removal count."""
    kept = [a for a in split.annotations if split.videos[a.video_id].has_frame(a.frame_index)]
    removed = len(split.annotations) - len(kept)
    if removed:
        logger.info("%s: dropped %d annotations without a cropped frame", split.name, removed)
    return split.with_annotations(kept), removed


@dataclass
class BalanceStats:
    au_positive_counts: list[int]
    au_negative_counts: list[int]
    expr_counts: list[int]


def compute_balance_stats(split: DatasetSplit) -> BalanceStats:
    pos = np.zeros(NUM_AUS, dtype=np.int64)
    n_au = 0
    expr = np.zeros(NUM_EXPR, dtype=np.int64)
    for a in split.annotations:
        if a.au is not None:
            pos += np.asarray(a.au)
            n_au += 1
        if a.expr is not None:
            expr[a.expr] += 1
    return BalanceStats(pos.tolist(), (n_au - pos).tolist(), expr.tolist())


def write_stats_csv(stats: BalanceStats, au_path: str | Path, expr_path: str | Path) -> None:
    with open(au_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "positive", "negative"])
        for name, p, n in zip(AU_NAMES, stats.au_positive_counts, stats.au_negative_counts):
            w.writerow([name, p, n])
    with open(expr_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "count"])
        for k, c in enumerate(stats.expr_counts):
            w.writerow([k, c])


def positive_weights(stats: BalanceStats, w_max: float) -> np.ndarray:
    """Per-AU positive-class weight ``clamp(neg / max(pos, 1), 1, w_max)``."""
    if w_max < 1:
        raise ContractError("w_max must be >= 1")
    pos = np.maximum(np.asarray(stats.au_positive_counts, dtype=np.float64), 1.0)
    neg = np.asarray(stats.au_negative_counts, dtype=np.float64)
    return np.clip(neg / pos, 1.0, w_max)


def expression_alpha(stats: BalanceStats) -> np.ndarray:
    """Inverse class frequency, normalised to mean 1. Empty classes count as one sample."""
    counts = np.maximum(np.asarray(stats.expr_counts, dtype=np.float64), 1.0)
    inv = 1.0 / counts
    return inv / inv.mean()


def merge_auxiliary_au(main: DatasetSplit, aux: DatasetSplit, prefix: str = "aux-") -> DatasetSplit:
    """Append an AU-only auxiliary corpus, namespacing its video ids with ``prefix``."""
    if any(a.expr is not None for a in aux.annotations):
        raise DataError("auxiliary AU data must not carry expression labels")
    videos = dict(main.videos)
    anns = list(main.annotations)
    for vid, video in aux.videos.items():
        new_id = prefix + vid
        if new_id in videos:
            raise DataError(f"namespaced auxiliary id {new_id!r} collides with main split")
        videos[new_id] = replace(video, video_id=new_id)
    anns.extend(replace(a, video_id=prefix + a.video_id) for a in aux.annotations)
    merged = DatasetSplit(main.name, anns, videos)
    merged.validate()
    return merged


# ---------------------------------------------------------------------------
# prepared-split manifests (CSV per split + one JSON for videos)

_MANIFEST_HEADER = ["video_id", "frame_index", *[f"au{i + 1}" for i in range(NUM_AUS)], "expr"]


def write_split_manifest(split: DatasetSplit, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_MANIFEST_HEADER)
        for a in split.annotations:
            au = list(a.au) if a.au is not None else [""] * NUM_AUS
            w.writerow([a.video_id, a.frame_index, *au, "" if a.expr is None else a.expr])


def read_split_manifest(path: str | Path, videos: dict[str, VideoRecord], name: str) -> DatasetSplit:
    anns = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != _MANIFEST_HEADER:
            raise DataError(f"{path}: unexpected manifest header")
        for row in reader:
            au = None if row[2] == "" else tuple(int(v) for v in row[2:2 + NUM_AUS])
            expr = None if row[-1] == "" else int(row[-1])
            anns.append(FrameAnnotation(row[0], int(row[1]), au, expr))
    used = {a.video_id for a in anns}
    split = DatasetSplit(name, anns, {k: v for k, v in videos.items() if k in used})
    split.validate()
    return split


def videos_to_json(videos: Iterable[VideoRecord]) -> dict:
    return {
        v.video_id: {"fps": v.fps, "frame_paths": v.frame_paths, "audio_path": v.audio_path}
        for v in sorted(videos, key=lambda v: v.video_id)
    }


def videos_from_json(data: dict) -> dict[str, VideoRecord]:
    return {
        vid: VideoRecord(vid, float(d["fps"]), list(d["frame_paths"]), audio_path=d.get("audio_path"))
        for vid, d in data.items()
    }


def write_videos_json(videos: Iterable[VideoRecord], path: str | Path) -> None:
    Path(path).write_text(json.dumps(videos_to_json(videos), indent=1, sort_keys=True) + "\n")


def load_frame_array(split: DatasetSplit, keys: Sequence[tuple[str, int]]) -> np.ndarray:
    """Stack frames for ``keys`` into a (N, 112, 112, 3) uint8 array."""
    out = np.empty((len(keys), FRAME_SIZE, FRAME_SIZE, 3), dtype=np.uint8)
    for j, (vid, idx) in enumerate(keys):
        out[j] = split.videos[vid].load_frame(idx)
    return out
