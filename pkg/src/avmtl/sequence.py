"""Audio/visual alignment, fusion and the transformer-encoder sequence model.

A video is cut into non-overlapping windows of ``window`` frames. For every
frame the frozen visual model gives a 512-d embedding and the TDNN row
nearest the frame's timestamp gives a 512-d audio vector; both are
concatenated (visual first) into 1024-d tokens, encoded by one transformer
encoder layer and mapped to per-frame AU / expression predictions.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .audio import (
    TDNN, AudioTooShortError, MelConfig, MelSpectrogram, compute_mel_spectrogram, num_steps,
    silent_spectrogram, tdnn_features,
)
from .dataset import AUDIO_SAMPLE_RATE, NUM_AUS, NUM_EXPR, DatasetSplit
from .errors import ContractError
from .visual import (
    AlternationSchedule, LossConfig, OptimizerConfig, VisualModel, embed, is_frozen, select_task, task_loss,
)

logger = logging.getLogger(__name__)

WINDOW = 30


# ---------------------------------------------------------------------------
# alignment / chunking / fusion


def audio_rows(frame_indices, fps: float, stride_sec: float, n_steps: int) -> np.ndarray:
    """Audio row for each frame: ``round(i / fps / stride)`` clamped to ``[0, n_steps - 1]``."""
    if not fps > 0 or not stride_sec > 0:
        raise ContractError("fps and stride must be positive")
    t = np.asarray(frame_indices, dtype=np.float64) / fps
    rows = np.floor(t / stride_sec + 0.5).astype(np.int64)
    return np.clip(rows, 0, max(n_steps - 1, 0))


def align_audio_to_frames(audio_feats: torch.Tensor, fps: float, stride_sec: float, frame_indices) -> torch.Tensor:
    frame_indices = list(frame_indices)
    if len(audio_feats) == 0 and frame_indices:
        raise ContractError("no audio features to align; substitute silence_features")
    rows = audio_rows(frame_indices, fps, stride_sec, len(audio_feats))
    return audio_feats[torch.as_tensor(rows, dtype=torch.long)]


def chunk_video(frame_count: int, window: int = WINDOW) -> list[tuple[int, int]]:
    if frame_count < 0 or window <= 0:
        raise ContractError("frame_count must be >= 0 and window > 0")
    return [(s, min(window, frame_count - s)) for s in range(0, frame_count, window)]


def fuse(visual_seq: torch.Tensor, audio_seq: torch.Tensor) -> torch.Tensor:
    if visual_seq.shape[:-1] != audio_seq.shape[:-1]:
        raise ContractError(f"length mismatch: {tuple(visual_seq.shape)} vs {tuple(audio_seq.shape)}")
    return torch.cat([visual_seq, audio_seq], dim=-1)


@dataclass
class FeatureSequence:
    video_id: str
    start_frame: int
    fused: torch.Tensor  # (L, 1024), padded rows zero
    mask: torch.Tensor  # (L,) bool, True = real frame

    def __post_init__(self):
        if self.fused.dim() != 2 or self.mask.shape != self.fused.shape[:1]:
            raise ContractError("fused must be (L, D) with an (L,) mask")
        if torch.any(self.fused[~self.mask] != 0):
            raise ContractError("padded rows must be zero")


def pad_window(fused: torch.Tensor, window: int) -> tuple[torch.Tensor, torch.Tensor]:
    n = fused.shape[0]
    if n > window:
        raise ContractError(f"{n} frames exceed the {window}-frame window")
    out = fused.new_zeros(window, fused.shape[1])
    out[:n] = fused
    mask = torch.zeros(window, dtype=torch.bool)
    mask[:n] = True
    return out, mask


# ---------------------------------------------------------------------------
# model


def sinusoidal_encoding(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float32)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float32) * (-math.log(10000.0) / dim))
    pe = torch.zeros(length, dim)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)
    return pe


class SequenceModel(nn.Module):
    def __init__(self, visual_dim: int = 512, audio_dim: int = 512, n_heads: int = 8,
                 ff_dim: int = 2048, dropout: float = 0.1, n_layers: int = 1,
                 positional_encoding: bool = True):
        super().__init__()
        if n_layers < 1:
            raise ContractError("need at least one encoder layer")
        d = visual_dim + audio_dim
        layer = nn.TransformerEncoderLayer(d, n_heads, ff_dim, dropout, batch_first=True)
        self.encoder = nn.TransformerEncoder(layer, n_layers, enable_nested_tensor=False)
        self.au_out = nn.Linear(d, NUM_AUS)
        self.expr_out = nn.Linear(d, NUM_EXPR)
        self.positional_encoding = positional_encoding
        self._cfg = dict(visual_dim=visual_dim, audio_dim=audio_dim, n_heads=n_heads, ff_dim=ff_dim,
                         dropout=dropout, n_layers=n_layers, positional_encoding=positional_encoding)

    @property
    def d_model(self) -> int:
        return self._cfg["visual_dim"] + self._cfg["audio_dim"]

    def config(self) -> dict:
        return dict(self._cfg)

    def encode(self, fused: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """(B, L, D) tokens and (B, L) real-frame mask -> (B, L, D)."""
        x = fused
        if self.positional_encoding:
            x = x + sinusoidal_encoding(x.shape[1], x.shape[2]).to(x)
        return self.encoder(x, src_key_padding_mask=~mask)

    def head(self, task: str) -> nn.Linear:
        if task == "au":
            return self.au_out
        if task == "expression":
            return self.expr_out
        raise ContractError(f"unknown task {task!r}")

    def forward(self, fused: torch.Tensor, mask: torch.Tensor, task: str) -> torch.Tensor:
        return self.head(task)(self.encode(fused, mask))


def encode(seq: FeatureSequence, model: SequenceModel) -> torch.Tensor:
    return model.encode(seq.fused[None], seq.mask[None])[0]


def predict_frames(encoded: torch.Tensor, model: SequenceModel, mask: torch.Tensor | None = None):
    """Sigmoid AU and softmax expression probabilities for every real (unmasked) row."""
    if mask is not None:
        encoded = encoded[mask]
    return torch.sigmoid(model.au_out(encoded)), torch.softmax(model.expr_out(encoded), dim=-1)


# ---------------------------------------------------------------------------
# per-video inputs


@dataclass
class SequenceVideo:
    """Everything the sequence stage needs about one video (frames already decoded)."""

    video_id: str
    fps: float
    frame_indices: np.ndarray  # (n,) frame numbers, increasing
    images: np.ndarray  # (n, 112, 112, 3) uint8
    spectrogram: MelSpectrogram
    au: np.ndarray  # (n, 12), valid where au_mask
    au_mask: np.ndarray
    expr: np.ndarray  # (n,), valid where expr_mask
    expr_mask: np.ndarray
    has_audio: bool = True
    visual: torch.Tensor | None = None  # (n, 512) frozen embeddings, filled lazily

    def __len__(self) -> int:
        return len(self.frame_indices)

    def labels(self, task: str):
        return (self.au, self.au_mask) if task == "au" else (self.expr, self.expr_mask)


def build_sequence_videos(splits: list[DatasetSplit], mel_cfg: MelConfig = MelConfig()) -> list[SequenceVideo]:
    """Merge labels from several splits (e.g. AU-train and expr-train) per video."""
    merged: dict[str, dict[int, list]] = {}
    videos = {}
    for split in splits:
        for a in split.annotations:
            slot = merged.setdefault(a.video_id, {}).setdefault(a.frame_index, [None, None])
            if a.au is not None:
                slot[0] = a.au
            if a.expr is not None:
                slot[1] = a.expr
            videos.setdefault(a.video_id, split.videos[a.video_id])
    out = []
    for vid in sorted(merged):
        video = videos[vid]
        frames = sorted(merged[vid])
        n = len(frames)
        au = np.zeros((n, NUM_AUS), dtype=np.int64)
        au_mask = np.zeros(n, dtype=bool)
        expr = np.zeros(n, dtype=np.int64)
        expr_mask = np.zeros(n, dtype=bool)
        for j, f in enumerate(frames):
            a, e = merged[vid][f]
            if a is not None:
                au[j], au_mask[j] = a, True
            if e is not None:
                expr[j], expr_mask[j] = e, True
        images = np.stack([video.load_frame(f) for f in frames])
        audio = video.load_audio()
        spec = None
        if audio is not None:
            try:
                spec = compute_mel_spectrogram(audio.samples, audio.sample_rate, mel_cfg)
            except AudioTooShortError:
                spec = None
        has_audio = spec is not None
        if spec is None:
            n_samples = int(round(video.n_frames / video.fps * AUDIO_SAMPLE_RATE))
            win = mel_cfg.window_samples(AUDIO_SAMPLE_RATE)
            steps = max(num_steps(n_samples, win, mel_cfg.stride_samples(AUDIO_SAMPLE_RATE)), 1)
            spec = silent_spectrogram(steps, mel_cfg)
            logger.info("%s: no usable audio, using silence (%d steps)", vid, steps)
        out.append(SequenceVideo(vid, video.fps, np.asarray(frames), images, spec,
                                 au, au_mask, expr, expr_mask, has_audio))
    return out


def attach_visual_features(videos: list[SequenceVideo], visual: VisualModel) -> None:
    for v in videos:
        if v.visual is None:
            v.visual = embed(visual, v.images)


def window_audio(video: SequenceVideo, positions: np.ndarray, tdnn: TDNN) -> torch.Tensor:
    """Aligned TDNN rows for ``video.frame_indices[positions]``.

    Runs the TDNN only on the spectrogram span that can influence those rows
    (receptive-field margin included), so the result matches aligning the
    full-video TDNN output.
    """
    spec = video.spectrogram
    rows = audio_rows(video.frame_indices[positions], video.fps, spec.stride_sec, spec.n_steps)
    lo = max(int(rows.min()) - tdnn.radius, 0)
    hi = min(int(rows.max()) + tdnn.radius + 1, spec.n_steps)
    feats = tdnn_features(spec.values[:, lo:hi], tdnn)
    return feats[torch.as_tensor(rows - lo, dtype=torch.long)]


def window_tokens(video: SequenceVideo, start: int, length: int, tdnn: TDNN, window: int):
    positions = np.arange(start, start + length)
    fused = fuse(video.visual[positions], window_audio(video, positions, tdnn))
    return pad_window(fused, window)


def batch_window_audio(spans: list[tuple[SequenceVideo, np.ndarray]], tdnn: TDNN) -> list[torch.Tensor]:
    """:func:`window_audio` for several windows with as few TDNN calls as possible.

    Spectrogram slices are widened to a common length (extra context never
    changes the rows we keep) and run as one batch, so BatchNorm sees the
    whole step's audio at once.
    """
    plans = []
    for video, positions in spans:
        spec = video.spectrogram
        rows = audio_rows(video.frame_indices[positions], video.fps, spec.stride_sec, spec.n_steps)
        lo = max(int(rows.min()) - tdnn.radius, 0)
        hi = min(int(rows.max()) + tdnn.radius + 1, spec.n_steps)
        plans.append([video, rows, lo, hi])
    width = max(hi - lo for _, _, lo, hi in plans)
    for plan in plans:
        n_steps = plan[0].spectrogram.n_steps
        if n_steps >= width:
            plan[2] = min(plan[2], n_steps - width)
            plan[3] = plan[2] + width
    groups: dict[int, list[int]] = {}
    for i, (_, _, lo, hi) in enumerate(plans):
        groups.setdefault(hi - lo, []).append(i)
    out: list[torch.Tensor | None] = [None] * len(plans)
    for idxs in groups.values():
        x = torch.stack([torch.as_tensor(plans[i][0].spectrogram.values[:, plans[i][2]:plans[i][3]]) for i in idxs])
        feats = tdnn(x)
        for k, i in enumerate(idxs):
            rows, lo = plans[i][1], plans[i][2]
            out[i] = feats[k][torch.as_tensor(rows - lo, dtype=torch.long)]
    return out


# ---------------------------------------------------------------------------
# training


def train_sequence(videos: list[SequenceVideo], frozen_visual: VisualModel, audio: TDNN,
                   model: SequenceModel, schedule: AlternationSchedule | None = None,
                   optimizer_cfg: OptimizerConfig | None = None, loss_cfg: LossConfig | None = None, *,
                   steps: int = 200, window: int = WINDOW, max_videos: int = 8, seed: int = 0):
    """Jointly train the TDNN and the sequence model on top of a frozen visual model.

    Every step draws one random ``window``-frame span from each of up to
    ``max_videos`` videos holding labels for the active task; heads alternate
    per batch. Returns ``(audio, model, history)``.
    """
    if not is_frozen(frozen_visual):
        raise ContractError("visual model must be frozen before sequence training")
    schedule = schedule or AlternationSchedule("batch_by_batch")
    optimizer_cfg = optimizer_cfg or OptimizerConfig(lr=0.01)
    loss_cfg = loss_cfg or LossConfig()
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    attach_visual_features(videos, frozen_visual)
    pools = {task: [v for v in videos if v.labels(task)[1].any()] for task in ("au", "expression")}
    for task, pool in pools.items():
        if not pool:
            raise ContractError(f"no video carries {task} labels")
    opt = optimizer_cfg.build(list(audio.parameters()) + list(model.parameters()))
    history = []
    audio.train()
    model.train()
    for step in range(steps):
        task = select_task(schedule, 1, step)
        pool = pools[task]
        chosen = pool if len(pool) <= max_videos else [pool[i] for i in sorted(rng.choice(len(pool), max_videos, replace=False))]
        spans = []
        for v in chosen:
            length = min(window, len(v))
            start = int(rng.integers(0, len(v) - length + 1))
            spans.append((v, np.arange(start, start + length)))
        audio_feats = batch_window_audio(spans, audio)
        tokens, masks, labels, label_masks = [], [], [], []
        for (v, positions), a in zip(spans, audio_feats):
            start, length = int(positions[0]), len(positions)
            fused, mask = pad_window(fuse(v.visual[positions], a), window)
            y, ym = v.labels(task)
            y_pad = np.zeros((window,) + y.shape[1:], dtype=np.int64)
            ym_pad = np.zeros(window, dtype=bool)
            y_pad[:length], ym_pad[:length] = y[start:start + length], ym[start:start + length]
            tokens.append(fused)
            masks.append(mask)
            labels.append(y_pad)
            label_masks.append(ym_pad)
        fused = torch.stack(tokens)
        mask = torch.stack(masks)
        sel = mask & torch.as_tensor(np.stack(label_masks))
        logits = model(fused, mask, task)[sel]
        y = torch.as_tensor(np.stack(labels))[sel]
        loss = task_loss(logits, y, task, loss_cfg)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append({"step": step, "task": task, "loss": loss.item()})
        if (step + 1) % 50 == 0:
            logger.info("sequence step %d (%s) loss %.4f", step + 1, task, loss.item())
    return audio, model, history


@torch.no_grad()
def predict_video(video: SequenceVideo, audio: TDNN, model: SequenceModel, window: int = WINDOW):
    """Per-frame ``(au_probs (n, 12), expr_probs (n, 7))`` over non-overlapping windows."""
    audio.eval()
    model.eval()
    if video.visual is None:
        raise ContractError("visual features not attached")
    n = len(video)
    if n == 0:
        return torch.zeros(0, NUM_AUS), torch.zeros(0, NUM_EXPR)
    audio_full = tdnn_features(video.spectrogram, audio)
    aligned = align_audio_to_frames(audio_full, video.fps, video.spectrogram.stride_sec, video.frame_indices)
    fused_all = fuse(video.visual, aligned)
    tokens, masks = zip(*(pad_window(fused_all[s:s + length], window) for s, length in chunk_video(n, window)))
    fused, mask = torch.stack(tokens), torch.stack(masks)
    au, ex = predict_frames(model.encode(fused, mask), model, mask)
    return au, ex


@torch.no_grad()
def evaluate_sequence_loss(videos: list[SequenceVideo], audio: TDNN, model: SequenceModel,
                           task: str, loss_cfg: LossConfig, window: int = WINDOW) -> float:
    """Eval-mode loss of ``task`` over every labelled frame of ``videos``."""
    logits, ys = [], []
    for v in videos:
        au, ex = predict_video(v, audio, model, window)
        probs = au if task == "au" else ex
        y, ym = v.labels(task)
        ym = torch.as_tensor(ym)
        if task == "au":
            logits.append(torch.logit(probs.clamp(1e-7, 1 - 1e-7))[ym])
        else:
            logits.append(torch.log(probs.clamp_min(1e-12))[ym])
        ys.append(torch.as_tensor(y)[ym])
    return float(task_loss(torch.cat(logits), torch.cat(ys), task, loss_cfg))
