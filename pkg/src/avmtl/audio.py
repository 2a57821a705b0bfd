"""Log-mel front end and the frame-level TDNN audio encoder.

Framing is uncentred: ``T = floor((N - win) / hop) + 1``. Each frame is
Hann-windowed, zero-padded to ``n_fft`` and turned into a power spectrum;
HTK-scale triangular filters then map it onto ``n_mels`` bands and
``log(energy + log_eps)`` is taken.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .dataset import AUDIO_SAMPLE_RATE
from .errors import ContractError, DataError


class AudioTooShortError(DataError):
    pass


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 64
    window_sec: float = 0.010
    stride_sec: float = 0.005
    log_eps: float = 1e-10

    def window_samples(self, sample_rate: int) -> int:
        return int(round(self.window_sec * sample_rate))

    def stride_samples(self, sample_rate: int) -> int:
        return int(round(self.stride_sec * sample_rate))


@dataclass
class MelSpectrogram:
    values: np.ndarray  # (n_mels, T) log-mel energies
    sample_rate: int
    window_sec: float
    stride_sec: float

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]


def num_steps(num_samples: int, window: int, stride: int) -> int:
    if num_samples < window:
        return 0
    return (num_samples - window) // stride + 1


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """(n_mels, n_fft // 2 + 1) triangular filters spanning [0, sample_rate / 2]."""
    freqs = np.linspace(0.0, sample_rate / 2.0, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def fft_size(window: int, n_mels: int, sample_rate: int) -> int:
    """Smallest power of two >= window whose filterbank has no empty band."""
    n = 1 << max(window - 1, 0).bit_length()
    while np.any(mel_filterbank(n_mels, n, sample_rate).sum(axis=1) <= 0):
        n *= 2
    return n


def compute_mel_spectrogram(waveform, sample_rate: int, cfg: MelConfig = MelConfig()) -> MelSpectrogram:
    x = np.asarray(waveform, dtype=np.float64)
    if sample_rate <= 0:
        raise ContractError("sample_rate must be positive")
    if x.ndim != 1:
        raise ContractError("waveform must be mono (1-D)")
    win = cfg.window_samples(sample_rate)
    hop = cfg.stride_samples(sample_rate)
    if len(x) < win:
        raise AudioTooShortError(f"waveform has {len(x)} samples, shorter than one {win}-sample window")
    n_fft = fft_size(win, cfg.n_mels, sample_rate)
    t = num_steps(len(x), win, hop)
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:t]
    window = np.hanning(win + 1)[:-1]  # periodic Hann
    power = np.abs(np.fft.rfft(frames * window, n=n_fft, axis=1)) ** 2
    mel = mel_filterbank(cfg.n_mels, n_fft, sample_rate) @ power.T
    values = np.log(mel + cfg.log_eps).astype(np.float32)
    return MelSpectrogram(values, sample_rate, cfg.window_sec, cfg.stride_sec)


def silent_spectrogram(n_steps: int, cfg: MelConfig = MelConfig(),
                       sample_rate: int = AUDIO_SAMPLE_RATE) -> MelSpectrogram:
    values = np.full((cfg.n_mels, n_steps), np.log(cfg.log_eps), dtype=np.float32)
    return MelSpectrogram(values, sample_rate, cfg.window_sec, cfg.stride_sec)


def write_spectrogram_csv(spec: MelSpectrogram, path: str | Path) -> None:
    """Debug dump: one row per mel band, one column per time step."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in spec.values:
            w.writerow([f"{v:.6f}" for v in row])


# ---------------------------------------------------------------------------
# TDNN

# (offsets of the temporal context) per layer, x-vector frame-level stack
TDNN_CONTEXTS = ((-1, 0, 1), (-2, 0, 2), (-3, 0, 3), (0,), (0,))


class TDNNLayer(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, context: tuple[int, ...]):
        super().__init__()
        if len(context) == 1:
            kernel, dilation = 1, 1
        else:
            dilation = context[1] - context[0]
            kernel = len(context)
            if tuple(context) != tuple(context[0] + dilation * k for k in range(kernel)) or context[0] != -context[-1]:
                raise ContractError(f"context {context} must be symmetric and evenly spaced")
        self.context = tuple(context)
        self.conv = nn.Conv1d(in_dim, out_dim, kernel, dilation=dilation, padding=dilation * (kernel - 1) // 2)
        self.act = nn.ReLU()
        self.norm = nn.BatchNorm1d(out_dim)

    def forward(self, x):
        return self.norm(self.act(self.conv(x)))


class TDNN(nn.Module):
    """Dilated 1-D convolution stack; length preserving, one vector per time step."""

    def __init__(self, n_mels: int = 64, hidden: int = 512, output_dim: int = 512,
                 contexts=TDNN_CONTEXTS):
        super().__init__()
        dims = [n_mels] + [hidden] * (len(contexts) - 1) + [output_dim]
        self.layers = nn.Sequential(*[TDNNLayer(dims[i], dims[i + 1], c) for i, c in enumerate(contexts)])
        self.n_mels = n_mels
        self.output_dim = output_dim
        self.hidden = hidden
        self.contexts = tuple(tuple(c) for c in contexts)

    @property
    def radius(self) -> int:
        """Receptive-field half width in time steps."""
        return sum(max(c) for c in self.contexts)

    def config(self) -> dict:
        return {"n_mels": self.n_mels, "hidden": self.hidden, "output_dim": self.output_dim,
                "contexts": [list(c) for c in self.contexts]}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, n_mels, T) -> (B, T, output_dim)."""
        return self.layers(x).transpose(1, 2)


def _spec_tensor(spec) -> torch.Tensor:
    values = spec.values if isinstance(spec, MelSpectrogram) else spec
    return torch.as_tensor(np.asarray(values), dtype=torch.float32)


def tdnn_features(spec: MelSpectrogram, model: TDNN) -> torch.Tensor:
    """(T, 512) features for a whole spectrogram; gradients flow if the model trains."""
    x = _spec_tensor(spec)
    if x.dim() != 2 or x.shape[0] != model.n_mels:
        raise ContractError(f"spectrogram must be ({model.n_mels}, T), got {tuple(x.shape)}")
    if x.shape[1] == 0:
        return torch.zeros(0, model.output_dim)
    return model(x[None])[0]


def silence_features(model: TDNN, length: int, cfg: MelConfig = MelConfig()) -> torch.Tensor:
    """TDNN response to a silent spectrogram of ``length`` steps (for videos without audio)."""
    if length < 0:
        raise ContractError("length must be non-negative")
    spec = silent_spectrogram(length, MelConfig(model.n_mels, cfg.window_sec, cfg.stride_sec, cfg.log_eps))
    return tdnn_features(spec, model)
