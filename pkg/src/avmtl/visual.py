"""Frame-level visual model and the alternating multi-task trainer.

Both heads sit on one shared backbone. Training rotates between the
expression head and the AU head either per epoch or per batch; the inactive
head is never part of the graph for that step, so its parameters (and its
momentum buffers) stay untouched while the backbone moves every step.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torchvision.transforms.functional as TF
from torch import nn

from .dataset import FRAME_SIZE, NUM_AUS, NUM_EXPR
from .errors import ConfigError, ContractError
from .losses import BCEParams, FocalParams, focal_loss_with_logits, weighted_bce_with_logits

logger = logging.getLogger(__name__)

EMBED_DIM = 512


class ResidualBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 2):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class SmallResNet(nn.Module):
    """Desk-scale residual backbone: stem + 4 downsampling residual stages -> GAP -> 512."""

    def __init__(self, widths=(32, 64, 128, 256), stem: int = 16, embed_dim: int = EMBED_DIM):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(3, stem, 3, 2, 1, bias=False), nn.BatchNorm2d(stem), nn.ReLU(inplace=True))
        stages, cin = [], stem
        for w in widths:
            stages.append(ResidualBlock(cin, w, 2))
            cin = w
        self.stages = nn.Sequential(*stages)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(cin, embed_dim)
        self.embed_dim = embed_dim
        self.widths = tuple(widths)
        self.stem_width = stem

    def config(self) -> dict:
        return {"widths": list(self.widths), "stem": self.stem_width, "embed_dim": self.embed_dim}

    def forward(self, x):
        x = self.stages(self.stem(x))
        return self.fc(torch.flatten(self.pool(x), 1))


class VisualModel(nn.Module):
    """Shared backbone with an AU head (512 -> 12) and an expression head (512 -> 7).

    Any backbone mapping (B, 3, 112, 112) to (B, embed_dim) and exposing an
    ``embed_dim`` attribute can be dropped in.
    """

    def __init__(self, backbone: nn.Module | None = None):
        super().__init__()
        self.backbone = backbone if backbone is not None else SmallResNet()
        dim = self.backbone.embed_dim
        self.au_head = nn.Linear(dim, NUM_AUS)
        self.expr_head = nn.Linear(dim, NUM_EXPR)

    @property
    def embed_dim(self) -> int:
        return self.backbone.embed_dim

    def head(self, task: str) -> nn.Linear:
        if task == "au":
            return self.au_head
        if task == "expression":
            return self.expr_head
        raise ContractError(f"unknown task {task!r}")

    def forward(self, images: torch.Tensor, task: str) -> torch.Tensor:
        return self.head(task)(self.backbone(images))

    def task_logits(self, embedding: torch.Tensor, task: str) -> torch.Tensor:
        return self.head(task)(embedding)

    def load_backbone_weights(self, state_dict: dict) -> None:
        """Plug in externally trained backbone weights (e.g. a face-recognition model)."""
        self.backbone.load_state_dict(state_dict)


def to_tensor_batch(images) -> torch.Tensor:
    """HWC image(s) (uint8 or float in [0, 1]) -> float32 (B, 3, 112, 112)."""
    x = torch.as_tensor(np.asarray(images))
    if x.dtype == torch.uint8:
        x = x.float() / 255.0
    else:
        x = x.float()
    if x.dim() == 3:
        x = x[None]
    if x.dim() != 4 or tuple(x.shape[1:]) != (FRAME_SIZE, FRAME_SIZE, 3):
        raise ContractError(f"expected (..., {FRAME_SIZE}, {FRAME_SIZE}, 3) images, got {tuple(x.shape)}")
    return x.permute(0, 3, 1, 2).contiguous()


@torch.no_grad()
def embed(model: VisualModel, images, batch_size: int = 256) -> torch.Tensor:
    """Eval-mode embeddings, (B, 512) for a batch or (512,) for one image."""
    single = np.asarray(images).ndim == 3
    x = to_tensor_batch(images)
    was_training = model.training
    model.eval()
    try:
        out = torch.cat([model.backbone(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]) \
            if len(x) else torch.zeros(0, model.embed_dim)
    finally:
        model.train(was_training)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    min_crop: int = 100
    hue: float = 0.1
    saturation: float = 0.1
    lightness: float = 0.1


def augment(image: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Random flip, crop of ``min_crop``..112 px rescaled to 112, and colour jitter.

    Takes and returns a float (112, 112, 3) image in [0, 1].
    """
    x = torch.as_tensor(np.asarray(image, dtype=np.float32)).permute(2, 0, 1)
    if rng.random() < cfg.flip_prob:
        x = TF.hflip(x)
    size = int(rng.integers(cfg.min_crop, FRAME_SIZE + 1))
    if size < FRAME_SIZE:
        top = int(rng.integers(0, FRAME_SIZE - size + 1))
        left = int(rng.integers(0, FRAME_SIZE - size + 1))
        x = TF.resized_crop(x, top, left, size, size, [FRAME_SIZE, FRAME_SIZE], antialias=True)
    hue = rng.uniform(-cfg.hue, cfg.hue)
    sat = 1.0 + rng.uniform(-cfg.saturation, cfg.saturation)
    light = 1.0 + rng.uniform(-cfg.lightness, cfg.lightness)
    if hue:
        x = TF.adjust_hue(x, hue)
    if sat != 1.0:
        x = TF.adjust_saturation(x, sat)
    if light != 1.0:
        x = TF.adjust_brightness(x, light)
    return x.clamp(0.0, 1.0).permute(1, 2, 0).numpy()


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class AlternationSchedule:
    mode: str = "epoch_by_epoch"
    first_task: str = "expression"

    def __post_init__(self):
        if self.mode not in ("epoch_by_epoch", "batch_by_batch"):
            raise ConfigError(f"unknown alternation mode {self.mode!r}")
        if self.first_task not in ("expression", "au"):
            raise ConfigError(f"unknown first task {self.first_task!r}")

    @property
    def second_task(self) -> str:
        return "au" if self.first_task == "expression" else "expression"


def select_task(schedule: AlternationSchedule, epoch: int, batch: int) -> str:
    """Active head for 1-based ``epoch`` and 0-based ``batch``."""
    if epoch < 1 or batch < 0:
        raise ContractError("epoch must be >= 1 and batch >= 0")
    parity = (epoch - 1) % 2 if schedule.mode == "epoch_by_epoch" else batch % 2
    return schedule.first_task if parity == 0 else schedule.second_task


# ---------------------------------------------------------------------------
# training


@dataclass
class OptimizerConfig:
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")

    def build(self, params) -> torch.optim.SGD:
        return torch.optim.SGD(params, lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay)


@dataclass
class LossConfig:
    bce: BCEParams = field(default_factory=BCEParams.uniform)
    focal: FocalParams = field(default_factory=FocalParams.uniform)


@dataclass
class TaskData:
    """Frames and labels of one task: uint8 images (N, 112, 112, 3) and labels (N, 12) or (N,)."""

    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def task_loss(logits: torch.Tensor, labels: torch.Tensor, task: str, loss_cfg: LossConfig) -> torch.Tensor:
    if task == "au":
        return weighted_bce_with_logits(logits, labels.float(), loss_cfg.bce)
    return focal_loss_with_logits(logits, labels.long(), loss_cfg.focal)


class _Loader:
    """Endless shuffled mini-batches over one task's data."""

    def __init__(self, data: TaskData, batch_size: int, rng: np.random.Generator):
        self.data, self.batch_size, self.rng = data, batch_size, rng
        self._order: list[np.ndarray] = []

    @property
    def batches_per_pass(self) -> int:
        return -(-len(self.data) // self.batch_size)

    def new_pass(self) -> None:
        perm = self.rng.permutation(len(self.data))
        self._order = [perm[i:i + self.batch_size] for i in range(0, len(perm), self.batch_size)]

    def next(self) -> np.ndarray:
        if not self._order:
            self.new_pass()
        return self._order.pop(0)


def train_multitask(model: VisualModel, au_data: TaskData, expr_data: TaskData,
                    schedule: AlternationSchedule, optimizer_cfg: OptimizerConfig,
                    loss_cfg: LossConfig, *, epochs: int = 1, batch_size: int = 64,
                    max_steps: int | None = None, augment_cfg: AugmentConfig | None = AugmentConfig(),
                    seed: int = 0, on_step: Callable[[dict], None] | None = None):
    """Alternating-head training. Returns ``(model, history)``.

    An epoch is one pass over the active task's data in ``epoch_by_epoch``
    mode; in ``batch_by_batch`` mode it is ``2 * max(passes)`` alternating
    batches, so each task sees at least one full pass. ``on_step`` is called
    after every optimiser step with the history entry.
    """
    if len(au_data) == 0 or len(expr_data) == 0:
        raise ConfigError("both tasks need at least one labelled frame")
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    loaders = {"au": _Loader(au_data, batch_size, rng), "expression": _Loader(expr_data, batch_size, rng)}
    data = {"au": au_data, "expression": expr_data}
    opt = optimizer_cfg.build([p for p in model.parameters() if p.requires_grad])
    history: list[dict] = []
    model.train()
    for epoch in range(1, epochs + 1):
        if schedule.mode == "epoch_by_epoch":
            task = select_task(schedule, epoch, 0)
            loaders[task].new_pass()
            n_batches = loaders[task].batches_per_pass
        else:
            for ld in loaders.values():
                ld.new_pass()
            n_batches = 2 * max(ld.batches_per_pass for ld in loaders.values())
        for b in range(n_batches):
            if max_steps is not None and len(history) >= max_steps:
                return model, history
            task = select_task(schedule, epoch, b)
            idx = loaders[task].next()
            images = data[task].images[idx]
            if augment_cfg is not None:
                images = np.stack([augment(im.astype(np.float32) / 255.0, rng, augment_cfg) for im in images])
            x = to_tensor_batch(images)
            y = torch.as_tensor(data[task].labels[idx])
            loss = task_loss(model(x, task), y, task, loss_cfg)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            entry = {"step": len(history), "epoch": epoch, "batch": b, "task": task, "loss": loss.item()}
            history.append(entry)
            if on_step is not None:
                on_step(entry)
        logger.info("visual epoch %d done (%s), last loss %.4f", epoch, history[-1]["task"], history[-1]["loss"])
    return model, history


@torch.no_grad()
def evaluate_loss(model: VisualModel, data: TaskData, task: str, loss_cfg: LossConfig) -> float:
    model.eval()
    try:
        logits = model(to_tensor_batch(data.images), task)
        return float(task_loss(logits, torch.as_tensor(data.labels), task, loss_cfg))
    finally:
        model.train()


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def is_frozen(model: nn.Module) -> bool:
    return all(not p.requires_grad for p in model.parameters())
