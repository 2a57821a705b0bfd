"""Pipeline configuration: flat ``key = value`` files with CLI overrides.

Precedence is flags > file > defaults. Relative paths in a file resolve
against the file's own directory, so a config can travel with its data.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError

# per-stage seed offsets from the master seed
SEED_OFFSETS = {"prepare": 0, "visual": 1, "sequence": 2, "evaluate": 3}

_PATH_KEYS = ("train_au_dir", "train_expr_dir", "val_au_dir", "val_expr_dir",
              "frames_dir", "audio_dir", "aux_au_dir", "out_dir")
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class PipelineConfig:
    # paths
    train_au_dir: str | None = None
    train_expr_dir: str | None = None
    val_au_dir: str | None = None
    val_expr_dir: str | None = None
    frames_dir: str | None = None
    audio_dir: str | None = None
    aux_au_dir: str | None = None
    out_dir: str = "runs/default"
    fps: float = 30.0
    seed: int = 0
    # visual stage
    visual_lr: float = 0.001
    visual_momentum: float = 0.9
    visual_batch: int = 64
    visual_epochs: int = 10
    alternation: str = "epoch_by_epoch"
    first_task: str = "expression"
    augment: bool = True
    # audio + sequence stage
    seq_lr: float = 0.01
    seq_momentum: float = 0.9
    seq_steps: int = 200
    seq_batch: int = 8
    window: int = 30
    encoder_layers: int = 1
    heads: int = 8
    ff: int = 2048
    dropout: float = 0.1
    positional_encoding: bool = True
    # losses and metrics
    focal_gamma: float = 2.0
    pos_weight_max: float = 10.0
    threshold: float = 0.5
    degenerate_f1: float = 1.0
    dedup_mode: str = "video"
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("visual_lr", "seq_lr", "fps"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        for name in ("visual_batch", "visual_epochs", "seq_batch", "window", "encoder_layers",
                     "heads", "ff", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.seq_steps < 0:
            raise ConfigError("seq_steps must be >= 0")
        if self.alternation not in ("epoch_by_epoch", "batch_by_batch"):
            raise ConfigError(f"alternation must be epoch_by_epoch or batch_by_batch, got {self.alternation!r}")
        if self.first_task not in ("expression", "au"):
            raise ConfigError(f"first_task must be expression or au, got {self.first_task!r}")
        if self.dedup_mode not in ("video", "frame"):
            raise ConfigError(f"dedup_mode must be video or frame, got {self.dedup_mode!r}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("threshold must lie in [0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.pos_weight_max < 1:
            raise ConfigError("pos_weight_max must be >= 1")
        if self.focal_gamma < 0:
            raise ConfigError("focal_gamma must be >= 0")
        if (1024 % self.heads) != 0:
            raise ConfigError("heads must divide the fused width 1024")

    def stage_seed(self, stage: str) -> int:
        return self.seed + SEED_OFFSETS[stage]

    def out(self, *parts: str) -> Path:
        return Path(self.out_dir).joinpath(*parts)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                value = ""
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, **overrides) -> "PipelineConfig":
        """Copy with non-None ``overrides`` applied (string values are parsed)."""
        values = self.to_dict()
        for key, raw in overrides.items():
            if raw is None:
                continue
            values[key] = _coerce(key, raw) if isinstance(raw, str) else raw
        return PipelineConfig(**values)


_FIELD_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _coerce(key: str, raw: str):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if "bool" in kind:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if "int" in kind:
            return int(raw)
        if "float" in kind:
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    if "None" in kind and raw == "":
        return None
    return raw


def parse_config_text(text: str, base_dir: str | Path | None = None, source: str = "<config>") -> dict[str, Any]:
    """Parse ``key = value`` lines into typed values (relative paths joined to ``base_dir``)."""
    values: dict[str, Any] = {}
    for line_no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{line_no}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(f"{source}:{line_no}: duplicate key {key!r}")
        try:
            value = _coerce(key, raw)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{line_no}: {exc}") from None
        if key in _PATH_KEYS and value is not None and base_dir is not None and not Path(value).is_absolute():
            value = str(Path(base_dir) / value)
        values[key] = value
    return values


def load_config(path: str | Path | None = None, **overrides) -> PipelineConfig:
    """Defaults, then the file at ``path`` (if any), then non-None ``overrides``."""
    values: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        values = parse_config_text(path.read_text(encoding="utf-8"), path.parent, str(path))
    cfg = PipelineConfig(**values)
    return cfg.with_overrides(**overrides)
