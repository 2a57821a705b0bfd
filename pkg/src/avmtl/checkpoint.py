"""Versioned, byte-deterministic checkpoint container.

Layout::

    b"AVMTCKPT" | u32 format version | u64 header size | JSON header | raw tensor bytes

The header (sorted-key JSON) records the checkpoint kind, free-form metadata
and, per tensor, its name, dtype, shape and byte range. Saving the same
state twice yields identical bytes, so ``save -> load -> save`` round-trips
exactly and file hashes can stand in for parameter hashes.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .audio import TDNN, MelConfig
from .errors import CheckpointError
from .sequence import SequenceModel
from .visual import AlternationSchedule, SmallResNet, VisualModel

MAGIC = b"AVMTCKPT"
FORMAT_VERSION = 1


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def param_hash(module: nn.Module) -> str:
    """Hash of every parameter and buffer (name, dtype, shape, bytes)."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        arr = t.detach().cpu().contiguous().numpy()
        h.update(f"{name}|{arr.dtype.str}|{arr.shape}".encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_checkpoint(path: str | Path, kind: str, states: dict[str, dict[str, torch.Tensor]], meta: dict) -> str:
    """Write ``states`` (``{module_name: state_dict}``) and return the file's sha256."""
    entries, blobs, offset = [], [], 0
    for module_name in sorted(states):
        for name, t in sorted(states[module_name].items()):
            arr = t.detach().cpu().contiguous().numpy()
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = arr.tobytes()
            entries.append({"name": f"{module_name}/{name}", "dtype": arr.dtype.str,
                            "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
    header = json.dumps({"kind": kind, "meta": meta, "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    return sha256_file(path)


def load_checkpoint(path: str | Path, kind: str) -> tuple[dict, dict[str, dict[str, torch.Tensor]]]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, header_len = struct.unpack_from("<IQ", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads version {FORMAT_VERSION}")
    start = len(MAGIC) + 12
    header = json.loads(data[start:start + header_len])
    if header["kind"] != kind:
        raise CheckpointError(f"{path}: holds a {header['kind']!r} checkpoint, expected {kind!r}")
    body = start + header_len
    states: dict[str, dict[str, torch.Tensor]] = {}
    for e in header["tensors"]:
        raw = data[body + e["offset"]: body + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        module_name, name = e["name"].split("/", 1)
        states.setdefault(module_name, {})[name] = torch.from_numpy(arr)
    return header["meta"], states


def save_visual(path, model: VisualModel, schedule: AlternationSchedule, meta: dict | None = None) -> str:
    if not isinstance(model.backbone, SmallResNet):
        raise CheckpointError("only the built-in SmallResNet backbone can be checkpointed")
    meta = {"backbone": model.backbone.config(), "schedule": {"mode": schedule.mode, "first_task": schedule.first_task},
            **(meta or {})}
    return save_checkpoint(path, "visual", {"model": model.state_dict()}, meta)


def load_visual(path) -> tuple[VisualModel, dict]:
    meta, states = load_checkpoint(path, "visual")
    cfg = meta["backbone"]
    model = VisualModel(SmallResNet(tuple(cfg["widths"]), cfg["stem"], cfg["embed_dim"]))
    _load_state(model, states["model"], path)
    return model, meta


def save_sequence(path, audio: TDNN, model: SequenceModel, mel_cfg: MelConfig, meta: dict | None = None) -> str:
    meta = {"tdnn": audio.config(), "sequence": model.config(),
            "mel": {"n_mels": mel_cfg.n_mels, "window_sec": mel_cfg.window_sec,
                    "stride_sec": mel_cfg.stride_sec, "log_eps": mel_cfg.log_eps},
            **(meta or {})}
    return save_checkpoint(path, "sequence", {"audio": audio.state_dict(), "sequence": model.state_dict()}, meta)


def load_sequence(path) -> tuple[TDNN, SequenceModel, MelConfig, dict]:
    meta, states = load_checkpoint(path, "sequence")
    t = meta["tdnn"]
    audio = TDNN(t["n_mels"], t["hidden"], t["output_dim"], tuple(tuple(c) for c in t["contexts"]))
    model = SequenceModel(**meta["sequence"])
    _load_state(audio, states["audio"], path)
    _load_state(model, states["sequence"], path)
    return audio, model, MelConfig(**meta["mel"]), meta


def _load_state(module: nn.Module, state: dict, path) -> None:
    try:
        module.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: state does not match model: {exc}") from None
