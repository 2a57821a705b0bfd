from __future__ import annotations

import struct

import numpy as np
import pytest
import torch

from avmtl.audio import TDNN, MelConfig
from avmtl.checkpoint import (
    FORMAT_VERSION, MAGIC, load_checkpoint, load_sequence, load_visual, param_hash, save_checkpoint,
    save_sequence, save_visual, sha256_file,
)
from avmtl.errors import CheckpointError
from avmtl.sequence import SequenceModel
from avmtl.visual import AlternationSchedule, VisualModel, embed

from test_visual import FlatBackbone


@pytest.fixture(scope="module")
def visual():
    torch.manual_seed(0)
    m = VisualModel()
    with torch.no_grad():  # move BatchNorm statistics off their defaults
        m.train()
        m.backbone(torch.rand(4, 3, 112, 112))
    return m.eval()


def test_visual_round_trip_is_byte_exact(tmp_path, visual):
    sched = AlternationSchedule("batch_by_batch", "au")
    h1 = save_visual(tmp_path / "a.ckpt", visual, sched, {"note": "x"})
    loaded, meta = load_visual(tmp_path / "a.ckpt")
    assert meta["schedule"] == {"mode": "batch_by_batch", "first_task": "au"} and meta["note"] == "x"
    h2 = save_visual(tmp_path / "b.ckpt", loaded, AlternationSchedule(**meta["schedule"]), {"note": "x"})
    assert h1 == h2 == sha256_file(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert param_hash(loaded) == param_hash(visual)
    images = np.random.default_rng(0).integers(0, 256, (3, 112, 112, 3), dtype=np.uint8)
    assert torch.equal(embed(loaded, images), embed(visual, images))


def test_sequence_round_trip_is_byte_exact(tmp_path):
    torch.manual_seed(1)
    tdnn, model = TDNN(), SequenceModel(n_heads=4, ff_dim=128, positional_encoding=False)
    cfg = MelConfig()
    save_sequence(tmp_path / "s.ckpt", tdnn, model, cfg, {"window": 30})
    tdnn2, model2, cfg2, meta = load_sequence(tmp_path / "s.ckpt")
    assert cfg2 == cfg and meta["window"] == 30
    assert model2.config() == model.config()
    save_sequence(tmp_path / "t.ckpt", tdnn2, model2, cfg2, {"window": 30})
    assert (tmp_path / "s.ckpt").read_bytes() == (tmp_path / "t.ckpt").read_bytes()
    assert param_hash(tdnn2) == param_hash(tdnn) and param_hash(model2) == param_hash(model)


def test_rejections(tmp_path, visual):
    path = tmp_path / "v.ckpt"
    save_visual(path, visual, AlternationSchedule())
    data = path.read_bytes()

    with pytest.raises(CheckpointError, match="not found"):
        load_visual(tmp_path / "missing.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"PK\x03\x04" + data[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_visual(tmp_path / "junk.ckpt")
    bumped = MAGIC + struct.pack("<I", FORMAT_VERSION + 1) + data[len(MAGIC) + 4:]
    (tmp_path / "new.ckpt").write_bytes(bumped)
    with pytest.raises(CheckpointError, match=f"version {FORMAT_VERSION + 1}"):
        load_visual(tmp_path / "new.ckpt")
    with pytest.raises(CheckpointError, match="expected 'sequence'"):
        load_sequence(path)


def test_state_mismatch_and_foreign_backbone(tmp_path):
    with pytest.raises(CheckpointError):
        save_visual(tmp_path / "f.ckpt", VisualModel(FlatBackbone()), AlternationSchedule())
    save_checkpoint(tmp_path / "bad.ckpt", "visual", {"model": {"x": torch.zeros(2)}},
                    {"backbone": {"widths": [32, 64, 128, 256], "stem": 16, "embed_dim": 512}})
    with pytest.raises(CheckpointError, match="does not match"):
        load_visual(tmp_path / "bad.ckpt")


def test_generic_container_preserves_dtypes(tmp_path):
    states = {"m": {"f": torch.arange(6, dtype=torch.float64).reshape(2, 3), "i": torch.tensor([1, 2], dtype=torch.int64),
                    "b": torch.tensor([True, False])}}
    save_checkpoint(tmp_path / "g.ckpt", "misc", states, {"k": 1})
    meta, back = load_checkpoint(tmp_path / "g.ckpt", "misc")
    assert meta == {"k": 1}
    for name, t in states["m"].items():
        assert back["m"][name].dtype == t.dtype and torch.equal(back["m"][name], t)


def test_param_hash_sensitivity(visual):
    clone = VisualModel()
    clone.load_state_dict(visual.state_dict())
    assert param_hash(clone) == param_hash(visual)
    with torch.no_grad():
        clone.au_head.bias[0] += 1e-6
    assert param_hash(clone) != param_hash(visual)
