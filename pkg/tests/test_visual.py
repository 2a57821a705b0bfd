from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from avmtl.checkpoint import param_hash
from avmtl.errors import ConfigError, ContractError
from avmtl.synthetic import SynthConfig, generate_synthetic_dataset
from avmtl.visual import (
    AlternationSchedule, AugmentConfig, LossConfig, OptimizerConfig, SmallResNet, TaskData, VisualModel,
    augment, embed, evaluate_loss, freeze, is_frozen, select_task, to_tensor_batch, train_multitask,
)


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return VisualModel().eval()


@pytest.fixture(scope="module")
def small_task_data():
    train, _ = generate_synthetic_dataset(SynthConfig(n_videos=1, n_val_videos=0, frames_per_video=32), 0)
    v = train.videos["train_000"]
    au = TaskData(v.pixels, np.array([a.au for a in train.annotations]))
    ex = TaskData(v.pixels, np.array([a.expr for a in train.annotations]))
    return au, ex


class FlatBackbone(nn.Module):
    """Minimal conforming backbone: average-pool then a linear map to 512."""

    embed_dim = 512

    def __init__(self):
        super().__init__()
        self.pool = nn.AdaptiveAvgPool2d(8)
        self.fc = nn.Linear(3 * 64, 512)

    def forward(self, x):
        return self.fc(torch.flatten(self.pool(x), 1))


# ---------------------------------------------------------------------------
# embedding and heads


def test_embed_zero_image_is_finite(model):
    e = embed(model, np.zeros((112, 112, 3), np.float32))
    assert e.shape == (512,) and torch.all(torch.isfinite(e))


def test_embed_deterministic_and_batched(model):
    images = np.random.default_rng(0).integers(0, 256, (64, 112, 112, 3), dtype=np.uint8)
    a = embed(model, images)
    assert a.shape == (64, 512)
    assert torch.equal(a, embed(model, images))
    assert torch.allclose(embed(model, images[3]), a[3], atol=1e-5)
    assert torch.allclose(embed(model, images, batch_size=7), a, atol=1e-5)


def test_embed_rejects_wrong_shape(model):
    with pytest.raises(ContractError):
        embed(model, np.zeros((100, 112, 3), np.float32))
    with pytest.raises(ContractError):
        to_tensor_batch(np.zeros((2, 3, 112, 112), np.float32))


def test_uint8_and_float_inputs_agree():
    img = np.random.default_rng(1).integers(0, 256, (112, 112, 3), dtype=np.uint8)
    assert torch.allclose(to_tensor_batch(img), to_tensor_batch(img.astype(np.float32) / 255.0))


def test_task_logits(model):
    zero = torch.zeros(512)
    assert torch.equal(model.task_logits(zero, "au"), model.au_head.bias)
    assert torch.equal(model.task_logits(zero, "expression"), model.expr_head.bias)
    assert model.task_logits(torch.randn(512), "au").shape == (12,)
    assert model.task_logits(torch.randn(3, 512), "expression").shape == (3, 7)
    with pytest.raises(ContractError):
        model.task_logits(zero, "valence")


def test_eval_mode_logits_deterministic(model):
    x = to_tensor_batch(np.random.default_rng(2).random((4, 112, 112, 3)).astype(np.float32))
    with torch.no_grad():
        assert torch.equal(model(x, "au"), model(x, "au"))


def test_backbone_weights_can_be_supplied():
    torch.manual_seed(1)
    donor = SmallResNet()
    m = VisualModel()
    m.load_backbone_weights(donor.state_dict())
    assert param_hash(m.backbone) == param_hash(donor)


# ---------------------------------------------------------------------------
# augmentation


def test_augment_identity_when_disabled():
    img = np.random.default_rng(3).random((112, 112, 3)).astype(np.float32)
    cfg = AugmentConfig(flip_prob=0.0, min_crop=112, hue=0.0, saturation=0.0, lightness=0.0)
    out = augment(img, np.random.default_rng(0), cfg)
    assert np.array_equal(out, img)


def test_augment_deterministic_for_seed():
    img = np.random.default_rng(4).random((112, 112, 3)).astype(np.float32)
    a = augment(img, np.random.default_rng(9))
    b = augment(img, np.random.default_rng(9))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, augment(img, np.random.default_rng(10)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_augment_stays_in_range(seed):
    rng = np.random.default_rng(seed)
    img = rng.random((112, 112, 3)).astype(np.float32)
    out = augment(img, rng)
    assert out.shape == (112, 112, 3)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_flip_only_mirrors():
    img = np.random.default_rng(5).random((112, 112, 3)).astype(np.float32)
    cfg = AugmentConfig(flip_prob=1.0, min_crop=112, hue=0.0, saturation=0.0, lightness=0.0)
    assert np.array_equal(augment(img, np.random.default_rng(0), cfg), img[:, ::-1])


# ---------------------------------------------------------------------------
# schedule


def test_select_task_examples():
    epoch = AlternationSchedule("epoch_by_epoch", "expression")
    assert [select_task(epoch, e, 0) for e in (1, 2, 3)] == ["expression", "au", "expression"]
    assert {select_task(epoch, 2, b) for b in range(10)} == {"au"}
    batch = AlternationSchedule("batch_by_batch", "expression")
    assert [select_task(batch, 1, b) for b in (0, 1, 2)] == ["expression", "au", "expression"]
    assert {select_task(batch, e, 1) for e in range(1, 6)} == {"au"}
    assert select_task(AlternationSchedule("batch_by_batch", "au"), 1, 0) == "au"
    with pytest.raises(ContractError):
        select_task(epoch, 0, 0)


def test_schedule_validation():
    with pytest.raises(ConfigError):
        AlternationSchedule("step_by_step")
    with pytest.raises(ConfigError):
        AlternationSchedule(first_task="valence")
    assert AlternationSchedule().mode == "epoch_by_epoch"
    assert AlternationSchedule().first_task == "expression"


# ---------------------------------------------------------------------------
# training


def _isolation_run(mode, data, steps, backbone=None):
    au, ex = data
    torch.manual_seed(0)
    model = VisualModel(backbone)
    hashes = [(param_hash(model.au_head), param_hash(model.expr_head), param_hash(model.backbone))]
    grads = []

    def on_step(entry):
        hashes.append((param_hash(model.au_head), param_hash(model.expr_head), param_hash(model.backbone)))
        grads.append(sum(float(p.grad.abs().sum()) for p in model.backbone.parameters() if p.grad is not None))
    _, history = train_multitask(model, au, ex, AlternationSchedule(mode), OptimizerConfig(0.01), LossConfig(),
                                 epochs=100, batch_size=8, max_steps=steps, seed=0, on_step=on_step)
    return history, hashes, grads


@pytest.mark.parametrize("mode", ["epoch_by_epoch", "batch_by_batch"])
def test_inactive_head_untouched_backbone_moves(small_task_data, mode):
    history, hashes, grads = _isolation_run(mode, small_task_data, 10)
    assert len(history) == 10
    for k, entry in enumerate(history):
        (au0, ex0, bb0), (au1, ex1, bb1) = hashes[k], hashes[k + 1]
        if entry["task"] == "expression":
            assert au0 == au1 and ex0 != ex1
        else:
            assert ex0 == ex1 and au0 != au1
        assert bb0 != bb1 and grads[k] > 0


def test_first_steps_expression_then_au(small_task_data):
    au, ex = small_task_data
    torch.manual_seed(0)
    m = VisualModel()
    before = param_hash(m.au_head), param_hash(m.expr_head), param_hash(m.backbone)
    _, h = train_multitask(m, au, ex, AlternationSchedule("batch_by_batch"), OptimizerConfig(), LossConfig(),
                           max_steps=1, batch_size=8)
    assert h[0]["task"] == "expression"
    assert param_hash(m.au_head) == before[0] and param_hash(m.expr_head) != before[1]
    assert param_hash(m.backbone) != before[2]


def test_history_task_sequences_differ_between_modes(small_task_data):
    au, ex = small_task_data
    runs = {}
    for mode in ("epoch_by_epoch", "batch_by_batch"):
        torch.manual_seed(0)
        _, h = train_multitask(VisualModel(FlatBackbone()), au, ex, AlternationSchedule(mode), OptimizerConfig(),
                               LossConfig(), epochs=2, batch_size=8, augment_cfg=None)
        runs[mode] = [e["task"] for e in h]
    # 32 frames / 8 = 4 batches per pass
    assert runs["epoch_by_epoch"] == ["expression"] * 4 + ["au"] * 4
    assert runs["batch_by_batch"] == ["expression", "au"] * 8


def test_training_is_reproducible(small_task_data):
    au, ex = small_task_data
    losses = []
    for _ in range(2):
        torch.manual_seed(0)
        m = VisualModel(FlatBackbone())
        _, h = train_multitask(m, au, ex, AlternationSchedule("batch_by_batch"), OptimizerConfig(), LossConfig(),
                               max_steps=6, batch_size=8, seed=4)
        losses.append(([e["loss"] for e in h], param_hash(m)))
    assert losses[0] == losses[1]


def test_empty_task_is_config_error(small_task_data):
    au, ex = small_task_data
    empty = TaskData(au.images[:0], au.labels[:0])
    with pytest.raises(ConfigError):
        train_multitask(VisualModel(FlatBackbone()), empty, ex, AlternationSchedule(), OptimizerConfig(), LossConfig())
    with pytest.raises(ConfigError):
        OptimizerConfig(lr=0.0)


def test_any_conforming_backbone_trains(small_task_data):
    history, hashes, _ = _isolation_run("batch_by_batch", small_task_data, 4, backbone=FlatBackbone())
    assert len(history) == 4 and hashes[0][2] != hashes[-1][2]


def test_overfits_32_frames(small_task_data):
    au, ex = small_task_data
    torch.manual_seed(0)
    m = VisualModel()
    lc = LossConfig()
    start = evaluate_loss(m, au, "au", lc), evaluate_loss(m, ex, "expression", lc)
    _, h = train_multitask(m, au, ex, AlternationSchedule("batch_by_batch"), OptimizerConfig(lr=0.01), lc,
                           epochs=1000, batch_size=16, max_steps=200, augment_cfg=None)
    end = evaluate_loss(m, au, "au", lc), evaluate_loss(m, ex, "expression", lc)
    assert len(h) == 200
    assert end[0] < 0.1 * start[0] and end[1] < 0.1 * start[1]


def test_freeze():
    m = VisualModel(FlatBackbone())
    m.train()
    assert not is_frozen(m)
    freeze(m)
    assert is_frozen(m) and not m.training
