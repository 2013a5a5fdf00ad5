import json

import numpy as np
import pytest
import torch
import torch.nn as nn

from guidedpurify.codec import IdentityCodec, ImageBatch
from guidedpurify.conditioning import ConstantCaptionProvider, HashTextEncoder
from guidedpurify.diffusion import IdentityDenoiser, PurifierConfig
from guidedpurify.errors import ConfigError, DivergenceError
from guidedpurify.finetune import (
    FinetuneConfig,
    array_checksum,
    build_purified_dataset,
    finetune_classifier,
    load_purified_dataset,
    state_checksum,
)
from guidedpurify.schedules import make_linear_schedule
from guidedpurify.toy import ToyClassifier, make_toy_dataset


def _t0_config():
    return PurifierConfig(
        t_frac=0.0,
        schedule=make_linear_schedule(10, 1e-3, 0.2),
        codec=IdentityCodec(),
        captioner=ConstantCaptionProvider(""),
        text_encoder=HashTextEncoder(),
        denoiser=IdentityDenoiser(),
    )


def _state_equal(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


def test_identity_purifier_dataset_equals_input(tmp_path):
    data = make_toy_dataset(40, seed=3)
    ds = build_purified_dataset(data, _t0_config(), seed=1, out_dir=tmp_path / "ds", batch_size=16)
    assert torch.equal(ds.batch.data, data.data)
    assert torch.equal(ds.batch.labels, data.labels)
    loaded = load_purified_dataset(tmp_path / "ds")
    assert torch.equal(loaded.batch.data, data.data)
    assert loaded.manifest["sample_count"] == 40
    assert loaded.manifest["checksum"] == array_checksum(data.data.numpy(), data.labels.numpy())


def test_rerun_is_bitwise_identical(toy_stack):
    data = make_toy_dataset(64, seed=8)
    cfg = toy_stack.purifier_config(guided=True)
    a = build_purified_dataset(data, cfg, seed=5, batch_size=32)
    b = build_purified_dataset(data, cfg, seed=5, batch_size=32)
    assert torch.equal(a.batch.data, b.batch.data)
    assert a.manifest == b.manifest


def test_class_balance_preserved(toy_stack):
    data = make_toy_dataset(512, seed=4)
    ds = build_purified_dataset(data, toy_stack.purifier_config(guided=True), seed=0)
    before = torch.bincount(data.labels, minlength=2).tolist()
    assert before == [256, 256]
    assert torch.bincount(ds.batch.labels, minlength=2).tolist() == before
    assert ds.batch.in_range()


def test_save_refuses_existing_dir(tmp_path):
    (tmp_path / "ds").mkdir()
    with pytest.raises(FileExistsError):
        build_purified_dataset(make_toy_dataset(4, seed=0), _t0_config(), seed=0, out_dir=tmp_path / "ds")


def test_load_detects_corruption(tmp_path):
    build_purified_dataset(make_toy_dataset(8, seed=0), _t0_config(), seed=0, out_dir=tmp_path / "ds")
    images = np.load(tmp_path / "ds" / "images.npy")
    images[0, 0, 0, 0] += 0.5
    np.save(tmp_path / "ds" / "images.npy", images)
    with pytest.raises(ValueError):
        load_purified_dataset(tmp_path / "ds")


def test_manifest_echoes_purifier(tmp_path):
    ds = build_purified_dataset(make_toy_dataset(8, seed=0), _t0_config(), seed=3)
    m = ds.manifest
    assert m["seed"] == 3 and m["purifier"]["t_frac"] == 0.0
    json.dumps(m)


def test_zero_epochs_leaves_parameters_unchanged():
    model = ToyClassifier()
    data = make_toy_dataset(32, seed=0)
    tuned = finetune_classifier(model, data, FinetuneConfig(epochs=0))
    assert tuned is not model
    assert _state_equal(tuned, model)
    assert tuned.finetune_history == []


def test_input_classifier_not_mutated():
    torch.manual_seed(0)
    model = ToyClassifier()
    before = state_checksum(model)
    tuned = finetune_classifier(model, make_toy_dataset(64, seed=0), FinetuneConfig(epochs=2, batch_size=16))
    assert state_checksum(model) == before
    assert state_checksum(tuned) != before
    assert len(tuned.finetune_history) == 2
    assert all(np.isfinite(tuned.finetune_history))


def test_convex_logistic_regression_loss_strictly_decreases():
    g = torch.Generator().manual_seed(0)
    n, d = 200, 10
    w_true = torch.randn(d, generator=g, dtype=torch.float64)
    x = torch.rand(n, 1, 1, d, generator=g, dtype=torch.float64)
    y = ((x.flatten(1) - 0.5) @ w_true > 0).long()
    model = nn.Sequential(nn.Flatten(), nn.Linear(d, 2)).to(torch.float64)
    cfg = FinetuneConfig(epochs=30, learning_rate=0.05, optimizer="sgd", batch_size=n)
    tuned = finetune_classifier(model, ImageBatch(x, y), cfg)
    hist = tuned.finetune_history
    assert len(hist) == 30
    assert all(b < a for a, b in zip(hist, hist[1:]))


def test_divergence_raises_with_snapshot():
    model = ToyClassifier()
    with torch.no_grad():
        model.net[1].weight[0, 0] = float("inf")
    with pytest.raises(DivergenceError) as info:
        finetune_classifier(model, make_toy_dataset(16, seed=0), FinetuneConfig(epochs=1))
    assert info.value.snapshot is not None
    assert set(info.value.snapshot) == set(model.state_dict())


@pytest.mark.parametrize(
    "kwargs", [dict(epochs=-1), dict(learning_rate=0), dict(optimizer="lbfgs"), dict(batch_size=0)]
)
def test_finetune_config_validation(kwargs):
    with pytest.raises(ConfigError):
        FinetuneConfig(**kwargs)
