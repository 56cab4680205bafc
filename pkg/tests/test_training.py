import json
import math

import numpy as np
import pytest
import torch

from pulsediff.checkpoint import load_checkpoint, save_checkpoint
from pulsediff.conditions import CONDITIONS
from pulsediff.data.cmr import generate_cmr_volume
from pulsediff.sampling import bundle_from_record, parse_drop, sample_clip
from pulsediff.training import (STAGE2_TRAINABLE, ConditionLeakError, ConfigError, FreezeMask,
                                IncompatibleCheckpointError, TrainConfig, TrainedModel, assert_mask_only,
                                finetune_cmr, force_mask_only, lr_at, param_group, smoothed_losses, total_steps,
                                train_stage1, train_stage2)

from conftest import phantom_set

TINY_MODEL = dict(base_channels=16, context_dim=16, heads=2, norm_groups=4, text_tokens=2, prior_grid=2,
                  prior_raw_dim=8, encoder_hidden=8, attention_levels=[0, 1])
TINY = dict(image_size=16, lr_peak=1e-3, warmup_steps=20, T=100, beta_start=1e-3, beta_end=0.2,
            vae_steps=60, model=TINY_MODEL)


@pytest.fixture(scope="module")
def tiny_data():
    return phantom_set(8, seed=0, frames=8, size=16)


@pytest.fixture(scope="module")
def stage1(tiny_data):
    return train_stage1(TrainConfig(stage="1", steps=200, **TINY), tiny_data)


def test_config_json_roundtrip(tmp_path):
    cfg = TrainConfig(stage="2", steps=10, model={"base_channels": 32})
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    back = TrainConfig.from_json(tmp_path / "c.json")
    assert back == cfg and back.hash() == cfg.hash()
    assert TrainConfig(seed=1).hash() != TrainConfig(seed=2).hash()


def test_config_unknown_key():
    with pytest.raises(ConfigError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})


def test_config_problems_listed_exhaustively():
    cfg = TrainConfig(stage="1", frames=4, lr_peak=-1, drop_probs={"doppler": 0.1}, image_size=30)
    problems = cfg.problems()
    assert len(problems) == 4
    with pytest.raises(ConfigError) as exc:
        cfg.validate()
    assert exc.value.problems == problems


def test_config_desk_defaults():
    assert TrainConfig(stage="1").resolved().batch_size == 16
    r = TrainConfig(stage="2").resolved()
    assert (r.batch_size, r.frames) == (4, 8)


def test_lr_schedule_points():
    cfg = TrainConfig()
    total = 2000
    assert lr_at(0, cfg, total) == 0.0
    assert lr_at(500, cfg, total) == 1e-4
    assert lr_at((500 + total) // 2, cfg, total) == pytest.approx(5e-5, rel=1e-12)
    assert lr_at(total, cfg, total) == pytest.approx(0.0, abs=1e-20)


def test_lr_continuous_and_monotone():
    cfg = TrainConfig(warmup_steps=50)
    total = 400
    eps = 1e-9
    left = cfg.lr_peak * (50 - eps) / 50
    assert abs(lr_at(50, cfg, total) - left) < 1e-12
    vals = [lr_at(s, cfg, total) for s in range(total + 1)]
    assert all(a <= b for a, b in zip(vals[:50], vals[1:51]))
    assert all(a >= b for a, b in zip(vals[50:], vals[51:]))


def test_total_steps():
    assert total_steps(TrainConfig(steps=7), 100) == 7
    assert total_steps(TrainConfig(epochs=3, batch_size=16), 40) == 9


def test_freeze_mask_resolution():
    names = ["unet.mid_attn.temporal.qkv.weight", "unet.mid_attn.xattn.q_text.weight",
             "unet.mid_attn.xattn.kv_text.weight", "cond.flow_encoder.net.0.weight", "cond.mask_encoder.net.0.bias"]
    keep = FreezeMask(STAGE2_TRAINABLE + ("unet.*.xattn.q_img.*",)).resolve(names + ["unet.x.xattn.q_img.weight"])
    assert keep == {names[0], names[1], names[3], "unet.x.xattn.q_img.weight"}
    with pytest.raises(ValueError, match="match no parameter"):
        FreezeMask(("nothing.*",)).resolve(names)


def test_param_groups():
    assert param_group("unet.down.1.attn.0.temporal.qkv.weight") == "unet.temporal"
    assert param_group("unet.mid_attn.xattn.q_img.weight") == "unet.xattn.q_img"
    assert param_group("unet.conv_in.weight") == "unet.spatial"
    assert param_group("cond.flow_encoder.net.0.weight") == "cond.flow_encoder"
    assert param_group("adapter.fc1.weight") == "adapter"


def test_stage1_loss_falls(stage1):
    first, last = smoothed_losses(stage1.losses, 20)
    assert last < 0.7 * first
    assert len(stage1.losses) == 200 == len(stage1.lrs)


def test_stage1_metadata(stage1):
    m = stage1.meta
    assert m["stage"] == "1" and m["epochs"] == 200 and m["step"] == 200
    assert m["schedule"] == {"T": 100, "beta_start": 1e-3, "beta_end": 0.2, "family": "linear"}
    assert m["embedder_ids"] == {"text": "text:lookup-v1", "image": "img:convpatch-v1"}
    assert m["selection"] == "last"


def test_stage1_deterministic(tiny_data):
    cfg = TrainConfig(stage="1", steps=15, **TINY)
    a = train_stage1(cfg, tiny_data[:3])
    b = train_stage1(cfg, tiny_data[:3])
    assert a.losses == b.losses


def test_stage1_rejects_mismatched_size(tiny_data):
    with pytest.raises(ValueError, match="image_size"):
        train_stage1(TrainConfig(stage="1", steps=2, **{**TINY, "image_size": 32}), tiny_data)


def test_stage2_freeze_and_trainable_set(stage1, tiny_data):
    cfg = TrainConfig(stage="2", steps=20, **{k: v for k, v in TINY.items() if k != "vae_steps"})
    from pulsediff.inflation import inflate_model
    ref, report = inflate_model(stage1.model, 8, cfg.seed)
    before = {n: p.detach().clone() for n, p in ref.named_parameters()}
    s2 = train_stage2(cfg, tiny_data, stage1)
    trainable = {n for n, p in s2.model.named_parameters() if p.requires_grad}
    expected = set(report.new_temporal) | set(report.new_flow) | {
        n for n, _ in report.mapped if ".xattn.q_text." in n or ".xattn.q_img." in n}
    assert trainable == expected
    for n, p in s2.model.named_parameters():
        if n not in trainable:
            assert torch.equal(p.detach(), before[n]), n
    assert any(not torch.equal(p.detach(), before[n]) for n, p in s2.model.named_parameters() if n in trainable)


def test_stage2_requires_image_checkpoint(stage1, tiny_data):
    cfg = TrainConfig(stage="2", steps=2, **{k: v for k, v in TINY.items() if k != "vae_steps"})
    s2 = train_stage2(cfg, tiny_data[:2], stage1)
    with pytest.raises(IncompatibleCheckpointError):
        train_stage2(cfg, tiny_data[:2], s2)


def test_checkpoint_roundtrip(stage1, tmp_path):
    stage1.save(tmp_path / "a.zip")
    stage1.save(tmp_path / "b.zip")
    assert (tmp_path / "a.zip").read_bytes() == (tmp_path / "b.zip").read_bytes()
    back = TrainedModel.load(tmp_path / "a.zip")
    for (n, p), (_, q) in zip(stage1.model.state_dict().items(), back.model.state_dict().items()):
        assert torch.equal(p, q), n
    assert back.latent_scale == stage1.latent_scale
    np.testing.assert_array_equal(back.schedule.alpha_bars, stage1.schedule.alpha_bars)


def test_checkpoint_format(tmp_path):
    save_checkpoint(tmp_path / "c.zip", {"w": torch.arange(6.0).reshape(2, 3)}, {"stage": "1"})
    tensors, meta = load_checkpoint(tmp_path / "c.zip")
    import zipfile
    with zipfile.ZipFile(tmp_path / "c.zip") as zf:
        assert sorted(zf.namelist()) == ["meta.json", "w.npy"]
        arr = np.load(zf.open("w.npy"))
    assert arr.dtype == np.dtype("<f4") and meta == {"stage": "1"}
    assert torch.equal(tensors["w"], torch.arange(6.0).reshape(2, 3))


def test_incompatible_embedder_ids(stage1, tmp_path):
    tensors = dict(stage1.model.state_dict())
    meta = dict(stage1.meta, embedder_ids={"text": "clip", "image": "medsam"})
    save_checkpoint(tmp_path / "x.zip", tensors, meta)
    with pytest.raises(IncompatibleCheckpointError, match="embedder"):
        TrainedModel.load(tmp_path / "x.zip")


def test_sampling_image_model_and_null_bundle(stage1, tiny_data):
    b = bundle_from_record(tiny_data[0], 1, video=False)
    x = sample_clip(stage1, b, seed=0)
    assert x.shape == (1, 1, 1, 16, 16)
    y = sample_clip(stage1, b.null_like(), seed=0)
    assert np.isfinite(y).all()
    assert np.array_equal(sample_clip(stage1, b, seed=0), x)


def test_parse_drop():
    assert parse_drop("sketch, flow") == ["sketch", "flow"]
    assert parse_drop("all") == list(CONDITIONS)
    with pytest.raises(ValueError, match="doppler"):
        parse_drop("doppler")


def test_mask_only_forcing():
    rec = phantom_set(1, frames=4, size=16)[0]
    b = force_mask_only(bundle_from_record(rec, 4))
    assert b.present_names() == ["mask"]
    with pytest.raises(ConditionLeakError):
        assert_mask_only(bundle_from_record(rec, 4))


def test_finetune_cmr(stage1):
    cfg = TrainConfig(stage="2", steps=3, **{k: v for k, v in TINY.items() if k != "vae_steps"})
    us = train_stage2(cfg, phantom_set(2, frames=8, size=16), stage1)
    vols = [generate_cmr_volume(8, 16, 16, seed=s) for s in range(5)]
    ft = finetune_cmr(TrainConfig(stage="cmr", steps=40, **{k: v for k, v in TINY.items() if k != "vae_steps"}),
                      vols, us)
    first, last = smoothed_losses(ft.losses, 10)
    assert last < first
    assert ft.meta["stage"] == "cmr" and ft.meta["conditions"] == ["mask"]
    b = force_mask_only(bundle_from_record(vols[0], 8))
    out = sample_clip(ft, b, seed=1)
    assert out.shape == (1,) + vols[0].frames.shape
