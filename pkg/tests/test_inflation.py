import pytest
import torch

from pulsediff.conditions import ConditionBundle
from pulsediff.inflation import MissingParameterError, forward3d, inflate, inflate_model
from pulsediff.model import ConditionedDenoiser
from pulsediff.unet import ContextPack, forward2d

from conftest import tiny_config


def _randomize(model):
    with torch.no_grad():
        for p in model.parameters():
            p.normal_(0, 0.2)
    return model


def test_inflated_forward_matches_per_frame_2d():
    cfg = tiny_config()
    m2 = _randomize(ConditionedDenoiser(cfg)).eval()
    m3, _ = inflate_model(m2, num_frames=4)
    m3.eval()
    c_in = cfg.latent_channels + cfg.cond_channels
    z = torch.randn(2, 4, c_in, 4, 4)
    t = torch.tensor([7, 300])
    ctx = ContextPack(torch.randn(8, cfg.text_tokens, cfg.context_dim), torch.randn(8, 4, cfg.context_dim))
    a = forward3d(z, t, ctx, m3.unet)
    b = forward2d(z.reshape(8, c_in, 4, 4), t.repeat_interleave(4), ctx, m2.unet).reshape(a.shape)
    assert (a - b).abs().max() < 1e-5


def test_inflation_report_and_count():
    cfg = tiny_config()
    m2 = ConditionedDenoiser(cfg)
    m3, report = inflate(m2.state_dict(), cfg, num_frames=8)
    n2 = sum(p.numel() for p in m2.parameters())
    n3 = sum(p.numel() for p in m3.parameters())
    # temporal block at each attention site: LayerNorm 2d, qkv 3d^2, out d^2 + d, bias heads*(2F-1)
    d, heads, f = cfg.base_channels * 2, cfg.heads, 8
    sites = 4   # one down block, the middle block, two up blocks at the attention level
    temporal = sites * (2 * d + 3 * d * d + d * d + d + heads * (2 * f - 1))
    h, c = cfg.encoder_hidden, cfg.cond_channels
    flow = (2 * (h // 2) * 9 + h // 2) + ((h // 2) * h * 9 + h) + (h * h * 9 + h) + (h * c * 9 + c)
    assert n3 == n2 + temporal + flow
    assert len(report.mapped) == len(list(m2.parameters()))
    assert all(".temporal." in n for n in report.new_temporal)
    assert all(n.startswith("cond.flow_encoder.") for n in report.new_flow)


def test_kernels_gain_singleton_time_axis():
    cfg = tiny_config()
    m2 = _randomize(ConditionedDenoiser(cfg))
    m3, _ = inflate(m2.state_dict(), cfg, num_frames=4)
    w2 = m2.unet.conv_in.weight
    w3 = m3.unet.conv_in.weight
    assert w3.shape == (w2.shape[0], w2.shape[1], 1, *w2.shape[2:])
    assert torch.equal(w3[:, :, 0], w2)


def test_missing_parameter_named():
    cfg = tiny_config()
    state = ConditionedDenoiser(cfg).state_dict()
    del state["unet.conv_in.weight"]
    with pytest.raises(MissingParameterError, match="unet.conv_in.weight"):
        inflate(state, cfg)


def test_identity_holds_with_conditions():
    cfg = tiny_config()
    m2 = _randomize(ConditionedDenoiser(cfg)).eval()
    m3, _ = inflate_model(m2, num_frames=4)
    m3.eval()
    torch.manual_seed(1)
    bundle = ConditionBundle(sketch=torch.rand(1, 1, 16, 16), mask=torch.randint(0, 4, (1, 4, 1, 16, 16)),
                             mv_skeleton=torch.rand(1, 4, 2, 16, 16), flow=torch.randn(1, 3, 2, 16, 16),
                             text=["An ECHO with 2-chamber view."], image_prior=torch.rand(1, 1, 16, 16))
    z = torch.randn(1, 4, 4, 4, 4)
    t = torch.tensor([50])
    a = m3(z, t, bundle)
    b = m2(z, t, bundle.with_absent(["flow"]))
    assert (a - b).abs().max() < 1e-5
