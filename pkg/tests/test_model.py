import numpy as np
import pytest
import torch

from clawunet import substrate as S
from clawunet.model import (AttentionGate, ClawUNet, ConfigError, DecoderStage, ModelConfig, ResidualBlock,
                            count_parameters, forward, init_params, predict_mask)
from clawunet.training import VARIANTS, variant_config

import oracles as O


def t64(a):
    return torch.from_numpy(np.asarray(a, dtype=np.float64))


# ---------------------------------------------------------------------------
# config and init


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(input_size=100)
    with pytest.raises(ConfigError):
        ModelConfig(depth=0)
    with pytest.raises(ConfigError):
        ModelConfig(channels=(64, 64, 128))
    with pytest.raises(ConfigError):
        ModelConfig(shortcut_mode="bogus")
    assert ModelConfig().blocks == (3, 4, 6, 3)


def test_config_text_round_trip():
    cfg = ModelConfig.toy(enable_attention=False, threshold=0.25, seed=9)
    assert ModelConfig.from_text(cfg.to_text()) == cfg
    with pytest.raises(ValueError):
        ModelConfig.from_text("depth=2\nunknown_key=1\n")


def test_init_same_seed_bitwise():
    a, b = init_params(ModelConfig.toy(seed=3)), init_params(ModelConfig.toy(seed=3))
    for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert na == nb and torch.equal(pa, pb)
    c = init_params(ModelConfig.toy(seed=4))
    assert not torch.equal(a.stem.weight, c.stem.weight)


def test_init_conventions():
    m = init_params(ModelConfig.toy())
    assert torch.all(m.stem_bn.weight == 1) and torch.all(m.stem_bn.bias == 0)
    gate = m.decoder[0].gate
    assert torch.all(gate.w_g.bias == 0) and torch.all(gate.psi.bias == 0)
    bound = np.sqrt(2.0) * np.sqrt(3.0 / (3 * 49))
    assert m.stem.weight.abs().max().item() <= bound


def test_toy_parameter_count_by_hand():
    # channels (8, 8, 16), one block per stage, every mechanism on
    stem = 8 * 3 * 7 * 7 + 2 * 8
    stage1 = 2 * (8 * 8 * 9 + 2 * 8)
    stage2 = (16 * 8 * 9 + 2 * 16) + (16 * 16 * 9 + 2 * 16)
    branch = 2 * (16 * 8 * 9 + 2 * 8)
    f = 4  # gate bottleneck: half of the 8 skip channels
    gate0 = (8 * f + f) + 8 * f + 8 * f + (f + 1)
    gate1 = (16 * f + f) + 8 * f + 8 * f + (f + 1)
    fuse = 3 * 8 * 8 * 9 + 2 * 8
    dec0 = (8 * 8 * 9 + 2 * 8) + gate0 + fuse
    dec1 = (16 * 8 * 9 + 2 * 8) + gate1 + fuse
    head = (8 * 4 * 2 * 2 + 4) + (4 + 1)
    expected = stem + stage1 + stage2 + branch + dec0 + dec1 + head
    assert expected == 13859
    assert count_parameters(init_params(ModelConfig.toy())) == expected


def test_default_parameter_census():
    m = ClawUNet(ModelConfig())
    shapes = {n: tuple(p.shape) for n, p in m.named_parameters()}
    assert shapes["stem.weight"] == (64, 3, 7, 7)
    assert [len(s) for s in m.stages] == [3, 4, 6, 3]
    assert shapes["stages.0.0.conv1.weight"] == (64, 64, 3, 3)
    assert shapes["stages.1.0.conv1.weight"] == (128, 64, 3, 3)
    assert shapes["stages.3.2.conv2.weight"] == (512, 512, 3, 3)
    for i, c in enumerate((64, 64, 128, 256)):
        assert shapes[f"branch.{i}.conv.weight"] == (c, 512, 3, 3)
        assert shapes[f"decoder.{i}.fuse.conv.weight"] == (c, 3 * c, 3, 3)
        assert shapes[f"decoder.{i}.gate.psi.weight"] == (1, c // 2, 1, 1)
    assert shapes["head_deconv.weight"] == (64, 32, 2, 2)
    assert shapes["head_conv.weight"] == (1, 32, 1, 1)
    # regression value for this implementation's schedule
    assert count_parameters(m) == 27_678_341


# ---------------------------------------------------------------------------
# residual block


def _zero(module):
    with torch.no_grad():
        for n, p in module.named_parameters():
            if n.endswith("weight") and p.dim() == 4:
                p.zero_()


def test_residual_dead_path_is_relu():
    blk = ResidualBlock(3, 3).double()
    _zero(blk)
    x = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    for mode in (True, False):
        blk.train(mode)
        assert torch.equal(blk(x), torch.relu(x))


def test_residual_zero_pad_channels():
    blk = ResidualBlock(2, 4, stride=2).double()
    _zero(blk)
    x = torch.randn(1, 2, 6, 6, dtype=torch.float64)
    out = blk(x)
    assert out.shape == (1, 4, 3, 3)
    assert torch.all(out[:, 2:] == 0)
    assert torch.equal(out[:, :2], torch.relu(x[:, :, ::2, ::2]))


def test_residual_composed_oracle():
    rng = np.random.default_rng(0)
    for stride, (ci, co) in ((1, (2, 2)), (2, (2, 3))):
        blk = ResidualBlock(ci, co, stride).double().train()
        x = rng.normal(size=(2, ci, 6, 6))
        with torch.no_grad():
            for bn in (blk.bn1, blk.bn2):
                bn.weight.copy_(t64(rng.uniform(0.5, 1.5, co)))
                bn.bias.copy_(t64(rng.normal(size=co)))
            got = blk(t64(x)).numpy()
        p = {n: v.detach().numpy() for n, v in blk.named_parameters()}
        h = O.relu(O.batchnorm_train(O.conv2d(x, p["conv1.weight"], stride=stride, padding=1),
                                     p["bn1.weight"], p["bn1.bias"]))
        h = O.batchnorm_train(O.conv2d(h, p["conv2.weight"], padding=1), p["bn2.weight"], p["bn2.bias"])
        sc = x[:, :, ::stride, ::stride]
        sc = np.concatenate([sc, np.zeros((2, co - ci) + sc.shape[2:])], axis=1)
        np.testing.assert_allclose(got, O.relu(h + sc), rtol=1e-9, atol=1e-12)


def test_projection_shortcut():
    blk = ResidualBlock(2, 4, stride=2, shortcut_mode="projection")
    assert blk.projection is not None
    assert blk(torch.randn(2, 2, 8, 8)).shape == (2, 4, 4, 4)
    assert count_parameters(ClawUNet(ModelConfig.toy(shortcut_mode="projection"))) > \
        count_parameters(ClawUNet(ModelConfig.toy()))


def test_residual_rejects_bad_stride():
    with pytest.raises(ConfigError):
        ResidualBlock(2, 2, stride=3)


# ---------------------------------------------------------------------------
# encoder, branch, decoder


def test_encode_toy_extents():
    cfg = ModelConfig(input_size=64, depth=2, channels=(8, 8, 16), blocks=(1, 1))
    m = ClawUNet(cfg)
    with torch.no_grad():
        enc = m.encode(torch.rand(1, 3, 64, 64))
    assert [e.shape[2] for e in enc.maps] == [32, 16, 8]
    assert [e.shape[1] for e in enc.maps] == [8, 8, 16]
    assert enc.bottom is enc.maps[-1]
    with torch.no_grad():
        plain = ClawUNet(cfg.replace(enable_residual=False)).encode(torch.rand(1, 3, 64, 64))
    assert [e.shape for e in plain.maps] == [e.shape for e in enc.maps]


def test_pool_everywhere_preserves_shapes():
    m = ClawUNet(ModelConfig.toy(pool_everywhere=True))
    with torch.no_grad():
        enc = m.encode(torch.rand(1, 3, 32, 32))
    assert [e.shape[2] for e in enc.maps] == [16, 8, 4]


def test_encode_rejects_wrong_extent():
    with pytest.raises(S.ShapeError, match="expected input"):
        ClawUNet(ModelConfig.toy()).encode(torch.rand(1, 3, 64, 64))


def test_bottom_branch_toy_extents():
    m = ClawUNet(ModelConfig.toy())
    with torch.no_grad():
        b = m.bottom_branch(torch.rand(1, 16, 4, 4))
    assert len(b) == 2
    assert [tuple(t.shape) for t in b] == [(1, 8, 16, 16), (1, 8, 8, 8)]


def test_bottom_branch_constant_stays_constant():
    m = ClawUNet(ModelConfig.toy()).double().eval()
    with torch.no_grad():
        for i, stage in enumerate(m.branch):
            stage.conv.weight.zero_()
            for c in range(8):
                stage.conv.weight[c, c, 1, 1] = 1.0
        b = m.bottom_branch(torch.full((1, 16, 4, 4), 0.75, dtype=torch.float64))
    for t in b:
        assert torch.allclose(t, torch.full_like(t, 0.75 / np.sqrt(1 + 1e-5)), rtol=0, atol=1e-15)


def test_decoder_stage_default_level3_shape():
    st = DecoderStage(512, 256, attention=True, bottom=True).eval()
    with torch.no_grad():
        out = st(torch.rand(1, 512, 16, 16), torch.rand(1, 256, 32, 32), torch.rand(1, 256, 32, 32))
    assert out.shape == (1, 256, 32, 32)


def test_decoder_stage_degenerates_to_skip_concat():
    st = DecoderStage(16, 8, attention=False, bottom=False)
    assert st.gate is None and st.fuse.conv.weight.shape[1] == 16
    with torch.no_grad():
        assert st(torch.rand(1, 16, 4, 4), torch.rand(1, 8, 8, 8)).shape == (1, 8, 8, 8)


def test_decoder_stage_shape_errors():
    st = DecoderStage(16, 8, attention=True, bottom=True)
    with pytest.raises(S.ShapeError):
        st(torch.rand(1, 16, 4, 4), torch.rand(1, 8, 10, 10), torch.rand(1, 8, 10, 10))
    with pytest.raises(S.ShapeError):
        st(torch.rand(1, 16, 4, 4), torch.rand(1, 8, 8, 8), None)


def test_toy_decoder_extents_match_encoder():
    m = ClawUNet(ModelConfig.toy()).eval()
    with torch.no_grad():
        enc = m.encode(torch.rand(1, 3, 32, 32))
        d = m.decode(enc, m.bottom_branch(enc.bottom))
    assert d[-1] is enc.bottom
    for di, ei in zip(d, enc.maps):
        assert di.shape == ei.shape


# ---------------------------------------------------------------------------
# attention gate


def _random_gate(rng, cg, cx, cy):
    gate = AttentionGate(cg, cx, cy).double()
    with torch.no_grad():
        for p in gate.parameters():
            p.copy_(t64(rng.normal(size=tuple(p.shape))))
    return gate


def _gate_oracle(gate, g, x, y):
    f = gate.inter_channels
    return O.attention_alpha(
        g[0], x[0], y[0],
        gate.w_g.weight.detach().numpy().reshape(f, -1), gate.w_g.bias.detach().numpy(),
        gate.w_x.weight.detach().numpy().reshape(f, -1), gate.w_y.weight.detach().numpy().reshape(f, -1),
        gate.psi.weight.detach().numpy().reshape(-1), gate.psi.bias.item())


def test_gate_matches_scalar_oracle_500_seeds():
    worst = 0.0
    for seed in range(500):
        rng = np.random.default_rng(seed)
        cg, cx, cy = rng.integers(1, 4, size=3)
        h, w = rng.integers(1, 5, size=2)
        gate = _random_gate(rng, cg, cx, cy)
        g, x, y = (rng.normal(size=(1, c, h, w)) for c in (cg, cx, cy))
        with torch.no_grad():
            gx, gy, alpha = gate(t64(g), t64(x), t64(y))
        ref = _gate_oracle(gate, g, x, y)
        rel = np.max(np.abs(alpha[0, 0].numpy() - ref) / np.abs(ref))
        worst = max(worst, rel)
        np.testing.assert_allclose(gx.numpy(), ref[None, None] * x, rtol=1e-6)
        np.testing.assert_allclose(gy.numpy(), ref[None, None] * y, rtol=1e-6)
    assert worst < 1e-6


def test_gate_two_by_two_single_channel():
    rng = np.random.default_rng(11)
    gate = _random_gate(rng, 1, 1, 1)
    g, x, y = (rng.normal(size=(1, 1, 2, 2)) for _ in range(3))
    with torch.no_grad():
        alpha = gate(t64(g), t64(x), t64(y))[2]
    np.testing.assert_allclose(alpha[0, 0].numpy(), _gate_oracle(gate, g, x, y), rtol=1e-12)


def test_gate_resamples_coarse_signal():
    rng = np.random.default_rng(2)
    gate = _random_gate(rng, 3, 2, 2)
    g = t64(rng.normal(size=(1, 3, 2, 2)))
    x, y = t64(rng.normal(size=(1, 2, 4, 4))), t64(rng.normal(size=(1, 2, 4, 4)))
    with torch.no_grad():
        assert torch.equal(gate(g, x, y)[2], gate(S.upsample2x(g), x, y)[2])


def test_gate_zero_params_give_half():
    gate = AttentionGate(4, 3, 3).double()
    with torch.no_grad():
        for p in gate.parameters():
            p.zero_()
    x, y = torch.randn(1, 3, 4, 4, dtype=torch.float64), torch.randn(1, 3, 4, 4, dtype=torch.float64)
    gx, gy, alpha = gate(torch.randn(1, 4, 2, 2, dtype=torch.float64), x, y)
    assert torch.all(alpha == 0.5)
    assert torch.equal(gx, 0.5 * x) and torch.equal(gy, 0.5 * y)


def test_gate_saturated_bias():
    gate = AttentionGate(2, 2, 2).double()
    with torch.no_grad():
        for p in gate.parameters():
            p.zero_()
        gate.psi.bias.fill_(20.0)
    x = torch.randn(1, 2, 3, 3, dtype=torch.float64)
    gx, _, alpha = gate(torch.randn(1, 2, 3, 3, dtype=torch.float64), x, x.clone())
    assert torch.all(1 - alpha < 1e-8)
    assert torch.max(torch.abs(gx - x)).item() < 1e-8


def test_gate_bottleneck_width():
    assert AttentionGate(16, 8, 8).inter_channels == 4
    assert AttentionGate(4, 1, 1).inter_channels == 1


def test_gate_extent_mismatch():
    gate = AttentionGate(2, 2, 2)
    with pytest.raises(S.ShapeError):
        gate(torch.rand(1, 2, 2, 2), torch.rand(1, 2, 4, 4), torch.rand(1, 2, 3, 3))


def test_alpha_maps_open_interval_and_zero_gates():
    m = ClawUNet(ModelConfig.toy()).double().eval()
    x = torch.rand(2, 3, 32, 32, dtype=torch.float64)
    with torch.no_grad():
        maps = m.attention_maps(x)
        assert len(maps) == 2
        assert all(torch.all((a > 0) & (a < 1)) for a in maps)
        for st in m.decoder:
            for p in st.gate.parameters():
                p.zero_()
        assert all(torch.all(a == 0.5) for a in m.attention_maps(x))
    assert ClawUNet(ModelConfig.toy(enable_attention=False)).attention_maps(torch.rand(1, 3, 32, 32)) == [None, None]


# ---------------------------------------------------------------------------
# forward and head


def test_forward_toy_shape_and_range():
    m = ClawUNet(ModelConfig.toy())
    out = forward(torch.rand(2, 3, 32, 32), m, "eval")
    assert out.shape == (2, 1, 32, 32)
    assert torch.all(torch.isfinite(out)) and torch.all((out > 0) & (out < 1))
    with pytest.raises(ValueError):
        forward(torch.rand(1, 3, 32, 32), m, "test")


def test_zero_head_gives_half():
    m = ClawUNet(ModelConfig.toy())
    with torch.no_grad():
        m.head_conv.weight.zero_()
    out = forward(torch.rand(1, 3, 32, 32), m, "eval")
    assert torch.all(out == 0.5)


def test_ablation_degeneracy_matches_unet_variant():
    base = ModelConfig.toy(seed=5)
    manual = ClawUNet(base.replace(enable_attention=False, enable_bottom_branch=False, enable_residual=False))
    unet = ClawUNet(variant_config("unet", base))
    x = torch.rand(2, 3, 32, 32, generator=torch.Generator().manual_seed(0))
    assert torch.equal(forward(x, manual), forward(x, unet))


def test_variant_toggles():
    base = ModelConfig.toy()
    assert set(VARIANTS) == {"unet", "claw", "claw_res", "claw_res_att"}
    full = variant_config("claw_res_att", base)
    assert full.enable_attention and full.enable_residual and full.enable_bottom_branch
    claw = variant_config("claw", base)
    assert claw.enable_bottom_branch and not claw.enable_residual and not claw.enable_attention
    with pytest.raises(ConfigError):
        variant_config("resunet", base)


def test_every_parameter_receives_gradient():
    m = ClawUNet(ModelConfig.toy()).train()
    gen = torch.Generator().manual_seed(0)
    x = torch.rand(2, 3, 32, 32, generator=gen)
    y = (torch.rand(2, 1, 32, 32, generator=gen) < 0.3).float()
    grads = S.compute_gradients(m, lambda mod: S.bce_loss(mod(x), y))
    dead = [n for n, g in grads.items() if torch.count_nonzero(g) == 0]
    assert dead == []


def test_predict_mask_conventions():
    assert predict_mask(torch.full((1, 1, 2, 2), 0.5), 0.5).all()
    assert predict_mask(np.array([[[[0.2, 0.8]]]]), 0.5).tolist() == [[[False, True]]]
    binary = (np.random.default_rng(0).uniform(size=(2, 1, 4, 4)) > 0.5).astype(float)
    assert np.array_equal(predict_mask(binary, 0.5), binary[:, 0] == 1)
    assert predict_mask(torch.rand(3, 1, 4, 4), 0.5).shape == (3, 4, 4)
