import pytest
import torch
from torch.autograd import gradcheck

from lcssl.errors import ConfigError, ShapeError
from lcssl.nn import (Encoder, LocalProjector, ModelConfig, ModelPair, Norm, ema_update,
                      encoder_forward, heads_forward, parameter_groups)

TINY = ModelConfig(in_size=16, stages=((4, 2), (8, 2)), convs_per_stage=1, proj_hidden=8,
                   proj_dim=4, pred_hidden=8, local_mid=6, local_dim=5)


def test_default_geometry():
    cfg = ModelConfig()
    assert cfg.stride == 8 and cfg.grid == 8 and cfg.feature_dim == 128
    pair = ModelPair(cfg, seed=0)
    fmap, pooled = encoder_forward(pair, torch.zeros(2, 3, 64, 64))
    assert fmap.shape == (2, 128, 8, 8) and pooled.shape == (2, 128)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(in_size=60)
    with pytest.raises(ConfigError):
        ModelConfig(norm="layer")
    with pytest.raises(ConfigError):
        ModelConfig(stages=())


def test_input_size_mismatch():
    pair = ModelPair(TINY)
    with pytest.raises(ShapeError):
        encoder_forward(pair, torch.zeros(1, 3, 20, 20))


def test_pooled_is_spatial_mean():
    pair = ModelPair(TINY, seed=1)
    fmap, pooled = encoder_forward(pair, torch.rand(3, 3, 16, 16))
    assert torch.allclose(pooled, fmap.mean(dim=(2, 3)))


def test_zero_final_conv_gives_zero_features():
    cfg = ModelConfig(in_size=16, stages=((4, 2), (8, 2)), convs_per_stage=1, norm="none")
    enc = Encoder(cfg)
    with torch.no_grad():
        enc.final_conv.weight.zero_()
        enc.final_conv.bias.zero_()
    fmap, pooled = enc(torch.rand(2, 3, 16, 16))
    assert torch.count_nonzero(fmap) == 0 and torch.count_nonzero(pooled) == 0


def test_identity_local_projector():
    lp = LocalProjector(5, 5, 5, norm="none")
    with torch.no_grad():
        for conv in (lp.conv1, lp.conv2):
            conv.weight.copy_(torch.eye(5).reshape(5, 5, 1, 1))
            conv.bias.zero_()
    x = torch.rand(2, 5, 3, 3)  # nonnegative, so the ReLU is transparent
    assert torch.equal(lp(x), x)


def test_identical_images_identical_predictions():
    pair = ModelPair(TINY, seed=2).eval()
    x = torch.rand(1, 3, 16, 16).repeat(2, 1, 1, 1)
    q, out = pair.forward_online(x)
    assert torch.equal(q[0], q[1])


def test_target_structure():
    pair = ModelPair(TINY, seed=3)
    assert not hasattr(pair.target, "predictor")
    on = dict(pair.online.named_parameters())
    for name, p in pair.target.named_parameters():
        assert p.shape == on[name].shape and not p.requires_grad
        assert torch.equal(p, on[name])


def test_heads_paths():
    pair = ModelPair(TINY, seed=4)
    fmap, pooled = encoder_forward(pair, torch.rand(2, 3, 16, 16))
    q, local = heads_forward(pair, pooled, fmap, online=True)
    assert q.shape == (2, 4) and local.shape == (2, 5, 4, 4) and q.requires_grad
    g, local_t = heads_forward(pair, pooled.detach(), fmap.detach(), online=False)
    assert not g.requires_grad and not local_t.requires_grad


def test_heads_gradient_finite_differences():
    pair = ModelPair(TINY, seed=5).double()
    pooled = torch.randn(4, 8, dtype=torch.float64, requires_grad=True)
    fmap = torch.randn(4, 8, 4, 4, dtype=torch.float64, requires_grad=True)

    def f(p, m):
        q, local = heads_forward(pair, p, m)
        return q.sum() + (local ** 2).sum()

    assert gradcheck(f, (pooled, fmap), eps=1e-6, atol=1e-7, rtol=1e-6)


@pytest.mark.parametrize("mode", ["batch", "running"])
def test_norm_gradients(mode):
    # frozen statistics keep repeated forwards (as gradcheck does) identical
    norm = Norm(3, mode, track_stats=mode == "batch").double()
    x = torch.randn(5, 3, 2, 2, dtype=torch.float64, requires_grad=True)
    assert gradcheck(lambda t: norm(t), (x,), eps=1e-6, atol=1e-7, rtol=1e-6)


def test_norm_modes():
    x = torch.randn(64, 3, 4, 4) * 3 + 1
    n = Norm(3, "batch").train()
    y = n(x)
    assert torch.allclose(y.mean(dim=(0, 2, 3)), torch.zeros(3), atol=1e-5)
    assert float(n.running_mean.abs().sum()) > 0
    frozen = Norm(3, "batch", track_stats=False).train()
    frozen(x)
    assert torch.equal(frozen.running_mean, torch.zeros(3))
    assert torch.equal(Norm(3, "none")(x), x)
    r = Norm(3, "running", momentum=1.0).train()
    r(x)
    assert torch.allclose(r.running_mean, x.mean(dim=(0, 2, 3)))
    z = r(x.clone().requires_grad_())
    r(x)  # a refresh after the graph was built must not break its backward
    z.sum().backward()


def test_ema_endpoints_and_scalar_example():
    pair = ModelPair(TINY, seed=6)
    with torch.no_grad():
        for p in pair.online.parameters():
            p.add_(1.0)
    before = [t.clone() for t in pair.target.state_dict().values()]
    ema_update(pair, 1.0)
    assert all(torch.equal(a, b) for a, b in zip(before, pair.target.state_dict().values()))
    ema_update(pair, 0.0)
    for k, v in pair.target.state_dict().items():
        assert torch.equal(v, pair.online.state_dict()[k])

    p = ModelPair(TINY, seed=7)
    with torch.no_grad():
        w_t = p.target.projector.fc1.bias
        w_o = p.online.projector.fc1.bias
        w_t.fill_(1.0)
        w_o.fill_(0.0)
    ema_update(p, 0.996)
    assert torch.all(p.target.projector.fc1.bias == torch.tensor(0.996, dtype=torch.float32))


def test_ema_is_bit_exact_affine():
    pair = ModelPair(TINY, seed=8)
    with torch.no_grad():
        for p in pair.online.parameters():
            p.mul_(1.7).add_(0.3)
    m = 0.9937
    t0 = {k: v.clone() for k, v in pair.target.state_dict().items()}
    o = pair.online.state_dict()
    ema_update(pair, m)
    for k, v in pair.target.state_dict().items():
        assert torch.equal(v, m * t0[k] + (1 - m) * o[k])


def test_ema_rejects_bad_momentum():
    with pytest.raises(ConfigError):
        ema_update(ModelPair(TINY), 1.5)


def test_weight_decay_groups():
    groups = parameter_groups(ModelPair(TINY))
    assert groups["decay"] and groups["no_decay"]
    assert all(n.endswith(".bias") or ".norm" in n or "body." in n for n in groups["no_decay"])
    assert all(n.endswith(".weight") for n in groups["decay"])
    for n in groups["decay"]:
        assert not n.startswith("target.")
    pair = ModelPair(TINY)
    norm_ids = {id(p) for m in pair.modules() if isinstance(m, Norm) for p in m.parameters()}
    params = dict(pair.named_parameters())
    assert not any(id(params[n]) in norm_ids for n in groups["decay"])


def test_seeded_init_is_reproducible():
    a = ModelPair(TINY, seed=11).state_dict()
    b = ModelPair(TINY, seed=11).state_dict()
    c = ModelPair(TINY, seed=12).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not all(torch.equal(a[k], c[k]) for k in a)


def test_stride_is_product_of_downsampling():
    assert ModelConfig(stages=((32, 2), (64, 4))).stride == 8
    assert ModelConfig(in_size=96).grid == 12
