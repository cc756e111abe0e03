import numpy as np
import pytest
import torch
import torch.nn.functional as F

from msdsnet.gradcheck import check_parameter_gradients
from msdsnet.losses import LossWeights, composite_loss
from msdsnet.network import (MSDSNet, NetworkConfig, build_pyramid, count_parameters, network_backward,
                             network_forward)

from conftest import random_inputs, tiny_config


def test_default_pyramid_dims():
    cfg = NetworkConfig()
    net = MSDSNet(cfg)
    maps = build_pyramid(net, torch.rand(1, 3, 64, 64))
    assert [m.shape[-1] for m in maps] == [64, 32, 16, 8, 4]
    assert [m.shape[-2] for m in maps] == [64, 32, 16, 8, 4]
    assert [m.shape[1] for m in maps] == list(cfg.channels_per_scale)


def test_single_scale_pyramid():
    cfg = NetworkConfig(num_scales=1, strides=((1, 1),), channels_per_scale=(4,), supervised_scales=(1,),
                        num_keypoints=2, input_h=12, input_w=10)
    net = MSDSNet(cfg)
    (only,) = build_pyramid(net, torch.rand(2, 3, 12, 10))
    assert only.shape == (2, 4, 12, 10)
    assert net(torch.rand(2, 3, 12, 10)).final_heatmap.shape == (2, 2, 12, 10)


def test_batch_dim_preserved():
    net = MSDSNet(NetworkConfig.small(3, num_keypoints=2))
    assert all(m.shape[0] == 2 for m in build_pyramid(net, torch.rand(2, 3, 64, 64)))


def test_full_default_has_nine_supervised_outputs():
    cfg = NetworkConfig(num_stages=3, num_keypoints=4)
    out = MSDSNet(cfg)(torch.rand(1, 3, 64, 64))
    assert sorted(out.ds_outputs) == [(s, m) for s in (1, 2, 3) for m in (1, 2, 3)]
    assert sorted(out.attentions) == sorted(out.ds_outputs)
    for (s, m), z in out.ds_outputs.items():
        assert z.shape == (1, 4, 64 // 2 ** (s - 1), 64 // 2 ** (s - 1))
    assert out.final_heatmap.shape == (1, 4, 64, 64)


def test_no_deep_supervision_emits_nothing():
    net = MSDSNet(tiny_config(variant="no_deep_supervision"))
    out = net(torch.rand(2, 3, 8, 8))
    assert out.ds_outputs == {} and out.attentions == {}
    assert NetworkConfig(variant="no_ds").variant == "no_deep_supervision"


def test_scale_shapes_at_every_stage():
    cfg = NetworkConfig(num_stages=2, channels_per_scale=(4, 4, 4, 4, 4), num_keypoints=2)
    out = MSDSNet(cfg)(torch.rand(1, 3, 64, 64), trace=True)
    for m in (1, 2):
        for key in (("x", m), ("q", m), ("x_next", m)):
            dims = [t.shape[-2:] for t in out.trace[key]]
            assert dims == [(64 // st, 64 // st) for st in (1, 2, 4, 8, 16)]


def _recompose(net, image, interleave=False):
    """Re-run the network one fusion equation at a time from its submodules."""
    cfg = net.cfg
    S = cfg.num_scales
    x0 = [stem(image) for stem in net.stems]
    x = [blk(f) for blk, f in zip(net.entry, x0)]
    dumps = []
    for m in range(cfg.num_stages):
        stage = net.stages[m]
        conv_x = [None] * S
        for s in range(S):
            if s > 0 and cfg.fuse_down:
                d = net.down[m][s - 1]
                x[s] = d.fuse(torch.cat([x[s], d.conv_down(x[s - 1])], dim=1))
            if interleave:
                conv_x[s] = stage[s].conv_x(x[s])
        if not interleave:
            conv_x = [stage[s].conv_x(x[s]) for s in range(S)]
        q = [None] * S
        for s in reversed(range(S)):
            q[s] = conv_x[s]
            if s < S - 1 and cfg.fuse_up:
                u = net.up[m][s]
                up = F.interpolate(q[s + 1], size=q[s].shape[-2:], mode="bilinear", align_corners=True)
                q[s] = u.fuse(torch.cat([q[s], u.conv_up(up)], dim=1))
        for s in range(S):
            if stage[s].has_attention:
                z = stage[s].conv_ds(torch.cat([stage[s].conv_q(q[s]), x0[s]], dim=1))
                x[s] = torch.sigmoid(z.sum(dim=1, keepdim=True)) * q[s]
            else:
                x[s] = q[s]
        dumps.append(list(x))
    return net.head(x[0]), dumps


@pytest.mark.parametrize("variant", ["full", "upscale_only", "downscale_only", "no_deep_supervision"])
@pytest.mark.parametrize("interleave", [False, True])
def test_final_heatmap_matches_recomposition(variant, interleave):
    cfg = tiny_config(variant=variant)
    net = MSDSNet(cfg).double().eval()
    image, _, _ = random_inputs(cfg, seed=4)
    out = net(image, trace=True)
    with torch.no_grad():
        final, dumps = _recompose(net, image, interleave)
    assert torch.equal(out.final_heatmap.detach(), final)
    for m, xs in enumerate(dumps, start=1):
        for a, b in zip(out.trace[("x_next", m)], xs):
            assert torch.equal(a.detach(), b)


def test_eval_forward_is_deterministic():
    cfg = tiny_config()
    net = MSDSNet(cfg).eval()
    image = torch.rand(2, 3, 8, 8)
    a = network_forward(net, image, train_mode=False).final_heatmap
    b = network_forward(net, image, train_mode=False).final_heatmap
    assert torch.equal(a, b)


def _loss(net, cfg, seed=0, alpha=0.1):
    image, label, scaled = random_inputs(cfg, seed=seed)

    def fn():
        out = net(image)
        return composite_loss(out.final_heatmap, label, out.ds_outputs, scaled, LossWeights(alpha)).total
    return fn


def test_network_gradients_spot_check():
    cfg = tiny_config()
    net = MSDSNet(cfg).double().train()
    clean, _ = check_parameter_gradients(net, _loss(net, cfg), num_probes=10, eps=1e-4, seed=3)
    assert len(clean) == 10
    assert max(p.rel_error for p in clean) < 1e-4


def test_zero_loss_gradient_gives_zero_parameter_gradients():
    cfg = tiny_config()
    net = MSDSNet(cfg).double().train()
    out = net(random_inputs(cfg)[0])
    grads = network_backward(net, 0.0 * out.final_heatmap.sum())
    assert all(torch.all(g == 0) for g in grads.values())


def test_backward_needs_graph():
    net = MSDSNet(tiny_config())
    with pytest.raises(RuntimeError):
        network_backward(net, torch.tensor(1.0))


def _small_scale_only(name):
    """Parameters that only exist on scales s >= 2 (or feed them from scale 1)."""
    parts = name.split(".")
    if parts[0] in ("stems", "entry"):
        return int(parts[1]) >= 1
    if parts[0] == "stages":
        return int(parts[2]) >= 1
    return parts[0] == "down"


def _final_grads(cfg, seed=0):
    net = MSDSNet(cfg).double().train()
    image, label, _ = random_inputs(cfg, seed=seed)
    final = F.mse_loss(net(image).final_heatmap, label)
    return network_backward(net, final)


def test_downscale_only_starves_small_scales():
    cfg = tiny_config(variant="downscale_only", deep_supervision=False, num_scales=3,
                      strides=((1, 1), (2, 2), (4, 4)), channels_per_scale=(4, 4, 4), supervised_scales=(1, 2, 3))
    grads = _final_grads(cfg)
    small = [n for n in grads if _small_scale_only(n)]
    assert small
    assert all(torch.all(grads[n] == 0) for n in small)
    full = _final_grads(tiny_config(num_scales=3, strides=((1, 1), (2, 2), (4, 4)), channels_per_scale=(4, 4, 4),
                                    supervised_scales=(1, 2, 3)))
    assert any(torch.any(full[n] != 0) for n in full if _small_scale_only(n))


def test_full_variant_reaches_every_scale():
    cfg = tiny_config(num_scales=3, strides=((1, 1), (2, 2), (4, 4)), channels_per_scale=(4, 4, 4),
                      supervised_scales=(1, 2, 3))
    grads = _final_grads(cfg)
    for s in range(3):
        assert torch.any(grads[f"stems.{s}.0.weight"] != 0)
        assert torch.any(grads[f"stages.0.{s}.conv_x.0.0.weight"] != 0)


def _conv(cin, cout, k):
    return cin * cout * k * k + cout


def _cbr(cin, cout, k=3):
    return _conv(cin, cout, k) + 2 * cout


def expected_count(cfg):
    ch, K, S = cfg.channels_per_scale, cfg.num_keypoints, cfg.num_scales
    total = sum(_cbr(cfg.in_channels, c) + 3 * _cbr(c, c) for c in ch)
    for _m in range(cfg.num_stages):
        for s, c in enumerate(ch, start=1):
            total += 3 * _cbr(c, c)
            if cfg.supervised and s in cfg.supervised_scales:
                total += _cbr(c, c) + _cbr(2 * c, c) + _conv(c, K, 1)
        if cfg.fuse_down:
            total += sum(_cbr(ch[s - 1], ch[s]) + _conv(2 * ch[s], ch[s], 1) for s in range(1, S))
        if cfg.fuse_up:
            total += sum(_conv(ch[s + 1], ch[s], 1) + _conv(2 * ch[s], ch[s], 1) for s in range(S - 1))
    return total + _conv(ch[0], K, 1)


@pytest.mark.parametrize("variant", ["full", "upscale_only", "downscale_only", "no_deep_supervision"])
@pytest.mark.parametrize("stages", [1, 3, 6])
def test_parameter_count_matches_enumeration(variant, stages):
    cfg = NetworkConfig(num_stages=stages, variant=variant, num_keypoints=21)
    assert count_parameters(cfg) == expected_count(cfg)


def test_parameter_count_scaling():
    base = NetworkConfig(num_keypoints=21)
    double = NetworkConfig(num_keypoints=21, channels_per_scale=tuple(2 * c for c in base.channels_per_scale))
    ratio = count_parameters(double) / count_parameters(base)
    assert 3.5 < ratio < 4.0
    assert count_parameters(NetworkConfig(num_stages=6)) > count_parameters(NetworkConfig(num_stages=3))
    assert count_parameters(double) == expected_count(double)


@pytest.mark.parametrize("bad", [
    dict(num_stages=0), dict(num_scales=0), dict(num_keypoints=0), dict(input_h=60),
    dict(supervised_scales=(1, 6)), dict(variant="sideways"), dict(strides=((1, 1), (2, 2), (3, 3), (8, 8), (16, 16))),
    dict(channels_per_scale=(16, 32)),
])
def test_invalid_configs_rejected(bad):
    with pytest.raises(ValueError):
        NetworkConfig(**bad)


def test_variant_parameter_containment():
    names = {v: {n for n, _ in MSDSNet(tiny_config(variant=v)).named_parameters()}
             for v in ("full", "upscale_only", "downscale_only", "no_deep_supervision")}
    assert names["upscale_only"] <= names["full"]
    assert names["downscale_only"] <= names["full"]
    assert names["no_deep_supervision"] <= names["full"]
    diff = names["upscale_only"] ^ names["downscale_only"]
    assert diff and all(n.startswith(("up.", "down.")) for n in diff)
    ds = names["full"] - names["no_deep_supervision"]
    assert ds and all(".conv_q." in n or ".conv_ds." in n for n in ds)


def test_wrong_image_shape_rejected():
    net = MSDSNet(tiny_config())
    with pytest.raises(ValueError, match="expects 8x8"):
        net(torch.rand(1, 3, 16, 16))
    with pytest.raises(ValueError):
        net(torch.rand(1, 1, 8, 8))


def test_config_dict_roundtrip():
    cfg = NetworkConfig.small(3, num_keypoints=5, variant="upscale_only")
    assert NetworkConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="unknown"):
        NetworkConfig.from_dict({**cfg.to_dict(), "bogus": 1})
