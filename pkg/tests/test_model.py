import math

import numpy as np
import pytest
import torch
from torch import nn

from nightadapt.errors import ConfigError, ShapeError
from nightadapt.model import (
    Backbone, BackboneConfig, BridgingLayer, Discriminator, ModelConfig, Modulation, MultiHeadSelfAttention,
    SiameseNet, TrackerHead, attention, build_discriminator, cross_correlate, decode_boxes, extract_features,
    gradient_reverse, score_map_points, sinusoidal_position_encoding,
)

from oracles import central_difference_grad, naive_xcorr

SMALL = ModelConfig(backbone=BackboneConfig(channels=(8, 8, 8, 8), strides=(2, 2, 1, 1), used_blocks=2),
                    bridge_ffn_hidden=16, head_channels=8, template_size=32, search_size=64,
                    disc_embed=16, disc_ffn_hidden=32)


# -- backbone ---------------------------------------------------------------------

def test_backbone_channel_counts():
    assert BackboneConfig(channels=(8, 16, 32, 64), used_blocks=1).out_channels == 64
    assert BackboneConfig(channels=(16, 32, 64, 128), used_blocks=2).out_channels == 192
    net = Backbone(BackboneConfig(channels=(4, 8, 64, 128), strides=(2, 2, 1, 1), used_blocks=2))
    assert net(torch.rand(1, 3, 32, 32)).shape == (1, 192, 8, 8)


def test_backbone_config_validation():
    with pytest.raises(ConfigError):
        BackboneConfig(channels=(8, 8), strides=(2, 2, 1, 1))
    with pytest.raises(ConfigError):
        BackboneConfig(used_blocks=5)
    with pytest.raises(ConfigError):
        BackboneConfig(strides=(2, 2, 1, 2), used_blocks=2)


def test_paper_patch_sizes_fit_the_stride_plan():
    bb = Backbone(BackboneConfig(channels=(4, 4, 4, 4)))
    assert bb(torch.rand(1, 3, 127, 127)).shape[-1] == 32
    assert bb(torch.rand(1, 3, 255, 255)).shape[-1] == 64


def test_backbone_rejects_incompatible_size():
    with pytest.raises(ShapeError):
        Backbone(SMALL.backbone)(torch.rand(1, 3, 3, 30))


def test_siamese_branches_share_weights():
    torch.manual_seed(0)
    net = SiameseNet(SMALL)
    patch = torch.rand(1, 3, 64, 64) * 255
    a = net.bridged(net.features(patch))
    b = net.bridged(net.features(patch.clone()))
    assert torch.equal(a, b)
    _, _, z, x = net(patch, patch)
    assert torch.equal(z, x)


# -- attention ----------------------------------------------------------------------

def test_attention_single_token():
    v = torch.tensor([[3.0, -1.0]])
    out = attention(torch.rand(1, 2), torch.rand(1, 2), v)
    assert torch.allclose(out, v)


def test_attention_identical_values():
    q = torch.tensor([[1.0, 0.0]])
    k = torch.tensor([[0.0, 1.0], [0.0, -1.0]])
    v = torch.tensor([[2.0, 5.0], [2.0, 5.0]])
    assert torch.allclose(attention(q, k, v), v[:1])


def test_attention_hand_example():
    out, w = attention(torch.tensor([[1.0]], dtype=torch.float64), torch.tensor([[1.0], [0.0]], dtype=torch.float64),
                       torch.tensor([[2.0], [4.0]], dtype=torch.float64), return_weights=True)
    e = math.e / (math.e + 1)
    assert w[0].tolist() == pytest.approx([e, 1 - e], abs=1e-12)
    assert out.item() == pytest.approx(2 * e + 4 * (1 - e), abs=1e-12)
    assert out.item() == pytest.approx(2.5379, abs=1e-4)


def test_attention_shape_errors():
    with pytest.raises(ShapeError):
        attention(torch.rand(2, 3), torch.rand(2, 4), torch.rand(2, 4))
    with pytest.raises(ShapeError):
        attention(torch.rand(2, 3), torch.rand(2, 3), torch.rand(3, 3))


def test_attention_weights_row_normalized():
    torch.manual_seed(1)
    msa = MultiHeadSelfAttention(8, 2)
    msa(torch.randn(3, 10, 8))
    w = msa.last_weights
    assert (w >= 0).all()
    assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-6)


# -- bridging layer -------------------------------------------------------------------

def test_position_encoding_shape_and_range():
    p = sinusoidal_position_encoding(8, 5, 7)
    assert p.shape == (8, 5, 7)
    assert p.abs().max() <= 1.0
    with pytest.raises(ShapeError):
        sinusoidal_position_encoding(6, 2, 2)


@pytest.mark.parametrize("seed", range(20))
def test_bridge_preserves_shape(seed):
    g = np.random.default_rng(seed)
    heads = int(g.choice([1, 2, 4]))
    dim = 4 * heads * int(g.integers(1, 4))
    b, h, w = (int(v) for v in g.integers(1, 6, 3))
    layer = BridgingLayer(dim, heads, int(g.integers(4, 32)))
    out = layer(torch.randn(b, dim, h, w))
    assert out.shape == (b, dim, h, w)
    assert torch.isfinite(out).all()


def test_bridge_residual_identity_when_zeroed():
    layer = BridgingLayer(8, 2, 16)
    for p in list(layer.msa.parameters()) + list(layer.ffn.parameters()) + list(layer.mod.parameters()):
        nn.init.zeros_(p)
    layer.bypass_norm = True
    x = torch.randn(2, 8, 3, 4)
    expected = x + sinusoidal_position_encoding(8, 3, 4)
    assert torch.allclose(layer(x), expected, atol=1e-6)


def test_bridge_rejects_wrong_channels():
    with pytest.raises(ShapeError):
        BridgingLayer(8, 2)(torch.randn(1, 4, 3, 3))


def test_modulation_zero_is_identity():
    m = Modulation(4)
    nn.init.zeros_(m.proj.weight)
    nn.init.zeros_(m.proj.bias)
    x = torch.randn(3, 4)
    assert torch.equal(m(x), x)


def _fd_check_bridge(seed, tol):
    torch.manual_seed(seed)
    layer = BridgingLayer(4, 2, 8).double()
    weights = torch.randn(1, 4, 3, 3, dtype=torch.float64)
    x = torch.randn(1, 4, 3, 3, dtype=torch.float64, requires_grad=True)
    (layer(x) * weights).sum().backward()
    f = lambda arr: float((layer(torch.from_numpy(arr)) * weights).sum().detach())
    num = central_difference_grad(f, x.detach().numpy())
    ana = x.grad.numpy()
    return np.linalg.norm(ana - num) / np.linalg.norm(num)


def test_bridge_gradient_matches_finite_differences():
    for seed in range(3):
        assert _fd_check_bridge(seed, 1e-4) < 1e-4


# -- gradient reversal ----------------------------------------------------------------

def test_grl_forward_identity_and_sign():
    x = torch.tensor(3.0, requires_grad=True)
    y = gradient_reverse(x)
    assert y.item() == 3.0
    (y ** 2).backward()
    assert x.grad.item() == -6.0
    x2 = torch.tensor(3.0, requires_grad=True)
    (gradient_reverse(x2, 0.25) ** 2).backward()
    assert x2.grad.item() == -1.5


class _ToyNet(nn.Module):
    def __init__(self, reverse: bool):
        super().__init__()
        self.reverse = reverse
        self.l1, self.l2, self.l3 = nn.Linear(5, 7), nn.Linear(7, 6), nn.Linear(6, 1)

    def forward(self, x):
        h = torch.tanh(self.l1(x))
        if self.reverse:
            h = gradient_reverse(h)
        return self.l3(torch.tanh(self.l2(h))).sum()


def test_grl_gradient_against_finite_differences():
    torch.manual_seed(0)
    net = _ToyNet(True).double()
    ident = _ToyNet(False).double()
    ident.load_state_dict(net.state_dict())
    g = np.random.default_rng(0)
    for _ in range(10):
        x = torch.from_numpy(g.normal(size=5)).requires_grad_(True)
        net(x).backward()
        num = central_difference_grad(lambda a: float(ident(torch.from_numpy(a)).detach()), x.detach().numpy())
        assert np.linalg.norm(x.grad.numpy() + num) / np.linalg.norm(num) < 1e-5


# -- discriminator ---------------------------------------------------------------------

def test_discriminator_tokens_and_softmax():
    torch.manual_seed(0)
    d = Discriminator(64, embed=16, heads=2, ffn_hidden=32)
    feat = torch.randn(2, 64, 16, 16)
    assert d.tokens(feat).shape == (2, 17, 16)
    soft = torch.softmax(feat, dim=1)
    assert torch.allclose(soft.sum(1), torch.ones(2, 16, 16), atol=1e-6)
    assert d(feat).shape == (2,)


def test_discriminator_shift_invariance():
    torch.manual_seed(0)
    d = Discriminator(8, embed=16, heads=2, ffn_hidden=32)
    feat = torch.randn(3, 8, 8, 8)
    shift = torch.randn(3, 1, 8, 8)
    assert torch.allclose(d(feat), d(feat + shift), atol=1e-5)


def test_discriminator_rejects_bad_size():
    with pytest.raises(ShapeError):
        Discriminator(8, embed=16, heads=2)(torch.randn(1, 8, 6, 8))


def test_discriminator_grl_flips_feature_gradient():
    torch.manual_seed(0)
    d = Discriminator(8, embed=16, heads=2, ffn_hidden=32)
    feat = torch.randn(2, 8, 4, 4, requires_grad=True)
    d.reverse_gradient = True
    d(feat).sum().backward()
    g_rev = feat.grad.clone()
    feat.grad = None
    d.reverse_gradient = False
    d(feat).sum().backward()
    assert torch.allclose(g_rev, -d.grl_coeff * feat.grad, atol=1e-7)


# -- correlation and head ------------------------------------------------------------

def test_xcorr_equal_sizes_is_inner_product():
    z = torch.randn(1, 3, 4, 4, dtype=torch.float64)
    out = cross_correlate(z, z)
    assert out.shape == (1, 3, 1, 1)
    assert torch.allclose(out.flatten(), (z * z).sum(dim=(2, 3)).flatten())


def test_xcorr_peak_at_offset():
    z = torch.rand(1, 2, 3, 3) + 0.5
    x = torch.zeros(1, 2, 9, 9)
    x[..., 4:7, 2:5] = z
    out = cross_correlate(z, x)
    for c in range(2):
        idx = int(out[0, c].argmax())
        assert divmod(idx, out.shape[-1]) == (4, 2)


def test_xcorr_matches_naive_loop(rng):
    for _ in range(10):
        z = rng.normal(size=(2, 3, 3))
        x = rng.normal(size=(2, 5, 5))
        got = cross_correlate(torch.from_numpy(z)[None], torch.from_numpy(x)[None])[0].numpy()
        np.testing.assert_allclose(got, naive_xcorr(z, x), rtol=0, atol=1e-12)


def test_xcorr_shape_errors():
    with pytest.raises(ShapeError):
        cross_correlate(torch.randn(1, 2, 6, 6), torch.randn(1, 2, 5, 5))
    with pytest.raises(ShapeError):
        cross_correlate(torch.randn(1, 3, 2, 2), torch.randn(1, 2, 5, 5))


def test_head_shapes_and_positive_offsets():
    torch.manual_seed(0)
    head = TrackerHead(6, 8, 4)
    cls, reg = head(torch.randn(2, 6, 9, 9) * 50)
    assert cls.shape == (2, 1, 9, 9) and reg.shape == (2, 4, 9, 9)
    assert (reg > 0).all()


def test_decode_constant_offsets():
    reg = torch.full((1, 4, 5, 5), 5.0, dtype=torch.float64)
    boxes = decode_boxes(reg, 8, 63)
    center = boxes[0, :, 2, 2]
    assert center.tolist() == [26.0, 26.0, 10.0, 10.0]
    assert score_map_points(5, 8, 63).tolist() == [15.0, 23.0, 31.0, 39.0, 47.0]


# -- full network ---------------------------------------------------------------------

def test_full_forward_shapes_and_finite():
    torch.manual_seed(0)
    net = SiameseNet(SMALL)
    cls, reg, z, x = net(torch.rand(2, 3, 32, 32) * 255, torch.rand(2, 3, 64, 64) * 255)
    assert z.shape == (2, 16, 8, 8) and x.shape == (2, 16, 16, 16)
    assert cls.shape == (2, 1, 9, 9) and reg.shape == (2, 4, 9, 9)
    for t in (cls, reg, z, x):
        assert torch.isfinite(t).all()
    d = build_discriminator(SMALL)
    assert d(x).shape == (2,) and d(z).shape == (2,)


def test_model_config_round_trip():
    assert ModelConfig.from_dict(SMALL.to_dict()) == SMALL


def test_extract_features_scales_input():
    bb = Backbone(SMALL.backbone)
    p = torch.rand(1, 3, 32, 32) * 255
    assert torch.equal(extract_features(p, bb), bb(p / 255.0))
