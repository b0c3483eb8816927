"""Siamese tracking network with a Transformer bridging layer and a day/night discriminator.

All modules take batched ``B x C x H x W`` tensors. Template and search
patches go through the same backbone and bridging layer.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from nightadapt.errors import ConfigError, ShapeError


@dataclass(frozen=True)
class BackboneConfig:
    channels: tuple[int, ...] = (32, 64, 96, 128)
    strides: tuple[int, ...] = (2, 2, 1, 1)
    # trailing blocks concatenated into the output feature
    used_blocks: int = 2
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if len(self.channels) < 1 or len(self.channels) != len(self.strides):
            raise ConfigError("channels and strides need one entry per block", key="channels")
        if any(c < 1 for c in self.channels) or any(s < 1 for s in self.strides):
            raise ConfigError("channels and strides must be positive", key="channels")
        if not 1 <= self.used_blocks <= len(self.channels):
            raise ConfigError("used_blocks must lie in [1, number of blocks]", key="used_blocks")
        if any(s != 1 for s in self.strides[len(self.strides) - self.used_blocks + 1:]):
            raise ConfigError("concatenated blocks after the first used one must have stride 1", key="strides")

    @property
    def out_channels(self) -> int:
        return sum(self.channels[-self.used_blocks:])

    @property
    def total_stride(self) -> int:
        return math.prod(self.strides)


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    use_bridge: bool = True
    bridge_heads: int = 4
    bridge_ffn_hidden: int = 256
    head_channels: int = 64
    template_size: int = 127
    search_size: int = 255
    disc_embed: int = 64
    disc_heads: int = 4
    disc_ffn_hidden: int = 128
    disc_layers: int = 2
    grl_coeff: float = 1.0

    def __post_init__(self):
        if not 0 < self.template_size < self.search_size:
            raise ConfigError("need 0 < template_size < search_size", key="template_size")
        dim = self.backbone.out_channels
        if self.use_bridge and (dim % 4 or dim % self.bridge_heads):
            raise ConfigError(f"feature channels {dim} must be divisible by 4 and by bridge_heads",
                              key="bridge_heads")
        if self.disc_embed % self.disc_heads:
            raise ConfigError("disc_embed must be divisible by disc_heads", key="disc_heads")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["backbone"] = BackboneConfig(**d.get("backbone", {}))
        return cls(**d)


# -- backbone ----------------------------------------------------------------

class ConvBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)

    def forward(self, x):
        return F.relu(self.conv2(F.relu(self.conv1(x))))


class Backbone(nn.Module):
    """Plain convolutional extractor; the last ``used_blocks`` outputs are concatenated."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        cins = (config.in_channels,) + config.channels[:-1]
        self.blocks = nn.ModuleList(
            ConvBlock(ci, co, s) for ci, co, s in zip(cins, config.channels, config.strides)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # padded convolutions: a side of n pixels becomes ceil(n / stride) feature pixels
        stride = self.config.total_stride
        if x.dim() != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected B x {self.config.in_channels} x H x W patches, got {tuple(x.shape)}")
        if min(x.shape[-2:]) < stride:
            raise ShapeError(f"patch size {tuple(x.shape[-2:])} is smaller than the total stride {stride}")
        outs = []
        for block in self.blocks:
            x = block(x)
            outs.append(x)
        return torch.cat(outs[-self.config.used_blocks:], dim=1)


def extract_features(patch: torch.Tensor, backbone: Backbone) -> torch.Tensor:
    """Backbone features of a ``B x 3 x H x W`` patch on the 0..255 scale."""
    return backbone(patch / 255.0)


# -- attention ----------------------------------------------------------------

def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, return_weights: bool = False):
    """Scaled dot-product attention over the second-to-last (token) axis."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1]), dim=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"embedding dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.last_weights = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        split = lambda t: t.view(b, n, self.heads, d // self.heads).transpose(1, 2)
        out, w = attention(split(self.q(x)), split(self.k(x)), split(self.v(x)), return_weights=True)
        self.last_weights = w.detach()
        return self.out(out.transpose(1, 2).reshape(b, n, d))


def sinusoidal_position_encoding(channels: int, height: int, width: int,
                                 dtype=torch.float32) -> torch.Tensor:
    """Fixed 2-D encoding ``C x H x W``: first half of channels encodes rows, second half columns."""
    if channels % 4:
        raise ShapeError(f"positional encoding needs channels divisible by 4, got {channels}")
    quarter = channels // 4
    freqs = torch.exp(-math.log(10000.0) * torch.arange(quarter, dtype=torch.float64) / quarter)
    rows = torch.arange(height, dtype=torch.float64)[:, None] * freqs
    cols = torch.arange(width, dtype=torch.float64)[:, None] * freqs
    row_enc = torch.cat([rows.sin(), rows.cos()], dim=1).T[:, :, None].expand(-1, height, width)
    col_enc = torch.cat([cols.sin(), cols.cos()], dim=1).T[:, None, :].expand(-1, height, width)
    return torch.cat([row_enc, col_enc], dim=0).to(dtype)


class Modulation(nn.Module):
    """Token-conditioned per-channel scale and shift: ``x * (1 + s(x)) + b(x)``."""

    def __init__(self, dim: int):
        super().__init__()
        self.proj = nn.Linear(dim, 2 * dim)

    def forward(self, x):
        scale, shift = self.proj(x).chunk(2, dim=-1)
        return x * (1.0 + scale) + shift


class BridgingLayer(nn.Module):
    """Transformer block inserted between the backbone and the cross-correlation."""

    def __init__(self, dim: int, heads: int = 4, ffn_hidden: int = 256):
        super().__init__()
        self.dim = dim
        self.msa = MultiHeadSelfAttention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.mod = Modulation(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_hidden), nn.ReLU(), nn.Linear(ffn_hidden, dim))
        self.norm2 = nn.LayerNorm(dim)
        self.bypass_norm = False
        self._pos_cache = {}

    def position_encoding(self, h, w, dtype, device):
        key = (h, w, dtype, device)
        if key not in self._pos_cache:
            self._pos_cache[key] = sinusoidal_position_encoding(self.dim, h, w, dtype).to(device)
        return self._pos_cache[key]

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        b, c, h, w = feat.shape
        if c != self.dim:
            raise ShapeError(f"bridging layer expects {self.dim} channels, got {c}")
        x = (feat + self.position_encoding(h, w, feat.dtype, feat.device)).flatten(2).transpose(1, 2)
        x = self.msa(x) + x
        norm1 = (lambda t: t) if self.bypass_norm else self.norm1
        norm2 = (lambda t: t) if self.bypass_norm else self.norm2
        y = norm2(self.ffn(self.mod(norm1(x))) + x)
        return y.transpose(1, 2).reshape(b, c, h, w)


# -- gradient reversal ----------------------------------------------------------

class _GradientReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, coeff):
        ctx.coeff = coeff
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -ctx.coeff * grad, None


def gradient_reverse(x: torch.Tensor, coeff: float = 1.0) -> torch.Tensor:
    """Identity forward; gradient multiplied by ``-coeff`` backward."""
    return _GradientReverse.apply(x, coeff)


# -- discriminator --------------------------------------------------------------

class Discriminator(nn.Module):
    """Channel softmax, gradient reversal, 4x4/4 patch embedding, class token, Transformer layers.

    Returns one domain logit per sample, read from the class token.
    """

    def __init__(self, in_channels: int, embed: int = 64, heads: int = 4, ffn_hidden: int = 128,
                 layers: int = 2, grl_coeff: float = 1.0):
        super().__init__()
        self.embed = nn.Conv2d(in_channels, embed, kernel_size=4, stride=4)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, embed))
        nn.init.normal_(self.cls_token, std=0.02)
        self.encoder = nn.ModuleList(
            nn.TransformerEncoderLayer(embed, heads, ffn_hidden, dropout=0.0, batch_first=True,
                                       norm_first=True)
            for _ in range(layers)
        )
        self.norm = nn.LayerNorm(embed)
        self.out = nn.Linear(embed, 1)
        self.grl_coeff = grl_coeff
        self.reverse_gradient = True

    def tokens(self, feat: torch.Tensor) -> torch.Tensor:
        """Token sequence fed to the encoder: class token then flattened patch embeddings."""
        if feat.shape[-1] % 4 or feat.shape[-2] % 4:
            raise ShapeError(f"discriminator input {tuple(feat.shape[-2:])} not divisible by 4")
        x = torch.softmax(feat, dim=1)
        if self.reverse_gradient:
            x = gradient_reverse(x, self.grl_coeff)
        x = self.embed(x).flatten(2).transpose(1, 2)
        return torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        x = self.tokens(feat)
        for layer in self.encoder:
            x = layer(x)
        return self.out(self.norm(x[:, 0])).squeeze(-1)


# -- correlation and head -----------------------------------------------------------

def cross_correlate(template: torch.Tensor, search: torch.Tensor) -> torch.Tensor:
    """Depth-wise cross-correlation of ``B x C x hz x wz`` over ``B x C x hx x wx``."""
    if template.shape[:2] != search.shape[:2]:
        raise ShapeError(f"template {tuple(template.shape)} and search {tuple(search.shape)} disagree")
    if template.shape[-2] > search.shape[-2] or template.shape[-1] > search.shape[-1]:
        raise ShapeError("template is larger than the search region")
    b, c = template.shape[:2]
    out = F.conv2d(search.reshape(1, b * c, *search.shape[-2:]),
                   template.reshape(b * c, 1, *template.shape[-2:]), groups=b * c)
    return out.view(b, c, *out.shape[-2:])


class TrackerHead(nn.Module):
    """Per-pixel objectness logits and positive (l, t, r, b) side offsets in patch pixels."""

    def __init__(self, in_channels: int, hidden: int, stride: int):
        super().__init__()
        self.stride = stride
        self.tower = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 3, padding=1), nn.ReLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1), nn.ReLU(),
        )
        self.cls = nn.Conv2d(hidden, 1, 1)
        self.reg = nn.Conv2d(hidden, 4, 1)

    def forward(self, corr: torch.Tensor):
        x = self.tower(corr)
        return self.cls(x), self.stride * (F.softplus(self.reg(x)) + 1e-4)


def score_map_points(size: int, stride: int, search_size: int) -> torch.Tensor:
    """Search-patch coordinate of each score-map index along one axis."""
    return (search_size - 1) / 2.0 + (torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0) * stride


def decode_boxes(reg: torch.Tensor, stride: int, search_size: int) -> torch.Tensor:
    """Turn ``B x 4 x H x W`` offsets into ``B x 4 x H x W`` boxes ``(x, y, w, h)``."""
    h, w = reg.shape[-2:]
    ys = score_map_points(h, stride, search_size).to(reg.dtype)[:, None]
    xs = score_map_points(w, stride, search_size).to(reg.dtype)[None, :]
    l, t, r, b = reg.unbind(dim=1)
    return torch.stack([xs - l, ys - t, l + r, t + b], dim=1)


# -- full tracker -----------------------------------------------------------------

class SiameseNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        dim = config.backbone.out_channels
        self.backbone = Backbone(config.backbone)
        self.bridge = BridgingLayer(dim, config.bridge_heads, config.bridge_ffn_hidden) if config.use_bridge else None
        self.head = TrackerHead(dim, config.head_channels, config.backbone.total_stride)

    @property
    def stride(self) -> int:
        return self.config.backbone.total_stride

    def features(self, patch: torch.Tensor) -> torch.Tensor:
        return extract_features(patch, self.backbone)

    def bridged(self, feat: torch.Tensor) -> torch.Tensor:
        return self.bridge(feat) if self.bridge is not None else feat

    def forward(self, template: torch.Tensor, search: torch.Tensor):
        """Returns ``(cls, reg, z_feat, x_feat)`` with the (bridged) features the discriminator sees."""
        z = self.bridged(self.features(template))
        x = self.bridged(self.features(search))
        cls, reg = self.head(cross_correlate(z, x))
        return cls, reg, z, x


def build_discriminator(config: ModelConfig) -> Discriminator:
    return Discriminator(config.backbone.out_channels, config.disc_embed, config.disc_heads,
                         config.disc_ffn_hidden, config.disc_layers, config.grl_coeff)
