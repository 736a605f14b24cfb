"""Gated multi-scale fusion transformer for one high-frequency band.

Pipeline per band::

    embed -> ResBlock -> GIA x n -> 1x1 expand -> SimpleGate
          -> channel attention -> BMT -> DGFN -> head (+ band)

BMT runs two self-attention passes in sequence, each pre-normalised and
residual: one with pixels as tokens (windowed on large bands) and one with
channels as tokens.  No positional encoding is used, so the pixel pass is
permutation equivariant within each window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from deshadow.layers import ChannelLayerNorm, channel_layer_norm, conv, conv2d, relu


@dataclass
class GiaParams:
    w_g: torch.Tensor
    b_g: torch.Tensor


@dataclass
class AttentionParams:
    q_proj: tuple
    k_proj: tuple
    v_proj: tuple
    out_proj: tuple
    heads: int = 1

    @property
    def width(self) -> int:
        return self.q_proj[0].shape[0]

    @property
    def d_k(self) -> int:
        return self.width // self.heads


@dataclass
class DgfnParams:
    w1: torch.Tensor
    b1: torch.Tensor
    w2: torch.Tensor
    b2: torch.Tensor
    wg: torch.Tensor
    bg: torch.Tensor


@dataclass
class BmtParams:
    spatial_norm: tuple
    spatial: AttentionParams
    channel_norm: tuple
    channel: AttentionParams
    temperature: torch.Tensor
    window: int | None = None


def res_block(x, w1, b1, w2, b2, act=F.gelu):
    """``x + conv(act(conv(x)))``."""
    return x + conv2d(act(conv2d(x, w1, b1)), w2, b2)


def gia_block(x: torch.Tensor, p: GiaParams) -> torch.Tensor:
    """``x * sigmoid(W_g x) + b_g`` with ``W_g`` a 1x1 channel map."""
    c = x.shape[1]
    if tuple(p.w_g.shape[:2]) != (c, c):
        raise ValueError(f"W_g must be {c}x{c}, got {tuple(p.w_g.shape)}")
    return x * torch.sigmoid(conv2d(x, p.w_g)) + p.b_g[:, None, None]


def simple_gate(x: torch.Tensor) -> torch.Tensor:
    c = x.shape[1]
    if c % 2:
        raise ValueError(f"SimpleGate needs an even channel count, got {c}")
    a, b = x.chunk(2, dim=1)
    return a * b


def channel_attention(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Scale each channel by a linear map of the globally pooled channel vector."""
    if weight.shape[-1] != x.shape[1]:
        raise ValueError(f"channel attention expects {weight.shape[-1]} channels, got {x.shape[1]}")
    pooled = x.mean(dim=(-2, -1))
    scale = F.linear(pooled, weight, bias)
    return x * scale[:, :, None, None]


def attention_matrix(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Row-stochastic ``softmax(q k^T / sqrt(d_k))``."""
    return torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1]), dim=-1)


def _split_heads(t, heads):
    *lead, n, d = t.shape
    return t.reshape(*lead, n, heads, d // heads).transpose(-3, -2)


def _merge_heads(t):
    *lead, h, n, d = t.shape
    return t.transpose(-3, -2).reshape(*lead, n, h * d)


def self_attention(x: torch.Tensor, p: AttentionParams) -> torch.Tensor:
    """Multi-head scaled dot-product attention over the rows of ``... x N x D``."""
    d = x.shape[-1]
    if p.q_proj[0].shape[1] != d:
        raise ValueError(f"attention width {p.q_proj[0].shape[1]} does not match tokens of width {d}")
    if p.width % p.heads:
        raise ValueError(f"width {p.width} is not divisible by {p.heads} heads")
    q = _split_heads(F.linear(x, *p.q_proj), p.heads)
    k = _split_heads(F.linear(x, *p.k_proj), p.heads)
    v = _split_heads(F.linear(x, *p.v_proj), p.heads)
    out = _merge_heads(attention_matrix(q, k) @ v)
    return F.linear(out, *p.out_proj)


def _to_windows(x, win):
    b, c, h, w = x.shape
    ph, pw = (-h) % win, (-w) % win
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    hh, ww = x.shape[-2:]
    t = x.reshape(b, c, hh // win, win, ww // win, win)
    t = t.permute(0, 2, 4, 3, 5, 1).reshape(b, hh // win, ww // win, win * win, c)
    return t, (h, w, hh, ww)


def _from_windows(t, win, dims):
    h, w, hh, ww = dims
    b, nh, nw, _, c = t.shape
    x = t.reshape(b, nh, nw, win, win, c).permute(0, 5, 1, 3, 2, 4).reshape(b, c, hh, ww)
    return x[..., :h, :w]


def spatial_attention(x: torch.Tensor, p: AttentionParams, window: int | None = None) -> torch.Tensor:
    """Self-attention with pixels as tokens, globally or inside square windows."""
    b, c, h, w = x.shape
    if window is None:
        tokens = x.flatten(2).transpose(1, 2)
        return self_attention(tokens, p).transpose(1, 2).reshape(b, c, h, w)
    tokens, dims = _to_windows(x, window)
    return _from_windows(self_attention(tokens, p), window, dims)


def channel_token_attention(x: torch.Tensor, p: AttentionParams, temperature: torch.Tensor) -> torch.Tensor:
    """Self-attention with channels as tokens.

    Query, key and value are 1x1 channel maps of ``x``; every channel of a
    head is then a token whose features are its ``H*W`` samples.  Queries and
    keys are L2-normalised over those samples and the logits scaled by a
    per-head temperature, since a ``1/sqrt(H*W)`` scale leaves them growing
    with band size.
    """
    b, c, h, w = x.shape
    q, k, v = (conv2d(x, *proj).reshape(b, p.heads, c // p.heads, h * w) for proj in (p.q_proj, p.k_proj, p.v_proj))
    q = F.normalize(q, dim=-1)
    k = F.normalize(k, dim=-1)
    attn = torch.softmax(q @ k.transpose(-2, -1) * temperature[:, None, None], dim=-1)
    return conv2d((attn @ v).reshape(b, c, h, w), *p.out_proj)


def bmt_block(x: torch.Tensor, p: BmtParams) -> torch.Tensor:
    x = x + spatial_attention(channel_layer_norm(x, *p.spatial_norm), p.spatial, p.window)
    x = x + channel_token_attention(channel_layer_norm(x, *p.channel_norm), p.channel, p.temperature)
    return x


def dgfn(x: torch.Tensor, p: DgfnParams) -> torch.Tensor:
    """``x + W_2(relu(W_1 x + b_1) * sigmoid(W_g x + b_g)) + b_2``, 1x1 maps."""
    if p.w1.shape[1] != x.shape[1]:
        raise ValueError(f"DGFN expects {p.w1.shape[1]} channels, got {x.shape[1]}")
    hidden = relu(conv2d(x, p.w1, p.b1)) * torch.sigmoid(conv2d(x, p.wg, p.bg))
    return x + conv2d(hidden, p.w2, p.b2)


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = conv(channels, channels, 3)
        self.conv2 = conv(channels, channels, 3)

    def forward(self, x):
        return res_block(x, self.conv1.weight, self.conv1.bias, self.conv2.weight, self.conv2.bias)


class GIA(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.w_g = nn.Parameter(torch.zeros(channels, channels))
        self.b_g = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return gia_block(x, GiaParams(self.w_g, self.b_g))


class ChannelAttention(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(channels, channels))
        self.bias = nn.Parameter(torch.ones(channels))

    def forward(self, x):
        return channel_attention(x, self.weight, self.bias)


class _Projections(nn.Module):
    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.out = nn.Linear(channels, channels)
        self.heads = heads

    def params(self) -> AttentionParams:
        return AttentionParams(
            (self.q.weight, self.q.bias),
            (self.k.weight, self.k.bias),
            (self.v.weight, self.v.bias),
            (self.out.weight, self.out.bias),
            self.heads,
        )


class BMT(nn.Module):
    def __init__(self, channels: int, heads: int = 4):
        super().__init__()
        if channels % heads:
            raise ValueError(f"{channels} channels cannot be split into {heads} heads")
        self.norm1 = ChannelLayerNorm(channels)
        self.spatial = _Projections(channels, heads)
        self.norm2 = ChannelLayerNorm(channels)
        self.channel = _Projections(channels, heads)
        self.temperature = nn.Parameter(torch.ones(heads))

    def params(self, window=None) -> BmtParams:
        return BmtParams(
            (self.norm1.weight, self.norm1.bias),
            self.spatial.params(),
            (self.norm2.weight, self.norm2.bias),
            self.channel.params(),
            self.temperature,
            window,
        )

    def forward(self, x, window=None):
        return bmt_block(x, self.params(window))


class DGFN(nn.Module):
    def __init__(self, channels: int, expansion: int = 2):
        super().__init__()
        if expansion < 1:
            raise ValueError("expansion factor must be at least 1")
        hidden = channels * expansion
        self.w1 = conv(channels, hidden, 1)
        self.wg = conv(channels, hidden, 1)
        self.w2 = conv(hidden, channels, 1)

    def params(self) -> DgfnParams:
        return DgfnParams(
            self.w1.weight, self.w1.bias, self.w2.weight, self.w2.bias, self.wg.weight, self.wg.bias
        )

    def forward(self, x):
        return dgfn(x, self.params())


class GMFT(nn.Module):
    """Residual refiner for one band.

    ``window`` forces windowed pixel attention; otherwise attention is global
    unless the band has more than ``max_global_tokens`` pixels.
    """

    def __init__(
        self,
        image_channels=3,
        channels=32,
        gia_blocks=2,
        heads=4,
        expansion=2,
        window: int | None = None,
        fallback_window: int = 8,
        max_global_tokens: int = 1024,
    ):
        super().__init__()
        self.embed = conv(image_channels, channels, 3)
        self.res = ResBlock(channels)
        self.gia = nn.ModuleList(GIA(channels) for _ in range(gia_blocks))
        self.expand = conv(channels, 2 * channels, 1)
        self.ca = ChannelAttention(channels)
        self.bmt = BMT(channels, heads)
        self.dgfn = DGFN(channels, expansion)
        self.head = conv(channels, image_channels, 3)
        self.window = window
        self.fallback_window = fallback_window
        self.max_global_tokens = max_global_tokens

    def attention_window(self, h: int, w: int) -> int | None:
        if self.window is not None:
            return self.window
        return self.fallback_window if h * w > self.max_global_tokens else None

    def forward(self, band):
        x = self.res(self.embed(band))
        for block in self.gia:
            x = block(x)
        x = self.ca(simple_gate(self.expand(x)))
        x = self.bmt(x, self.attention_window(*band.shape[-2:]))
        x = self.dgfn(x)
        return band + self.head(x)


def gmft_forward(band: torch.Tensor, params: dict, **arch) -> torch.Tensor:
    """Run a :class:`GMFT` with weights from a name -> tensor mapping."""
    channels, image_channels = params["embed.weight"].shape[:2]
    gia_blocks = sum(1 for k in params if k.startswith("gia.") and k.endswith(".w_g"))
    net = GMFT(image_channels, channels, gia_blocks, **arch)
    return torch.func.functional_call(net, dict(params), (band,))
