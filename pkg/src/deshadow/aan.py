"""Attention-aggregation network for the low-frequency residual.

Two parallel branches read a shared embedding of the low band:

* a channel-wise normalised residual branch that standardises every channel
  over its spatial extent and re-scales it with a learned affine map;
* a multi-stage attentive aggregation branch: cascaded convolutions whose
  fused output feeds ``concat(MLP(x), SPP(x)) * attention(x)``.

The branch outputs are concatenated and a zero-initialised 3x3 head maps
them to a correction that is added to the low band.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from deshadow.layers import conv, conv2d


@dataclass
class CnrParams:
    gamma: torch.Tensor
    beta: torch.Tensor
    eps: float = 1e-5


@dataclass
class MaaParams:
    """Weights for one aggregation block.

    ``conv_stages`` holds ``(weight, bias)`` pairs applied in cascade.  The MLP
    is two 1x1 maps, ``attn_proj`` produces one logit per concatenated group
    (the MLP group plus one per pool size) and ``out_proj`` maps the
    concatenation back to the input width.
    """

    conv_stages: list
    mlp: tuple
    spp_pools: tuple
    attn_proj: tuple
    out_proj: tuple


def _check_finite(x: torch.Tensor) -> None:
    if not torch.isfinite(x).all():
        raise ValueError("non-finite values in feature map")


def cnr_block(x: torch.Tensor, p: CnrParams) -> torch.Tensor:
    """Standardise each channel over its spatial extent, then scale and shift.

    ``x`` is ``... x C x H x W``; statistics are per sample and channel, with
    the population variance.
    """
    c = x.shape[-3]
    if p.gamma.shape[-1] != c or p.beta.shape[-1] != c:
        raise ValueError(f"CNR parameters have {p.gamma.shape[-1]} channels, input has {c}")
    _check_finite(x)
    mu = x.mean(dim=(-2, -1), keepdim=True)
    var = x.var(dim=(-2, -1), keepdim=True, unbiased=False)
    normed = (x - mu) / torch.sqrt(var + p.eps)
    return normed * p.gamma[:, None, None] + p.beta[:, None, None]


def spp(x: torch.Tensor, pools) -> torch.Tensor:
    """Average-pool to each grid size and bilinearly restore to ``H x W``."""
    h, w = x.shape[-2:]
    feats = [
        F.interpolate(F.adaptive_avg_pool2d(x, s), size=(h, w), mode="bilinear", align_corners=False)
        for s in pools
    ]
    return torch.cat(feats, dim=1)


def attention_weights(x: torch.Tensor, attn_proj: tuple) -> torch.Tensor:
    """Per-pixel, per-group weights in ``[0, 1]``: sigmoid of a 1x1 map."""
    return torch.sigmoid(conv2d(x, *attn_proj))


def maa_block(x: torch.Tensor, p: MaaParams, act=F.gelu) -> torch.Tensor:
    if list(p.spp_pools) != sorted(set(p.spp_pools)):
        raise ValueError(f"pool sizes must be strictly increasing, got {p.spp_pools}")
    if len(p.conv_stages) < 2:
        raise ValueError("at least two cascaded stages are required")
    c = x.shape[1]
    h = x
    stages = []
    for weight, bias in p.conv_stages:
        if weight.shape[1] != h.shape[1]:
            raise ValueError(f"stage expects {weight.shape[1]} channels, got {h.shape[1]}")
        h = act(conv2d(h, weight, bias))
        stages.append(h)
    fused = torch.stack(stages).mean(dim=0)

    w1, b1, w2, b2 = p.mlp
    mlp = conv2d(act(conv2d(fused, w1, b1)), w2, b2)
    pooled = spp(fused, p.spp_pools)
    cat = torch.cat([mlp, pooled], dim=1)

    groups = 1 + len(p.spp_pools)
    weights = attention_weights(fused, p.attn_proj)
    if weights.shape[1] != groups:
        raise ValueError(f"attention produces {weights.shape[1]} groups, need {groups}")
    gated = cat * weights.repeat_interleave(c, dim=1)
    return conv2d(gated, *p.out_proj)


class CNRBranch(nn.Module):
    """``x + conv(gelu(cnr(x)))``."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(channels))
        self.beta = nn.Parameter(torch.zeros(channels))
        self.eps = eps
        self.conv = conv(channels, channels, 3)

    def params(self) -> CnrParams:
        return CnrParams(self.gamma, self.beta, self.eps)

    def forward(self, x):
        return x + self.conv(F.gelu(cnr_block(x, self.params())))


class MAABlock(nn.Module):
    def __init__(self, channels: int, stages: int = 3, spp_pools=(1, 2, 4), mlp_ratio: int = 2):
        super().__init__()
        self.stages = nn.ModuleList(conv(channels, channels, 3) for _ in range(stages))
        hidden = channels * mlp_ratio
        self.mlp1 = conv(channels, hidden, 1)
        self.mlp2 = conv(hidden, channels, 1)
        self.spp_pools = tuple(spp_pools)
        groups = 1 + len(self.spp_pools)
        self.attn = conv(channels, groups, 1)
        self.proj = conv(channels * groups, channels, 1)

    def params(self) -> MaaParams:
        return MaaParams(
            conv_stages=[(s.weight, s.bias) for s in self.stages],
            mlp=(self.mlp1.weight, self.mlp1.bias, self.mlp2.weight, self.mlp2.bias),
            spp_pools=self.spp_pools,
            attn_proj=(self.attn.weight, self.attn.bias),
            out_proj=(self.proj.weight, self.proj.bias),
        )

    def forward(self, x):
        return maa_block(x, self.params())


class AAN(nn.Module):
    """Residual corrector for the low band: ``low + head(concat(cnr, maa))``."""

    def __init__(self, image_channels=3, channels=32, maa_stages=3, spp_pools=(1, 2, 4), mlp_ratio=2):
        super().__init__()
        self.embed = conv(image_channels, channels, 3)
        self.cnr = CNRBranch(channels)
        self.maa = MAABlock(channels, maa_stages, spp_pools, mlp_ratio)
        self.head = conv(2 * channels, image_channels, 3)

    def forward(self, low):
        feat = self.embed(low)
        merged = torch.cat([self.cnr(feat), self.maa(feat)], dim=1)
        return low + self.head(merged)


def aan_forward(low: torch.Tensor, params: dict, **arch) -> torch.Tensor:
    """Run an :class:`AAN` with weights taken from a name -> tensor mapping."""
    channels = params["embed.weight"].shape[0]
    image_channels = params["embed.weight"].shape[1]
    stages = sum(1 for k in params if k.startswith("maa.stages.") and k.endswith(".weight"))
    net = AAN(image_channels, channels, stages, **arch)
    return torch.func.functional_call(net, dict(params), (low,))
