"""Small shared pieces: convolution helpers, channel layer norm, init."""

from __future__ import annotations

import contextlib
import contextvars
import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def conv(in_ch: int, out_ch: int, kernel_size: int = 3, bias: bool = True) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, kernel_size, padding=kernel_size // 2, bias=bias)


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Same-size convolution; ``weight`` may be a 2-D matrix for a 1x1 map."""
    if weight.ndim == 2:
        weight = weight[:, :, None, None]
    return F.conv2d(x, weight, bias, padding=weight.shape[-1] // 2)


def channel_layer_norm(
    x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5
) -> torch.Tensor:
    """Layer norm over the channel axis of an ``N x C x H x W`` map, per pixel."""
    mu = x.mean(dim=1, keepdim=True)
    var = x.var(dim=1, keepdim=True, unbiased=False)
    x = (x - mu) / torch.sqrt(var + eps)
    return x * weight[None, :, None, None] + bias[None, :, None, None]


class ChannelLayerNorm(nn.Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        return channel_layer_norm(x, self.weight, self.bias, self.eps)


def fan_in_uniform_(weight: torch.Tensor, generator: torch.Generator, gain: float = 1.0) -> None:
    """U(-b, b) with ``b = gain * sqrt(3 / fan_in)``, drawn from an explicit generator.

    At unit gain the map preserves the variance of unit-variance inputs.
    """
    fan_in = weight[0].numel() if weight.ndim > 1 else weight.numel()
    bound = gain * math.sqrt(3.0 / max(fan_in, 1))
    with torch.no_grad():
        sample = torch.rand(weight.shape, generator=generator, dtype=torch.float64)
        weight.copy_(((2 * sample - 1) * bound).to(weight.dtype))


_kinks: contextvars.ContextVar = contextvars.ContextVar("kinks", default=None)


@contextlib.contextmanager
def record_kinks():
    """Collect the activation pattern of every piecewise-linear op called inside."""
    log: list = []
    token = _kinks.set(log)
    try:
        yield log
    finally:
        _kinks.reset(token)


def relu(x: torch.Tensor) -> torch.Tensor:
    log = _kinks.get()
    if log is not None:
        log.append((x > 0).detach())
    return F.relu(x)


def clamp01(x: torch.Tensor) -> torch.Tensor:
    log = _kinks.get()
    if log is not None:
        log.append(((x > 0) & (x < 1)).detach())
    return x.clamp(0.0, 1.0)
