"""Gaussian/Laplacian pyramid with exact reconstruction.

All operations take either an ``H x W x C`` numpy raster or a torch tensor
whose last two axes are spatial (``... x H x W``) and return the same kind.
The torch path is differentiable, which the model relies on.

Blurring uses the binomial kernel ``(1, 4, 6, 4, 1) / 16`` along each axis
with mirror borders (the edge sample is not repeated).  Odd sizes are
halved with ``ceil``; the upsampling step takes the parent size explicitly
so that the shape chain is always recoverable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np
import torch

Array = Union[np.ndarray, torch.Tensor]

KERNEL = (1 / 16, 4 / 16, 6 / 16, 4 / 16, 1 / 16)
MIN_COARSE_SIZE = 4


class PyramidError(ValueError):
    """Invalid pyramid shapes or depth."""


def _reflect_index(n: int, pad: int) -> torch.Tensor:
    idx = torch.arange(-pad, n + pad)
    if n == 1:
        return torch.zeros_like(idx)
    period = 2 * (n - 1)
    idx = idx % period
    return torch.where(idx >= n, period - idx, idx)


def _blur_axis(x: torch.Tensor, axis: int, gain: float) -> torch.Tensor:
    n = x.shape[axis]
    padded = x.index_select(axis, _reflect_index(n, 2))
    out = None
    for k, w in enumerate(KERNEL):
        term = padded.narrow(axis, k, n) * (w * gain)
        out = term if out is None else out + term
    return out


def _blur(x: torch.Tensor, gain: float = 1.0) -> torch.Tensor:
    return _blur_axis(_blur_axis(x, -2, gain), -1, gain)


def _as_tensor(img: Array) -> tuple[torch.Tensor, bool]:
    if isinstance(img, torch.Tensor):
        if img.ndim < 2:
            raise PyramidError(f"need at least two spatial axes, got shape {tuple(img.shape)}")
        return img, False
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise PyramidError(f"expected an H x W x C raster, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))), True


def _restore(t: torch.Tensor, was_numpy: bool) -> Array:
    if was_numpy:
        return t.detach().numpy().transpose(1, 2, 0).copy()
    return t


def pyr_down(img: Array) -> Array:
    """Blur and keep every other sample; output is ``ceil(H/2) x ceil(W/2)``."""
    x, was_np = _as_tensor(img)
    h, w = x.shape[-2:]
    if h < 2 or w < 2:
        raise PyramidError(f"cannot downsample a {h}x{w} image")
    return _restore(_blur(x)[..., ::2, ::2], was_np)


def pyr_up(img: Array, target_h: int, target_w: int) -> Array:
    """Zero-interleave up to ``target_h x target_w`` then blur with gain 2 per axis."""
    x, was_np = _as_tensor(img)
    h, w = x.shape[-2:]
    if (target_h + 1) // 2 != h or (target_w + 1) // 2 != w:
        raise PyramidError(
            f"{h}x{w} is not the half-size child of target {target_h}x{target_w}"
        )
    up = x.new_zeros(*x.shape[:-2], target_h, target_w)
    up[..., ::2, ::2] = x
    return _restore(_blur(up, gain=2.0), was_np)


@dataclass
class Pyramid:
    """Band-pass images (finest first) plus the coarsest low-pass residual."""

    highs: list = field(default_factory=list)
    low: Array = None

    @property
    def levels(self) -> int:
        return len(self.highs)

    def bands(self) -> list:
        return [*self.highs, self.low]

    def map(self, fn) -> "Pyramid":
        return Pyramid([fn(b) for b in self.highs], fn(self.low))


def max_levels(h: int, w: int) -> int:
    """Deepest pyramid whose coarsest band keeps at least 4 samples per side."""
    levels = 0
    while min(h, w) / 2 ** (levels + 1) >= MIN_COARSE_SIZE:
        levels += 1
    return levels


def _spatial(img: Array) -> tuple[int, int]:
    if isinstance(img, torch.Tensor):
        return tuple(img.shape[-2:])
    return tuple(np.shape(img)[:2])


def decompose(img: Array, levels: int) -> Pyramid:
    """Split ``img`` into ``levels`` high-frequency bands and one low band."""
    if levels < 0:
        raise PyramidError(f"levels must be non-negative, got {levels}")
    h, w = _spatial(img)
    if levels > 0 and min(h, w) / 2**levels < MIN_COARSE_SIZE:
        raise PyramidError(
            f"{levels} levels is too deep for a {h}x{w} image (max {max_levels(h, w)})"
        )
    x, was_np = _as_tensor(img)
    highs = []
    current = x
    for _ in range(levels):
        down = pyr_down(current)
        highs.append(current - pyr_up(down, *current.shape[-2:]))
        current = down
    return Pyramid([_restore(b, was_np) for b in highs], _restore(current, was_np))


def check_chain(pyr: Pyramid) -> None:
    prev = _spatial(pyr.low)
    for k in range(pyr.levels - 1, -1, -1):
        h, w = _spatial(pyr.highs[k])
        if ((h + 1) // 2, (w + 1) // 2) != prev:
            raise PyramidError(f"band {k} of size {h}x{w} does not fit its child {prev[0]}x{prev[1]}")
        prev = (h, w)


def reconstruct(pyr: Pyramid) -> Array:
    """Invert :func:`decompose` by upsample-and-add from coarse to fine."""
    if pyr.low is None:
        raise PyramidError("pyramid has no low band")
    check_chain(pyr)
    was_np = not isinstance(pyr.low, torch.Tensor)
    current, _ = _as_tensor(pyr.low)
    for band in reversed(pyr.highs):
        b, _ = _as_tensor(band)
        current = pyr_up(current, *b.shape[-2:]) + b
    return _restore(current, was_np)
