"""End-to-end model: pyramid split, per-band correction, reconstruction."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import torch.nn as nn

from deshadow.aan import AAN
from deshadow.gmft import GMFT
from deshadow.image import to_image, to_tensor
from deshadow.layers import clamp01, fan_in_uniform_
from deshadow.pyramid import Pyramid, decompose, reconstruct

PARAM_SCHEMA_VERSION = "deshadow-params/1"

ABLATIONS = ("full", "no_aan", "no_gmft")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    levels: int = 3
    aan_enabled: bool = True
    gmft_enabled: bool = True
    feature_channels: int = 32
    gia_blocks: int = 2
    attention_heads: int = 4
    attention_window: int = 8
    spp_pools: tuple = (1, 2, 4)
    seed: int = 0
    image_channels: int = 3
    maa_stages: int = 3
    mlp_ratio: int = 2
    ffn_expansion: int = 2
    max_global_tokens: int = 1024

    def __post_init__(self):
        self.spp_pools = tuple(int(s) for s in self.spp_pools)
        if self.levels < 0:
            raise ConfigError("levels must be non-negative")
        if self.feature_channels % self.attention_heads:
            raise ConfigError("feature_channels must be divisible by attention_heads")
        if self.maa_stages < 2:
            raise ConfigError("the aggregation branch needs at least two stages")
        if list(self.spp_pools) != sorted(set(self.spp_pools)):
            raise ConfigError("spp_pools must be strictly increasing")

    @classmethod
    def for_ablation(cls, ablation: str, **kw) -> "ModelConfig":
        if ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {ablation!r}; choose from {ABLATIONS}")
        return cls(aan_enabled=ablation != "no_aan", gmft_enabled=ablation != "no_gmft", **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spp_pools"] = list(self.spp_pools)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_text(self) -> str:
        return "".join(f"{k} = {json.dumps(v)}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        d = {}
        for line in text.splitlines():
            if line.strip() and not line.lstrip().startswith("#"):
                key, _, value = line.partition("=")
                d[key.strip()] = json.loads(value)
        return cls.from_dict(d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class ParamStore:
    """Flat, ordered mapping from hierarchical parameter names to tensors."""

    entries: dict = field(default_factory=dict)
    version: str = PARAM_SCHEMA_VERSION

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParamStore":
        return cls({k: v.detach().clone() for k, v in module.state_dict().items()})

    def load_into(self, module: nn.Module) -> nn.Module:
        module.load_state_dict(self.entries, strict=True)
        return module

    def num_params(self) -> int:
        return sum(t.numel() for t in self.entries.values())

    def names(self) -> list[str]:
        return list(self.entries)

    def check_finite(self) -> None:
        bad = [k for k, t in self.entries.items() if not torch.isfinite(t).all()]
        if bad:
            raise ValueError(f"non-finite parameters: {bad}")

    def __getitem__(self, name):
        return self.entries[name]

    def __len__(self):
        return len(self.entries)


_ONES = ("cnr.gamma", "norm1.weight", "norm2.weight", "ca.bias", "bmt.temperature")


def _init_parameters(model: "DocDeshadower", seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if ".head." in f".{name}":
                p.zero_()
            elif name.endswith(_ONES):
                p.fill_(1.0)
            elif p.ndim >= 2:
                fan_in_uniform_(p, gen)
            else:
                p.zero_()


class DocDeshadower(nn.Module):
    """Shadow remover operating on ``N x C x H x W`` tensors in ``[0, 1]``.

    The AAN corrects the low band and one GMFT per level corrects each high
    band; disabled branches pass their bands through untouched.  Residual
    heads start at zero so a fresh model reproduces its input up to pyramid
    round-off.
    """

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        self.aan = (
            AAN(cfg.image_channels, cfg.feature_channels, cfg.maa_stages, cfg.spp_pools, cfg.mlp_ratio)
            if cfg.aan_enabled
            else None
        )
        self.gmft = (
            nn.ModuleList(
                GMFT(
                    cfg.image_channels,
                    cfg.feature_channels,
                    cfg.gia_blocks,
                    cfg.attention_heads,
                    cfg.ffn_expansion,
                    window=cfg.attention_window if k == 0 else None,
                    fallback_window=cfg.attention_window,
                    max_global_tokens=cfg.max_global_tokens,
                )
                for k in range(cfg.levels)
            )
            if cfg.gmft_enabled
            else None
        )
        _init_parameters(self, cfg.seed)

    def process_bands(self, pyr: Pyramid) -> Pyramid:
        low = self.aan(pyr.low) if self.aan is not None else pyr.low
        if self.gmft is None:
            highs = list(pyr.highs)
        else:
            highs = [net(band) for net, band in zip(self.gmft, pyr.highs)]
        return Pyramid(highs, low)

    def forward(self, img: torch.Tensor, clamp: bool = True) -> torch.Tensor:
        if img.shape[1] != self.cfg.image_channels:
            raise ConfigError(f"model expects {self.cfg.image_channels} channels, got {img.shape[1]}")
        out = reconstruct(self.process_bands(decompose(img, self.cfg.levels)))
        return clamp01(out) if clamp else out


def build_model(cfg: ModelConfig, params: ParamStore | None = None) -> DocDeshadower:
    model = DocDeshadower(cfg)
    if params is not None:
        params.load_into(model)
    return model.eval()


def forward(img, params: ParamStore, cfg: ModelConfig, clamp: bool = True):
    """Apply the model to an ``H x W x C`` raster (or an ``N x C x H x W`` tensor)."""
    model = build_model(cfg, params)
    with torch.no_grad():
        if isinstance(img, torch.Tensor):
            return model(img, clamp=clamp)
        arr = np.asarray(img)
        out = model(to_tensor(arr, torch.float32), clamp=clamp)
        return to_image(out)
