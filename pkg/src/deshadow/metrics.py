"""Training objective and evaluation metrics.

Images are in ``[0, 1]``.  SSIM, PSNR and RMSE are computed on the 0-255
scale because the SSIM stabilisers are defined there.  Every function takes
``H x W x C`` numpy rasters (returning floats) or ``N x C x H x W`` tensors
(returning differentiable scalar tensors).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


@dataclass
class LossConfig:
    lambda_ssim: float = 0.2
    c1: float = (0.01 * 255) ** 2
    c2: float = (0.03 * 255) ** 2
    ssim_mode: str = "windowed"
    metric_range: float = 255.0
    # "mean" averages the squared error; "sum" adds it up over all pixels
    mse_reduction: str = "mean"
    # "one_minus" penalises lambda * (1 - SSIM); "raw" adds lambda * SSIM as written
    ssim_term: str = "one_minus"

    def __post_init__(self):
        if self.lambda_ssim < 0:
            raise ValueError("lambda_ssim must be non-negative")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("SSIM constants must be positive")
        if self.ssim_mode not in ("global", "windowed"):
            raise ValueError(f"unknown ssim_mode {self.ssim_mode!r}")
        if self.mse_reduction not in ("mean", "sum"):
            raise ValueError(f"unknown mse_reduction {self.mse_reduction!r}")
        if self.ssim_term not in ("one_minus", "raw"):
            raise ValueError(f"unknown ssim_term {self.ssim_term!r}")


def _pair(pred, target):
    numpy_in = not isinstance(pred, torch.Tensor) and not isinstance(target, torch.Tensor)

    def conv(a):
        if isinstance(a, torch.Tensor):
            return a if a.ndim == 4 else a[None]
        arr = np.asarray(a, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        return torch.from_numpy(arr.transpose(2, 0, 1).copy())[None]

    p, t = conv(pred), conv(target)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(t.shape)}")
    if p.dtype != t.dtype:
        dtype = torch.promote_types(p.dtype, t.dtype)
        p, t = p.to(dtype), t.to(dtype)
    return p, t, numpy_in


def _out(v: torch.Tensor, numpy_in: bool):
    return float(v) if numpy_in else v


def mse_loss(pred, target, cfg: LossConfig | None = None):
    cfg = cfg or LossConfig()
    p, t, np_in = _pair(pred, target)
    sq = (p - t) ** 2
    return _out(sq.sum() if cfg.mse_reduction == "sum" else sq.mean(), np_in)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float64) -> torch.Tensor:
    r = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(r**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def _ssim_map(x, y, c1, c2, mode):
    if mode == "global":
        mu_x = x.mean(dim=(-2, -1))
        mu_y = y.mean(dim=(-2, -1))
        var_x = (x * x).mean(dim=(-2, -1)) - mu_x * mu_x
        var_y = (y * y).mean(dim=(-2, -1)) - mu_y * mu_y
        cov = (x * y).mean(dim=(-2, -1)) - mu_x * mu_y
    else:
        c = x.shape[1]
        size = min(SSIM_WINDOW, *x.shape[-2:])
        size -= 1 - size % 2
        win = gaussian_window(size, dtype=x.dtype).expand(c, 1, size, size)

        def filt(a):
            return F.conv2d(a, win, groups=c)

        mu_x, mu_y = filt(x), filt(y)
        var_x = filt(x * x) - mu_x * mu_x
        var_y = filt(y * y) - mu_y * mu_y
        cov = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return num / den


def ssim(x, y, cfg: LossConfig | None = None, mode: str | None = None):
    """Structural similarity on the 0-255 scale.

    ``global`` uses whole-image statistics per channel; ``windowed`` averages
    over 11x11 Gaussian windows (sigma 1.5), shrunk to fit small images.
    """
    cfg = cfg or LossConfig()
    mode = mode or cfg.ssim_mode
    if mode not in ("global", "windowed"):
        raise ValueError(f"unknown ssim mode {mode!r}")
    a, b, np_in = _pair(x, y)
    s = cfg.metric_range
    return _out(_ssim_map(a * s, b * s, cfg.c1, cfg.c2, mode).mean(), np_in)


def loss_terms(pred, target, cfg: LossConfig | None = None) -> dict:
    cfg = cfg or LossConfig()
    l_mse = mse_loss(pred, target, cfg)
    l_ssim = ssim(pred, target, cfg)
    ssim_part = 1 - l_ssim if cfg.ssim_term == "one_minus" else l_ssim
    return {"total": l_mse + cfg.lambda_ssim * ssim_part, "mse": l_mse, "ssim": l_ssim}


def total_loss(pred, target, cfg: LossConfig | None = None):
    """``mse + lambda * (1 - ssim)`` (or ``+ lambda * ssim`` with ``ssim_term='raw'``)."""
    return loss_terms(pred, target, cfg)["total"]


def _mse_255(p, t, data_range):
    return ((p - t) * data_range).pow(2).mean()


def psnr(pred, target, data_range: float = 255.0):
    """Peak signal-to-noise ratio in dB; identical images give ``inf``."""
    p, t, np_in = _pair(pred, target)
    mse = _mse_255(p, t, data_range)
    if mse == 0:
        return math.inf if np_in else torch.tensor(math.inf, dtype=p.dtype)
    return _out(10 * torch.log10(data_range**2 / mse), np_in)


def rmse(pred, target, data_range: float = 255.0):
    p, t, np_in = _pair(pred, target)
    return _out(torch.sqrt(_mse_255(p, t, data_range)), np_in)


@dataclass
class ImageMetrics:
    id: str
    psnr: float
    ssim: float
    rmse: float


@dataclass
class MetricsReport:
    dataset: str
    split: str
    method: str
    per_image: list = field(default_factory=list)
    ssim_mode: str = "global"

    def add(self, image_id: str, pred, target, ssim_mode: str | None = None) -> ImageMetrics:
        rec = ImageMetrics(
            image_id,
            psnr(pred, target),
            ssim(pred, target, mode=ssim_mode or self.ssim_mode),
            rmse(pred, target),
        )
        self.per_image.append(rec)
        return rec

    @property
    def aggregates(self) -> dict:
        if not self.per_image:
            return {"psnr": math.nan, "ssim": math.nan, "rmse": math.nan}
        return {
            key: float(np.mean([getattr(r, key) for r in self.per_image]))
            for key in ("psnr", "ssim", "rmse")
        }

    def to_tsv(self) -> str:
        lines = ["id\tpsnr\tssim\trmse"]
        for r in self.per_image:
            lines.append(f"{r.id}\t{r.psnr:.2f}\t{r.ssim:.2f}\t{r.rmse:.2f}")
        agg = self.aggregates
        lines.append(f"mean\t{agg['psnr']:.2f}\t{agg['ssim']:.2f}\t{agg['rmse']:.2f}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        doc = {
            "dataset": self.dataset,
            "split": self.split,
            "method": self.method,
            "ssim_mode": self.ssim_mode,
            "aggregates": self.aggregates,
            "per_image": [asdict(r) for r in self.per_image],
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        doc = json.loads(text)
        rep = cls(doc["dataset"], doc["split"], doc["method"], ssim_mode=doc.get("ssim_mode", "global"))
        rep.per_image = [ImageMetrics(**r) for r in doc["per_image"]]
        return rep


def table2(reports: list[MetricsReport], datasets=("jung", "kligler")) -> str:
    """Method rows with PSNR/SSIM/RMSE column groups per dataset, tab separated."""
    header = ["Method"] + [f"{d} {m}" for d in datasets for m in ("PSNR", "SSIM", "RMSE")]
    methods = list(dict.fromkeys(r.method for r in reports))
    rows = ["\t".join(header)]
    for method in methods:
        cells = [method]
        for d in datasets:
            match = [r for r in reports if r.method == method and r.dataset == d]
            if match:
                a = match[-1].aggregates
                cells += [f"{a['psnr']:.2f}", f"{a['ssim']:.2f}", f"{a['rmse']:.2f}"]
            else:
                cells += ["-", "-", "-"]
        rows.append("\t".join(cells))
    return "\n".join(rows) + "\n"
