"""Central finite-difference checks of every block's analytic gradient.

Each check builds a small float64 instance with randomised weights (output
heads included, so no path is trivially zero), contracts the block output
with a fixed random tensor to get a scalar, and compares autograd against
``(f(x + h) - f(x - h)) / 2h`` on sampled coordinates of every input and
parameter tensor.  A block's error is ``|a - n| / max(|a|, |n|)`` in the
Euclidean norm over all its sampled coordinates; the tensor contributing
the largest discrepancy is reported alongside.  A coordinate whose +-h
probes land on different sides of a ReLU or clamp corner is redrawn, since
the difference quotient is meaningless across the corner.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn

from deshadow.aan import AAN, CNRBranch, MAABlock, CnrParams, cnr_block
from deshadow.gmft import (
    BMT,
    DGFN,
    GIA,
    GMFT,
    ChannelAttention,
    ResBlock,
    _Projections,
    self_attention,
    simple_gate,
)
from deshadow.layers import fan_in_uniform_, record_kinks
from deshadow.metrics import LossConfig, total_loss
from deshadow.model import DocDeshadower, ModelConfig
from deshadow.pyramid import max_levels

TOLERANCE = 1e-3
STEP = 1e-3
BLOCKS = (
    "CNR", "MAA", "AAN", "ResBlock", "GIA", "SimpleGate", "ChannelAttention",
    "SelfAttention", "BMT", "DGFN", "GMFT", "Loss", "EndToEnd",
)


@dataclass
class BlockResult:
    name: str
    worst_error: float
    worst_tensor: str
    checked: int
    passed: bool
    skipped: int = 0


@dataclass
class GradcheckReport:
    results: list = field(default_factory=list)
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def to_text(self) -> str:
        lines = [f"{'block':<18}{'rel err':>11}  {'coords':>6}  {'kinks':>5}  status  worst tensor"]
        for r in self.results:
            status = "PASS" if r.passed else "FAIL"
            lines.append(
                f"{r.name:<18}{r.worst_error:>11.3e}  {r.checked:>6}  {r.skipped:>5}  {status:<6}  {r.worst_tensor}"
            )
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'} (tolerance {self.tolerance:g})")
        return "\n".join(lines) + "\n"


def finite_difference(f, tensor: torch.Tensor, index: tuple, h: float = STEP) -> float | None:
    """Central difference of scalar ``f()`` w.r.t. one entry of ``tensor``.

    Returns ``None`` when the two probes see different ReLU/clamp patterns.
    """
    with torch.no_grad():
        orig = tensor[index].item()
        tensor[index] = orig + h
        with record_kinks() as up_pattern:
            up = float(f())
        tensor[index] = orig - h
        with record_kinks() as down_pattern:
            down = float(f())
        tensor[index] = orig
    if any(not torch.equal(a, b) for a, b in zip(up_pattern, down_pattern)):
        return None
    return (up - down) / (2 * h)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(
    name: str,
    f,
    tensors: dict,
    rng: np.random.Generator,
    samples: int = 6,
    h: float = STEP,
    corrupt: bool = False,
    tolerance: float = TOLERANCE,
) -> BlockResult:
    items = list(tensors.items())
    for _, t in items:
        t.requires_grad_(True)
    analytic = torch.autograd.grad(f(), [t for _, t in items], allow_unused=True)
    all_a, all_n = [], []
    worst_gap, worst_name = -1.0, ""
    skipped = 0
    for (tname, t), g in zip(items, analytic):
        g = torch.zeros_like(t) if g is None else g.detach()
        if corrupt:
            g = g * 1.1 + 1e-3
        want = min(samples, t.numel())
        a, n = [], []
        for i in rng.permutation(t.numel()):
            if len(a) == want:
                break
            c = np.unravel_index(int(i), tuple(t.shape))
            d = finite_difference(f, t.data, c, h)
            if d is None:
                skipped += 1
                continue
            a.append(g[c].item())
            n.append(d)
        a, n = np.array(a), np.array(n)
        gap = float(np.linalg.norm(a - n))
        if gap > worst_gap:
            worst_gap, worst_name = gap, tname
        all_a.append(a)
        all_n.append(n)
    a, n = np.concatenate(all_a), np.concatenate(all_n)
    err = relative_error(a, n)
    return BlockResult(name, err, worst_name, len(a), err < tolerance, skipped)


def randomize(module: nn.Module, gen: torch.Generator, head_scale: float = 1.0) -> nn.Module:
    """Random weights for a check instance.

    Weights are variance preserving and biases O(1), so features deep in a
    block do not shrink toward the normalisation epsilon, where curvature
    swamps a 1e-3 difference step.
    """
    with torch.no_grad():
        for pname, p in module.named_parameters():
            if p.ndim >= 2:
                fan_in_uniform_(p, gen, head_scale if "head" in pname else 1.0)
            else:
                noise = torch.rand(p.shape, generator=gen, dtype=torch.float64) - 0.5
                base = 1.0 if pname.endswith(("gamma", "norm1.weight", "norm2.weight", "ca.bias", "temperature")) else 0.0
                p.copy_((base + noise * (0.5 if base else 1.0)).to(p.dtype))
    return module


def _contract(out: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    return torch.randn(out.shape, generator=gen, dtype=out.dtype)


def _module_case(module, x, gen):
    module = module.double()
    r = _contract(module(x), gen)
    call = lambda: module(x)  # noqa: E731
    tensors = {"input": x, **dict(module.named_parameters())}
    return (lambda: (call() * r).sum()), tensors


def _rand(gen, *shape, lo=0.0, hi=1.0):
    return lo + (hi - lo) * torch.rand(shape, generator=gen, dtype=torch.float64)


def _cases(cfg: ModelConfig, size: int):
    c = 4
    return {
        "CNR": lambda gen: _cnr_case(gen),
        "MAA": lambda gen: _module_case(randomize(MAABlock(c, 3, cfg.spp_pools), gen), _rand(gen, 1, c, 8, 8, lo=-1), gen),
        "AAN": lambda gen: _module_case(randomize(AAN(1, c, 3, cfg.spp_pools), gen), _rand(gen, 1, 1, 8, 8), gen),
        "ResBlock": lambda gen: _module_case(randomize(ResBlock(c), gen), _rand(gen, 1, c, 6, 6, lo=-1), gen),
        "GIA": lambda gen: _module_case(randomize(GIA(c), gen), _rand(gen, 1, c, 6, 6, lo=-1), gen),
        "SimpleGate": lambda gen: _simple_gate_case(gen),
        "ChannelAttention": lambda gen: _module_case(
            randomize(ChannelAttention(c), gen), _rand(gen, 1, c, 6, 6, lo=-1), gen
        ),
        "SelfAttention": lambda gen: _attention_case(gen),
        "BMT": lambda gen: _bmt_case(gen),
        "DGFN": lambda gen: _module_case(randomize(DGFN(c, 2), gen), _rand(gen, 1, c, 6, 6, lo=-1), gen),
        "GMFT": lambda gen: _module_case(
            randomize(GMFT(1, c, 2, 2, 2, window=4), gen), _rand(gen, 1, 1, 8, 8, lo=-0.5, hi=0.5), gen
        ),
        "Loss": lambda gen: _loss_case(gen),
        "EndToEnd": lambda gen: _end_to_end_case(cfg, gen, size),
    }


def _cnr_case(gen):
    x = _rand(gen, 1, 4, 6, 6, lo=-1)
    gamma = _rand(gen, 4, lo=0.5, hi=1.5)
    beta = _rand(gen, 4, lo=-0.5, hi=0.5)
    r = torch.randn(x.shape, generator=gen, dtype=torch.float64)
    return (lambda: (cnr_block(x, CnrParams(gamma, beta)) * r).sum()), {"input": x, "gamma": gamma, "beta": beta}


def _simple_gate_case(gen):
    x = _rand(gen, 1, 4, 6, 6, lo=-1)
    r = torch.randn(1, 2, 6, 6, generator=gen, dtype=torch.float64)
    return (lambda: (simple_gate(x) * r).sum()), {"input": x}


def _attention_case(gen):
    proj = randomize(_Projections(4, 2), gen).double()
    x = _rand(gen, 1, 5, 4, lo=-1)
    r = torch.randn(1, 5, 4, generator=gen, dtype=torch.float64)
    return (lambda: (self_attention(x, proj.params()) * r).sum()), {"input": x, **dict(proj.named_parameters())}


def _bmt_case(gen):
    block = randomize(BMT(4, 2), gen).double()
    x = _rand(gen, 1, 4, 6, 6, lo=-1)
    r = torch.randn(x.shape, generator=gen, dtype=torch.float64)

    def f():
        return ((block(x, window=4) + block(x, window=None)) * r).sum()

    return f, {"input": x, **dict(block.named_parameters())}


def _loss_case(gen):
    pred = _rand(gen, 1, 3, 8, 8)
    target = _rand(gen, 1, 3, 8, 8)
    cfg = LossConfig()
    return (lambda: total_loss(pred, target, cfg)), {"pred": pred}


def _end_to_end_case(cfg: ModelConfig, gen, size):
    levels = min(cfg.levels, max_levels(size, size))
    cfg = replace(cfg, levels=levels)
    model = randomize(DocDeshadower(cfg), gen, head_scale=0.1).double()
    # keep the prediction clear of the output clamp so few probes hit its corners
    x = _rand(gen, 1, cfg.image_channels, size, size, lo=0.2, hi=0.8)
    target = _rand(gen, 1, cfg.image_channels, size, size)
    loss_cfg = LossConfig()
    return (lambda: total_loss(model(x), target, loss_cfg)), {"input": x, **dict(model.named_parameters())}


def gradcheck(
    model_cfg: ModelConfig | None = None,
    seed: int = 0,
    corrupt: str | None = None,
    size: int = 16,
    samples: int = 6,
    blocks=None,
) -> GradcheckReport:
    """Run every block check; ``corrupt`` names a block whose gradient is spoiled."""
    cfg = model_cfg or ModelConfig()
    if corrupt is not None and corrupt not in BLOCKS:
        raise ValueError(f"unknown block {corrupt!r}; choose from {BLOCKS}")
    report = GradcheckReport()
    for name, build in _cases(cfg, size).items():
        if blocks is not None and name not in blocks:
            continue
        k = BLOCKS.index(name)
        f, tensors = build(torch.Generator().manual_seed(seed * 1000 + k))
        rng = np.random.default_rng([seed, k])
        report.results.append(
            check_gradients(name, f, tensors, rng, samples=samples, corrupt=(name == corrupt))
        )
    return report
