"""Optimisation loop: Adam on the composite MSE + SSIM objective."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from deshadow.checkpoint import save_checkpoint
from deshadow.data import AugmentConfig, PairedSample, augment, sample_rng
from deshadow.image import to_image, to_tensor
from deshadow.metrics import LossConfig, MetricsReport, loss_terms
from deshadow.model import DocDeshadower, ModelConfig, ParamStore

log = logging.getLogger(__name__)

LOG_HEADER = "step\tl_total\tl_mse\tl_ssim\n"


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, grad_norms: dict):
        self.step = step
        self.grad_norms = grad_norms
        worst = sorted(grad_norms.items(), key=lambda kv: -kv[1] if math.isfinite(kv[1]) else -math.inf)[:5]
        detail = ", ".join(f"{k}={v:.3g}" for k, v in worst)
        super().__init__(f"non-finite loss at step {step}; largest gradient norms: {detail}")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_steps: int = 1000
    eval_every: int = 0
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    ablation: str = "full"
    augment: AugmentConfig | None = None
    grad_clip: float | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


@dataclass
class TrainState:
    step: int
    params: dict
    m: dict
    v: dict
    best_metric: float = -math.inf

    @classmethod
    def fresh(cls, params: dict) -> "TrainState":
        return cls(
            0,
            params,
            {k: torch.zeros_like(p) for k, p in params.items()},
            {k: torch.zeros_like(p) for k, p in params.items()},
        )


def adam_step(state: TrainState, grads: dict, cfg: TrainConfig) -> TrainState:
    """One bias-corrected Adam update of ``state.params`` in place."""
    t = state.step + 1
    bc1 = 1 - cfg.beta1**t
    bc2 = 1 - cfg.beta2**t
    with torch.no_grad():
        for name, p in state.params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            if g.shape != p.shape:
                raise ValueError(f"{name}: gradient shape {tuple(g.shape)} != parameter {tuple(p.shape)}")
            m = state.m[name].mul_(cfg.beta1).add_(g, alpha=1 - cfg.beta1)
            v = state.v[name].mul_(cfg.beta2).addcmul_(g, g, value=1 - cfg.beta2)
            p.sub_(cfg.lr * (m / bc1) / (torch.sqrt(v / bc2) + cfg.eps))
    state.step = t
    return state


@dataclass
class TrainResult:
    params: ParamStore
    model_cfg: ModelConfig
    log: list
    best_psnr: float
    last_checkpoint: Path | None = None
    best_checkpoint: Path | None = None

    def log_text(self) -> str:
        return LOG_HEADER + "".join(format_log_row(r) for r in self.log)


def format_log_row(row: dict) -> str:
    return f"{row['step']}\t{row['l_total']!r}\t{row['l_mse']!r}\t{row['l_ssim']!r}\n"


def evaluate_model(model: DocDeshadower, samples: list[PairedSample], ssim_mode="global") -> MetricsReport:
    report = MetricsReport("", "test", "model", ssim_mode=ssim_mode)
    model.eval()
    with torch.no_grad():
        for s in samples:
            pred = to_image(model(to_tensor(s.shadow, torch.float32)))
            report.add(s.id, pred, s.target)
    return report


def _batches(train: list[PairedSample], cfg: TrainConfig):
    """Endless, seeded stream of (epoch, sample index) batches."""
    order_rng = np.random.default_rng(cfg.seed)
    epoch = 0
    while True:
        order = order_rng.permutation(len(train))
        for i in range(0, len(order), cfg.batch_size):
            yield epoch, order[i : i + cfg.batch_size]
        epoch += 1


def _make_batch(train, idx, epoch, cfg: TrainConfig):
    shadows, targets = [], []
    for i in idx:
        s = train[i]
        if cfg.augment is not None:
            rng = sample_rng(cfg.seed, s.id, epoch)
            partner = train[int(rng.integers(len(train)))] if len(train) > 1 else None
            s = augment(s, cfg.augment, rng, partner)
        shadows.append(to_tensor(s.shadow, torch.float32))
        targets.append(to_tensor(s.target, torch.float32))
    return torch.cat(shadows), torch.cat(targets)


def train(
    cfg: TrainConfig,
    data: tuple[list[PairedSample], list[PairedSample]],
    model_cfg: ModelConfig | None = None,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Optimise a fresh model for ``cfg.max_steps`` steps.

    With ``out_dir`` the loss log (``train_log.tsv``), wall-clock timings
    (``timing.tsv``) and the ``last`` / ``best`` checkpoints are written there.
    """
    train_set, test_set = data
    if not train_set:
        raise ValueError("training set is empty")
    model_cfg = model_cfg or ModelConfig.for_ablation(cfg.ablation, seed=cfg.seed)
    torch.manual_seed(cfg.seed)
    model = DocDeshadower(model_cfg)
    params = dict(model.named_parameters())
    state = TrainState.fresh({k: p.data for k, p in params.items()})

    out = Path(out_dir) if out_dir is not None else None
    log_file = timing_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train_log.tsv", "w")
        log_file.write(LOG_HEADER)
        timing_file = open(out / "timing.tsv", "w")
        timing_file.write("step\twall_ms\n")

    rows = []
    best_psnr = -math.inf
    best_path = None
    stream = _batches(train_set, cfg)
    try:
        for step in range(cfg.max_steps):
            t0 = time.perf_counter()
            epoch, idx = next(stream)
            shadow, target = _make_batch(train_set, idx, epoch, cfg)
            model.train()
            model.zero_grad(set_to_none=True)
            terms = loss_terms(model(shadow), target, cfg.loss)
            if not torch.isfinite(terms["total"]):
                raise NonFiniteLossError(step, _grad_norms(model, terms["total"]))
            terms["total"].backward()
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            if cfg.grad_clip is not None:
                _clip(grads, cfg.grad_clip)
            if not all(torch.isfinite(g).all() for g in grads.values()):
                raise NonFiniteLossError(step, {k: float(g.norm()) for k, g in grads.items()})
            adam_step(state, grads, cfg)

            row = {
                "step": step,
                "l_total": float(terms["total"].detach()),
                "l_mse": float(terms["mse"].detach()),
                "l_ssim": float(terms["ssim"].detach()),
            }
            rows.append(row)
            if log_file is not None:
                log_file.write(format_log_row(row))
                timing_file.write(f"{step}\t{(time.perf_counter() - t0) * 1e3:.3f}\n")

            if cfg.eval_every and test_set and (step + 1) % cfg.eval_every == 0:
                score = evaluate_model(model, test_set).aggregates["psnr"]
                log.info("step %d: test PSNR %.3f dB", step + 1, score)
                if score > best_psnr:
                    best_psnr = score
                    state.best_metric = score
                    if out is not None:
                        best_path = save_checkpoint(
                            ParamStore.from_module(model),
                            model_cfg,
                            {"step": step + 1, "metrics": {"psnr": score}, "ablation": cfg.ablation},
                            out / "best",
                        ).parent
    finally:
        if log_file is not None:
            log_file.close()
            timing_file.close()

    store = ParamStore.from_module(model)
    last_path = None
    if out is not None:
        last_path = save_checkpoint(
            store, model_cfg, {"step": state.step, "ablation": cfg.ablation}, out / "last"
        ).parent
    return TrainResult(store, model_cfg, rows, best_psnr, last_path, best_path)


def _grad_norms(model, loss) -> dict:
    try:
        grads = torch.autograd.grad(loss, list(model.parameters()), allow_unused=True)
    except RuntimeError:
        return {}
    return {
        name: float(g.norm()) if g is not None else 0.0
        for (name, _), g in zip(model.named_parameters(), grads)
    }


def _clip(grads: dict, max_norm: float) -> None:
    total = math.sqrt(sum(float(g.pow(2).sum()) for g in grads.values()))
    if total > max_norm:
        for g in grads.values():
            g.mul_(max_norm / total)
