import math

import numpy as np
import pytest
import torch
from PIL import Image

from deshadow.data import PairedSample
from deshadow.model import ModelConfig


def gelu(x):
    return 0.5 * x * (1 + np.vectorize(math.erf)(x / math.sqrt(2)))


def sigmoid(x):
    return 1 / (1 + np.exp(-x))


def softmax(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def document_pair(size=64, seed=0, channels=3):
    """Synthetic page: light paper with dark strokes, darkened by a soft shadow."""
    rng = np.random.default_rng(seed)
    page = np.full((size, size), 0.92)
    for _ in range(size // 6):
        r = rng.integers(2, size - 3)
        c0 = rng.integers(0, size // 2)
        page[r : r + 2, c0 : c0 + rng.integers(size // 6, size // 2)] = 0.15
    yy, xx = np.mgrid[0:size, 0:size] / size
    shade = 0.45 + 0.55 / (1 + np.exp(-(xx + 0.4 * yy - 0.6) * 12))
    tint = np.array([1.0, 0.95, 0.85])[:channels]
    target = np.repeat(page[:, :, None], channels, axis=2)
    shadow = target * shade[:, :, None] * tint
    return PairedSample(shadow.astype(np.float32), target.astype(np.float32), f"page{seed}")


def save_png(path, arr):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.clip(arr, 0, 1) * 255).round().astype(np.uint8)).save(path)


def make_dataset(root, name="jung", n_train=3, n_test=2, size=24):
    """Write a small shadow/target dataset in the on-disk layout."""
    for split, n in (("train", n_train), ("test", n_test)):
        for i in range(n):
            s = document_pair(size, seed=i + (100 if split == "test" else 0))
            save_png(root / name / split / "shadow" / f"img{i:02d}.png", s.shadow)
            save_png(root / name / split / "target" / f"img{i:02d}.png", s.target)
    return root


@pytest.fixture
def pair64():
    return document_pair(64, 0)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def conv_count(cin, cout, k):
    return cout * cin * k * k + cout


def branch_param_counts(cfg: ModelConfig):
    """Parameter totals of each branch, from the layer recipe alone."""
    c, f, r, e = cfg.image_channels, cfg.feature_channels, cfg.mlp_ratio, cfg.ffn_expansion
    groups = 1 + len(cfg.spp_pools)
    aan = (
        conv_count(c, f, 3)
        + 2 * f + conv_count(f, f, 3)
        + cfg.maa_stages * conv_count(f, f, 3)
        + conv_count(f, r * f, 1) + conv_count(r * f, f, 1)
        + conv_count(f, groups, 1) + conv_count(groups * f, f, 1)
        + conv_count(2 * f, c, 3)
    )
    linear = f * f + f
    gmft_level = (
        conv_count(c, f, 3)
        + 2 * conv_count(f, f, 3)
        + cfg.gia_blocks * (f * f + f)
        + conv_count(f, 2 * f, 1)
        + linear
        + 2 * (2 * f + 4 * linear)
        + cfg.attention_heads
        + 2 * conv_count(f, e * f, 1) + conv_count(e * f, f, 1)
        + conv_count(f, c, 3)
    )
    return aan, cfg.levels * gmft_level


_VERDICTS = []


@pytest.fixture
def verdict():
    """Record and print one acceptance line: ``verdict(n, title, ok, detail)``."""

    def record(number, title, ok, detail=""):
        status = ok if isinstance(ok, str) else ("PASS" if ok else "FAIL")
        line = f"[{status}] {number}. {title}" + (f": {detail}" if detail else "")
        _VERDICTS.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
