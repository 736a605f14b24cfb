"""Synthetic shadowed pages shared by the demo scripts."""

import numpy as np
from PIL import Image

from deshadow.data import PairedSample


def page(size=128, seed=0):
    rng = np.random.default_rng(seed)
    paper = np.full((size, size), 0.92)
    for _ in range(size // 6):
        r = rng.integers(2, size - 3)
        c0 = rng.integers(0, size // 2)
        paper[r : r + 2, c0 : c0 + rng.integers(size // 6, size // 2)] = 0.15
    yy, xx = np.mgrid[0:size, 0:size] / size
    shade = 0.45 + 0.55 / (1 + np.exp(-(xx + 0.4 * yy - 0.6) * 12))
    target = np.repeat(paper[:, :, None], 3, axis=2)
    shadow = target * shade[:, :, None] * np.array([1.0, 0.95, 0.85])
    return PairedSample(shadow.astype(np.float32), target.astype(np.float32), f"page{seed}")


def write_dataset(root, name="jung", n_train=4, n_test=2, size=64):
    for split, n in (("train", n_train), ("test", n_test)):
        for i in range(n):
            s = page(size, i + (100 if split == "test" else 0))
            for kind, img in (("shadow", s.shadow), ("target", s.target)):
                path = root / name / split / kind / f"img{i:02d}.png"
                path.parent.mkdir(parents=True, exist_ok=True)
                Image.fromarray((img * 255).round().astype(np.uint8)).save(path)
    return root
