"""Paired shadow/target datasets and the augmentation stack.

Expected layout (stems must match between ``shadow`` and ``target``)::

    <root>/<name>/train/shadow/*.png   <root>/<name>/train/target/*.png
    <root>/<name>/test/shadow/*.png    <root>/<name>/test/target/*.png

A ``<root>/<name>/<split>.txt`` index file, one ``shadow<TAB>target`` pair per
line (paths relative to the dataset directory), overrides the folder scan.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

from deshadow.image import ImageError, check_image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}

# training / testing pair counts of the public releases
EXPECTED_SPLITS = {"jung": (60, 27), "kligler": (272, 28)}
CANONICAL_SIZE = 512


class DatasetError(Exception):
    pass


class DatasetEmptyError(DatasetError):
    pass


class MissingPairError(DatasetError):
    def __init__(self, split: str, orphans: list[str]):
        self.orphans = orphans
        super().__init__(f"{split}: unpaired stems {', '.join(orphans)}")


class UnreadableImageError(DatasetError):
    pass


@dataclass
class PairedSample:
    shadow: np.ndarray
    target: np.ndarray
    id: str

    def __post_init__(self):
        if self.shadow.shape != self.target.shape:
            raise DatasetError(
                f"{self.id}: shadow {self.shadow.shape} and target {self.target.shape} differ in size"
            )


def _decode(path: Path, size: int | None) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            im = im.convert("RGB")
            if size is not None and im.size != (size, size):
                im = im.resize((size, size), PILImage.BICUBIC)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise UnreadableImageError(f"cannot decode {path}: {exc}") from exc
    try:
        return check_image(arr)
    except ImageError as exc:
        raise UnreadableImageError(f"{path}: {exc}") from exc


def _scan(folder: Path) -> dict[str, Path]:
    if not folder.is_dir():
        return {}
    return {p.stem: p for p in sorted(folder.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def _pairs(ds_dir: Path, split: str) -> list[tuple[str, Path, Path]]:
    index = ds_dir / f"{split}.txt"
    if index.is_file():
        pairs = []
        for n, line in enumerate(index.read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DatasetError(f"{index}:{n}: expected 'shadow<TAB>target'")
            s, t = (ds_dir / p.strip() for p in parts)
            pairs.append((Path(parts[0].strip()).stem, s, t))
        return pairs
    shadows = _scan(ds_dir / split / "shadow")
    targets = _scan(ds_dir / split / "target")
    orphans = sorted(set(shadows) ^ set(targets))
    if orphans:
        raise MissingPairError(split, orphans)
    return [(stem, shadows[stem], targets[stem]) for stem in sorted(shadows)]


def dataset_dir(root, name: str) -> Path:
    root = Path(root)
    return root / name if (root / name).is_dir() else root


def load_split(root, name: str, split: str, size: int | None = CANONICAL_SIZE) -> list[PairedSample]:
    ds = dataset_dir(root, name)
    samples = []
    for stem, s, t in _pairs(ds, split):
        for p in (s, t):
            if not p.is_file():
                raise UnreadableImageError(f"missing file {p}")
        samples.append(PairedSample(_decode(s, size), _decode(t, size), stem))
    return samples


def load_dataset(root, name: str, size: int | None = CANONICAL_SIZE):
    """Return ``(train, test)`` lists of :class:`PairedSample`."""
    if name not in EXPECTED_SPLITS:
        raise DatasetError(f"unknown dataset {name!r}; choose from {sorted(EXPECTED_SPLITS)}")
    train = load_split(root, name, "train", size)
    test = load_split(root, name, "test", size)
    if not train and not test:
        raise DatasetEmptyError(f"no image pairs found for {name!r} under {root}")
    expected = EXPECTED_SPLITS[name]
    if (len(train), len(test)) != expected:
        log.warning(
            "%s: found %d/%d train/test pairs, the public release has %d/%d",
            name, len(train), len(test), *expected,
        )
    return train, test


@dataclass
class AugmentConfig:
    crop_size: int | None = 256
    flip_prob: float = 0.5
    mixup_alpha: float = 0.2
    mixup_prob: float = 0.5
    brightness_jitter: tuple = (0.8, 1.2)
    saturation_jitter: tuple = (0.8, 1.2)
    resize_scales: tuple = (0.75, 1.25)
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("flip_prob", "mixup_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.mixup_alpha < 0:
            raise ValueError("mixup_alpha must be non-negative")

    @classmethod
    def identity(cls, crop_size: int | None = None) -> "AugmentConfig":
        return cls(crop_size, 0.0, 0.0, 0.0, (1.0, 1.0), (1.0, 1.0), (1.0, 1.0))


def sample_rng(seed: int, sample_id: str, epoch: int = 0) -> np.random.Generator:
    """Independent stream per (seed, sample, epoch), stable across processes."""
    return np.random.default_rng([seed, epoch, zlib.crc32(sample_id.encode())])


def _resize(img: np.ndarray, h: int, w: int) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None]
    out = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    return out[0].numpy().transpose(1, 2, 0)


def hflip(sample: PairedSample) -> PairedSample:
    return replace(sample, shadow=sample.shadow[:, ::-1].copy(), target=sample.target[:, ::-1].copy())


def vflip(sample: PairedSample) -> PairedSample:
    return replace(sample, shadow=sample.shadow[::-1].copy(), target=sample.target[::-1].copy())


def mixup(a: PairedSample, b: PairedSample, lam: float) -> PairedSample:
    """Blend two samples with one coefficient shared by shadow and target."""
    return PairedSample(
        lam * a.shadow + (1 - lam) * b.shadow,
        lam * a.target + (1 - lam) * b.target,
        f"{a.id}+{b.id}",
    )


def _geometric(sample: PairedSample, cfg: AugmentConfig, rng: np.random.Generator) -> PairedSample:
    shadow, target = sample.shadow, sample.target
    h, w = shadow.shape[:2]
    crop = cfg.crop_size
    if crop is not None and crop > min(h, w):
        raise ValueError(f"crop size {crop} exceeds image size {h}x{w}")
    lo, hi = cfg.resize_scales
    scale = rng.uniform(lo, hi) if hi > lo else lo
    if scale != 1.0:
        nh, nw = round(h * scale), round(w * scale)
        if crop is not None:
            nh, nw = max(nh, crop), max(nw, crop)
        shadow, target = _resize(shadow, nh, nw), _resize(target, nh, nw)
        h, w = nh, nw
    if crop is not None:
        top = int(rng.integers(0, h - crop + 1))
        left = int(rng.integers(0, w - crop + 1))
        shadow = shadow[top : top + crop, left : left + crop]
        target = target[top : top + crop, left : left + crop]
    out = PairedSample(shadow.copy(), target.copy(), sample.id)
    if rng.random() < cfg.flip_prob:
        out = hflip(out)
    if rng.random() < cfg.flip_prob:
        out = vflip(out)
    return out


def _photometric(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    lo, hi = cfg.brightness_jitter
    b = rng.uniform(lo, hi) if hi > lo else lo
    lo, hi = cfg.saturation_jitter
    s = rng.uniform(lo, hi) if hi > lo else lo
    if b != 1.0:
        img = img * b
    if s != 1.0 and img.shape[2] == 3:
        gray = img @ np.array([0.299, 0.587, 0.114], dtype=img.dtype)
        img = gray[..., None] + s * (img - gray[..., None])
    return img


def augment(
    sample: PairedSample,
    cfg: AugmentConfig,
    rng: np.random.Generator,
    partner: PairedSample | None = None,
) -> PairedSample:
    """Randomly resize, crop and flip both images alike; jitter the shadow only.

    When ``partner`` is given the result may be mixed with it using a
    ``Beta(alpha, alpha)`` coefficient.
    """
    out = _geometric(sample, cfg, rng)
    if partner is not None and cfg.mixup_alpha > 0 and rng.random() < cfg.mixup_prob:
        other = _geometric(partner, cfg, rng)
        if other.shadow.shape == out.shadow.shape:
            lam = float(rng.beta(cfg.mixup_alpha, cfg.mixup_alpha))
            out = replace(mixup(out, other, lam), id=sample.id)
    shadow = _photometric(out.shadow, cfg, rng)
    return PairedSample(
        np.clip(shadow, 0.0, 1.0).astype(np.float32),
        np.clip(out.target, 0.0, 1.0).astype(np.float32),
        out.id,
    )
