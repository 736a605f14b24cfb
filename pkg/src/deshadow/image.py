"""Image rasters: validation, file I/O and tensor conversion.

An image is an ``H x W x C`` float array with values in ``[0, 1]`` and
``C`` in ``{1, 3}``.  The network works on ``N x C x H x W`` tensors; the
helpers here move between the two layouts.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage


class ImageError(ValueError):
    """Raised for malformed rasters or unreadable image files."""


def check_image(img: np.ndarray) -> np.ndarray:
    """Validate an ``H x W x C`` raster and return it as a float array.

    A 2-D array is promoted to a single channel.
    """
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ImageError(f"expected an H x W x C array, got shape {arr.shape}")
    h, w, c = arr.shape
    if h < 1 or w < 1:
        raise ImageError(f"empty image of shape {arr.shape}")
    if c not in (1, 3):
        raise ImageError(f"channel count must be 1 or 3, got {c}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise ImageError("image contains NaN or Inf values")
    return arr


def to_tensor(img: np.ndarray, dtype: torch.dtype | None = None) -> torch.Tensor:
    """``H x W x C`` array -> ``1 x C x H x W`` tensor."""
    arr = check_image(img)
    t = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]
    return t if dtype is None else t.to(dtype)


def to_image(t: torch.Tensor) -> np.ndarray:
    """``1 x C x H x W`` (or ``C x H x W``) tensor -> ``H x W x C`` array."""
    t = t.detach()
    if t.ndim == 4:
        if t.shape[0] != 1:
            raise ImageError(f"expected a batch of one, got {t.shape[0]}")
        t = t[0]
    return t.cpu().numpy().transpose(1, 2, 0).copy()


def read_image(path: str | Path, mode: str = "RGB") -> np.ndarray:
    """Decode an 8-bit image file into a float32 raster in ``[0, 1]``."""
    path = Path(path)
    if path.suffix == ".npy":
        return check_image(np.load(path))
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert(mode), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise ImageError(f"cannot read image {path}: {exc}") from exc
    return check_image(arr)


def quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


LOSSLESS_SUFFIXES = {".png", ".npy", ".bmp", ".tif", ".tiff"}


def write_image(path: str | Path, img: np.ndarray, allow_lossy: bool = False) -> None:
    """Write a raster. ``.npy`` keeps float32 exactly; image formats get 8 bits.

    Lossy formats such as JPEG are refused unless ``allow_lossy`` is set.
    """
    path = Path(path)
    if path.suffix.lower() not in LOSSLESS_SUFFIXES and not allow_lossy:
        raise ImageError(f"refusing to write lossy or unknown format {path.suffix!r}; use .png")
    arr = check_image(img)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".npy":
        np.save(path, arr.astype(np.float32))
        return
    q = quantize(arr)
    PILImage.fromarray(q[:, :, 0] if q.shape[2] == 1 else q).save(path)


def side_by_side(images: list[np.ndarray], gap: int = 4) -> np.ndarray:
    """Concatenate equally tall rasters horizontally with a white gutter."""
    imgs = [check_image(im) for im in images]
    c = max(im.shape[2] for im in imgs)
    imgs = [np.repeat(im, 3, axis=2) if im.shape[2] < c else im for im in imgs]
    h = imgs[0].shape[0]
    if any(im.shape[0] != h for im in imgs):
        raise ImageError("side_by_side needs images of equal height")
    spacer = np.ones((h, gap, c), dtype=np.float32)
    parts = []
    for i, im in enumerate(imgs):
        if i:
            parts.append(spacer)
        parts.append(im.astype(np.float32))
    return np.concatenate(parts, axis=1)
