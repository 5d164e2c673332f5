"""Image ingestion and deterministic resampling primitives.

All pixel data lives in [-1, 1] as float32 arrays of shape (C, H, W).
Resampling is bicubic with a Catmull-Rom kernel (a = -0.5) and
half-pixel center alignment; the same kernel is used for loading,
downsampling and upsampling so transmitter and receiver agree bit-exactly.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError

from .errors import DimensionError, IngestionError

_CUBIC_A = -0.5


@dataclass(frozen=True)
class Image:
    """An RGB image, channels-first, values in [-1, 1]."""

    pixels: np.ndarray  # (C, H, W) float32

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3:
            raise DimensionError(f"expected (C, H, W) array, got shape {p.shape}")
        if p.dtype != np.float32:
            object.__setattr__(self, "pixels", p.astype(np.float32))

    @property
    def channels(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]


@dataclass
class LabeledDataset:
    """Classification items as (image path, label) pairs for one split."""

    items: list[tuple[str, int]]
    class_count: int
    split: str = "train"

    def __post_init__(self):
        for path, label in self.items:
            if not 0 <= label < self.class_count:
                raise IngestionError(
                    f"label {label} for {path!r} outside [0, {self.class_count})"
                )

    def __len__(self) -> int:
        return len(self.items)


def load_manifest(manifest_path: str, class_count: int, split: str = "train") -> LabeledDataset:
    """Read a `path,label` CSV manifest; paths are relative to the manifest."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    items = []
    try:
        with open(manifest_path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["path", "label"]:
                raise IngestionError(
                    f"{manifest_path}: expected header 'path,label', got {reader.fieldnames}"
                )
            for row in reader:
                items.append((os.path.join(base, row["path"]), int(row["label"])))
    except OSError as exc:
        raise IngestionError(f"cannot read manifest {manifest_path}: {exc}") from exc
    return LabeledDataset(items=items, class_count=class_count, split=split)


def _cubic_weight(t: np.ndarray) -> np.ndarray:
    a = _CUBIC_A
    t = np.abs(t)
    w = np.where(
        t <= 1.0,
        (a + 2.0) * t**3 - (a + 3.0) * t**2 + 1.0,
        np.where(t < 2.0, a * t**3 - 5.0 * a * t**2 + 8.0 * a * t - 4.0 * a, 0.0),
    )
    return w


def _resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) bicubic interpolation matrix, edge-replicated.

    Output center i maps to source coordinate (i + 0.5) * n_in / n_out - 0.5.
    """
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    base = np.floor(src).astype(int)
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    for k in range(-1, 3):
        idx = base + k
        w = _cubic_weight(src - idx)
        idx = np.clip(idx, 0, n_in - 1)
        np.add.at(mat, (np.arange(n_out), idx), w)
    # kernel is a partition of unity; renormalize to kill rounding drift
    mat /= mat.sum(axis=1, keepdims=True)
    return mat


def resize(x: Image, target_h: int, target_w: int) -> Image:
    """Bicubic resize to an arbitrary target shape, clamped to [-1, 1]."""
    if target_h < 1 or target_w < 1:
        raise DimensionError(f"invalid target shape {target_h}x{target_w}")
    if (target_h, target_w) == (x.height, x.width):
        return x
    wr = _resample_matrix(x.height, target_h)
    wc = _resample_matrix(x.width, target_w)
    pix = x.pixels.astype(np.float64)
    out = np.einsum("oi,cij,pj->cop", wr, pix, wc)
    return Image(np.clip(out, -1.0, 1.0).astype(np.float32))


def downsample(x: Image, f: int) -> Image:
    """Bicubic downsample by an integer factor; f=1 is the identity."""
    if f < 1:
        raise DimensionError(f"factor must be >= 1, got {f}")
    if f == 1:
        return x
    if x.height % f or x.width % f:
        raise DimensionError(
            f"image {x.height}x{x.width} not divisible by factor {f}"
        )
    return resize(x, x.height // f, x.width // f)


def upsample(x: Image, f: int) -> Image:
    """Bicubic upsample by an integer factor; f=1 is the identity."""
    if f < 1:
        raise DimensionError(f"factor must be >= 1, got {f}")
    if f == 1:
        return x
    return resize(x, x.height * f, x.width * f)


def from_uint8(arr: np.ndarray) -> Image:
    """Map uint8 HWC or CHW pixel data linearly from [0, 255] to [-1, 1]."""
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    if arr.shape[-1] in (3, 4) and arr.ndim == 3:
        arr = arr[..., :3].transpose(2, 0, 1)
    pix = arr.astype(np.float32) / 255.0 * 2.0 - 1.0
    return Image(pix)


def to_uint8(x: Image) -> np.ndarray:
    """Inverse of from_uint8: (H, W, C) uint8 with rounding."""
    pix = (np.clip(x.pixels, -1.0, 1.0) + 1.0) / 2.0 * 255.0
    return np.round(pix).astype(np.uint8).transpose(1, 2, 0)


def load_image(path: str, target_h: int, target_w: int) -> Image:
    """Load a PNG/JPEG file, convert to RGB, bicubic-resize to target."""
    try:
        with PILImage.open(path) as img:
            arr = np.asarray(img.convert("RGB"))
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise IngestionError(f"cannot decode image {path!r}: {exc}") from exc
    x = from_uint8(arr)
    x = resize(x, target_h, target_w)
    if (x.height, x.width) != (target_h, target_w):
        raise DimensionError(
            f"{path!r}: got {x.height}x{x.width}, wanted {target_h}x{target_w}"
        )
    return x
