"""Synthetic desk-scale dataset: one coarse shape plus one fine glyph per image.

Each image carries two labels over the same pixels: the shape class (a large
smooth object, the predefined task) and the glyph class (a small
high-frequency texture patch that does not survive context-level blur). The
two label columns are written as separate `path,label` manifests per split.
"""

from __future__ import annotations

import csv
import os

import numpy as np
from PIL import Image as PILImage

SHAPE_NAMES = ("circle", "square", "triangle", "cross")
GLYPH_NAMES = ("hstripes", "vstripes", "checker", "rings")

_PALETTE = np.array(
    [
        [230, 60, 60],
        [60, 200, 80],
        [70, 110, 235],
        [235, 200, 50],
        [200, 70, 220],
        [60, 210, 210],
    ],
    dtype=np.float64,
)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    base = rng.uniform(40, 110, size=3)
    gx = rng.uniform(-60, 60, size=3)
    gy = rng.uniform(-60, 60, size=3)
    img = base[None, None, :] + gx[None, None, :] * xx[..., None] + gy[None, None, :] * yy[..., None]
    img += rng.normal(0, 4.0, size=img.shape)
    return img


def _draw_shape(img, rng, shape_id: int) -> tuple[int, int, int, int]:
    size = img.shape[0]
    s = rng.integers(20, 28)
    cy = rng.integers(s // 2 + 2, size - s // 2 - 2)
    cx = rng.integers(s // 2 + 2, size - s // 2 - 2)
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    if shape_id == 0:
        mask = dy**2 + dx**2 < (s / 2) ** 2
    elif shape_id == 1:
        mask = np.maximum(np.abs(dy), np.abs(dx)) < s / 2
    elif shape_id == 2:
        mask = (dy > -s / 2) & (dy < s / 2) & (np.abs(dx) < (dy + s / 2) / 2)
    else:
        arm = s / 6
        mask = ((np.abs(dx) < arm) | (np.abs(dy) < arm)) & (
            np.maximum(np.abs(dy), np.abs(dx)) < s / 2
        )
    color = _PALETTE[rng.integers(0, len(_PALETTE))]
    img[mask] = color
    half = int(np.ceil(s / 2))
    return (cy - half, cx - half, cy + half, cx + half)


def _draw_glyph(
    img, rng, glyph_id: int, avoid: tuple[int, int, int, int], box: int = 12
) -> None:
    size = img.shape[0]
    # keep the glyph clear of the shape so neither label gets corrupted
    for _ in range(100):
        gy = int(rng.integers(1, size - box - 1))
        gx = int(rng.integers(1, size - box - 1))
        if gy + box <= avoid[0] or gy >= avoid[2] or gx + box <= avoid[1] or gx >= avoid[3]:
            break
    yy, xx = np.mgrid[0:box, 0:box]
    if glyph_id == 0:
        pat = (yy // 2) % 2
    elif glyph_id == 1:
        pat = (xx // 2) % 2
    elif glyph_id == 2:
        pat = ((yy // 2) + (xx // 2)) % 2
    else:
        c = (box - 1) / 2.0
        r = np.sqrt((yy - c) ** 2 + (xx - c) ** 2)
        pat = (r.astype(int) // 2) % 2
    patch = np.where(pat[..., None] == 1, 245.0, 15.0)
    img[gy : gy + box, gx : gx + box] = patch


def render(rng: np.random.Generator, size: int, shape_id: int, glyph_id: int) -> np.ndarray:
    img = _background(rng, size)
    bbox = _draw_shape(img, rng, shape_id)
    _draw_glyph(img, rng, glyph_id, bbox)
    return np.clip(img, 0, 255).astype(np.uint8)


def generate_dataset(
    out_dir: str,
    n_train: int = 640,
    n_val: int = 128,
    n_test: int = 160,
    size: int = 64,
    seed: int = 0,
) -> dict[str, dict[str, str]]:
    """Write PNGs plus shape/glyph manifests; returns manifest paths per split."""
    rng = np.random.default_rng(seed)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    manifests: dict[str, dict[str, str]] = {}
    for split, count in (("train", n_train), ("val", n_val), ("test", n_test)):
        rows = []
        for i in range(count):
            shape_id = int(rng.integers(0, len(SHAPE_NAMES)))
            glyph_id = int(rng.integers(0, len(GLYPH_NAMES)))
            arr = render(rng, size, shape_id, glyph_id)
            rel = os.path.join("images", f"{split}_{i:05d}.png")
            PILImage.fromarray(arr).save(os.path.join(out_dir, rel))
            rows.append((rel, shape_id, glyph_id))
        manifests[split] = {}
        for task, col in (("shape", 1), ("glyph", 2)):
            path = os.path.join(out_dir, f"{split}_{task}.csv")
            with open(path, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(["path", "label"])
                for row in rows:
                    writer.writerow([row[0], row[col]])
            manifests[split][task] = path
    return manifests
