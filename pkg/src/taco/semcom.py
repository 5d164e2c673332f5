"""Context generation, latent fusion, rate accounting, and the local
semantic feedback (LSF) controller.

The transmitter and receiver share one codec, so the transmitter can run the
receiver's exact reconstruction path locally and pick the cheapest payload
whose downstream prediction is unchanged. All rates are payload bits of
fixed-width codebook indices; 1 KB = 1024 bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .codec import CodecModel, LatentGrid, decode, encode
from .errors import DimensionError, ProtocolError
from .imagecore import Image, downsample, upsample
from .saliency import ImportanceGrid, TaskModel, predict, select_top_p

DEFAULT_SEARCH_SET = (10, 20, 30, 50, 70, 90, 100)


@dataclass(frozen=True)
class ContextBundle:
    """The quantized latent of the f_ctx-downsampled image."""

    z_c: LatentGrid
    f_ctx: int


@dataclass(frozen=True)
class FusionMask:
    """Binary grid: 1 where the receiver takes transmitted image-latent cells."""

    mask: np.ndarray  # (h, w) uint8
    selected: tuple[tuple[int, int], ...]

    def __post_init__(self):
        m = self.mask
        if m.dtype != np.uint8:
            object.__setattr__(self, "mask", m.astype(np.uint8))


@dataclass(frozen=True)
class RateGeometry:
    grid_h: int
    grid_w: int
    ctx_h: int
    ctx_w: int

    @classmethod
    def from_image(cls, height: int, width: int, f_model: int, f_ctx: int) -> "RateGeometry":
        if height % (f_model * f_ctx) or width % (f_model * f_ctx):
            raise DimensionError(
                f"{height}x{width} not divisible by f_model*f_ctx={f_model * f_ctx}"
            )
        return cls(
            grid_h=height // f_model,
            grid_w=width // f_model,
            ctx_h=height // (f_model * f_ctx),
            ctx_w=width // (f_model * f_ctx),
        )


@dataclass(frozen=True)
class LsfDecision:
    mode: str  # context_only | context_plus_task | full_latent
    p: float | None
    rate_bits: int
    compatible: bool
    selected: tuple[tuple[int, int], ...] = ()


@dataclass(frozen=True)
class RateReport:
    r_c_bits: int
    r_i_bits: int
    r_bits: int

    @staticmethod
    def _kb(bits: int) -> float:
        return bits / 8.0 / 1024.0

    @property
    def r_c_kb(self) -> float:
        return self._kb(self.r_c_bits)

    @property
    def r_i_kb(self) -> float:
        return self._kb(self.r_i_bits)

    @property
    def r_kb(self) -> float:
        return self._kb(self.r_bits)


def bits_per_index(codebook_size: int) -> int:
    return max(1, math.ceil(math.log2(codebook_size)))


def position_payload_bits(grid_h: int, grid_w: int, count: int) -> tuple[int, str]:
    """Cheaper of list vs bitmap position encodings, with the chosen mode.

    List: 16-bit count plus ceil(log2(h*w)) bits per cell. Bitmap: h*w bits.
    The one-byte mode marker is control plane and excluded from rates.
    """
    cell_bits = max(1, math.ceil(math.log2(grid_h * grid_w)))
    list_bits = 16 + count * cell_bits
    bitmap_bits = grid_h * grid_w
    if list_bits <= bitmap_bits:
        return list_bits, "list"
    return bitmap_bits, "bitmap"


def context_rate_bits(geom: RateGeometry, codebook_size: int) -> int:
    return geom.ctx_h * geom.ctx_w * bits_per_index(codebook_size)


def full_latent_rate_bits(geom: RateGeometry, codebook_size: int) -> int:
    return geom.grid_h * geom.grid_w * bits_per_index(codebook_size)


def context_plus_task_rate_bits(geom: RateGeometry, codebook_size: int, count: int) -> int:
    pos_bits, _ = position_payload_bits(geom.grid_h, geom.grid_w, count)
    return (
        context_rate_bits(geom, codebook_size)
        + pos_bits
        + count * bits_per_index(codebook_size)
    )


def make_context(model: CodecModel, x: Image, f_ctx: int) -> ContextBundle:
    """Encode the f_ctx-downsampled image on the shared codec."""
    return ContextBundle(z_c=encode(model, downsample(x, f_ctx)), f_ctx=f_ctx)


def reproject_context(model: CodecModel, z_c: LatentGrid, f_ctx: int) -> LatentGrid:
    """Decode the context, bicubic-upsample by f_ctx, re-encode.

    Deterministic, so transmitter and receiver compute identical grids.
    """
    return encode(model, upsample(decode(model, z_c), f_ctx))


def build_mask(selected, h: int, w: int) -> FusionMask:
    mask = np.zeros((h, w), dtype=np.uint8)
    for a, b in selected:
        if not (0 <= a < h and 0 <= b < w):
            raise ValueError(f"cell ({a},{b}) outside {h}x{w} grid")
        mask[a, b] = 1
    return FusionMask(mask=mask, selected=tuple(selected))


def fuse(
    z_u: LatentGrid, z_patch: dict[tuple[int, int], int], m: FusionMask
) -> LatentGrid:
    """Cellwise merge: transmitted index where the mask is 1, context index elsewhere."""
    if m.mask.shape != z_u.indices.shape:
        raise DimensionError(
            f"mask shape {m.mask.shape} != grid shape {z_u.indices.shape}"
        )
    merged = z_u.indices.copy()
    for a, b in zip(*np.nonzero(m.mask)):
        key = (int(a), int(b))
        if key not in z_patch:
            raise ProtocolError(f"masked cell {key} missing from the task patch")
        merged[a, b] = z_patch[key]
    return LatentGrid(merged, z_u.source_shape)


def extract_patch(z: LatentGrid, selected) -> dict[tuple[int, int], int]:
    """Image-latent indices at the selected cells."""
    return {(a, b): int(z.indices[a, b]) for a, b in selected}


def compatibility(task: TaskModel, x: Image, x_hat: Image) -> bool:
    """True iff the task prediction on the reconstruction matches the one on x."""
    return predict(task, x_hat)[0] == predict(task, x)[0]


def lsf_select(
    model: CodecModel,
    task: TaskModel,
    x: Image,
    importance: ImportanceGrid,
    search_set=DEFAULT_SEARCH_SET,
    f_ctx: int = 4,
) -> LsfDecision:
    """Pick the cheapest payload whose reconstruction keeps the task prediction.

    Percentages are tried in ascending order; the first compatible one wins.
    A winner whose payload would exceed the full-latent rate degenerates to
    FULL_LATENT; if nothing is compatible the context alone is sent.
    """
    k = model.config.codebook_size
    geom = RateGeometry.from_image(x.height, x.width, model.config.f_model, f_ctx)
    z = encode(model, x)
    ctx = make_context(model, x, f_ctx)
    z_u = reproject_context(model, ctx.z_c, f_ctx)
    r_c = context_rate_bits(geom, k)
    r_i = full_latent_rate_bits(geom, k)

    for p in sorted(search_set):
        selected = select_top_p(importance, p)
        mask = build_mask(selected, geom.grid_h, geom.grid_w)
        z_r = fuse(z_u, extract_patch(z, selected), mask)
        if compatibility(task, x, decode(model, z_r)):
            rate = context_plus_task_rate_bits(geom, k, len(selected))
            if rate > r_i:
                return LsfDecision("full_latent", p, r_i, True, selected)
            return LsfDecision("context_plus_task", p, rate, True, selected)
    return LsfDecision("context_only", None, r_c, False)


def rate_report(decision: LsfDecision, geom: RateGeometry, codebook_size: int) -> RateReport:
    return RateReport(
        r_c_bits=context_rate_bits(geom, codebook_size),
        r_i_bits=full_latent_rate_bits(geom, codebook_size),
        r_bits=decision.rate_bits,
    )
