"""Shared vector-quantized autoencoder.

One convolutional encoder/decoder pair with spatial stride ``f_model`` and a
learned codebook serves both the full-resolution image path and the
downsampled context path. Quantization is nearest-codeword in squared
Euclidean distance with ties broken toward the lowest index, so transmitted
index grids are bit-reproducible.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import (
    CorruptLatentError,
    DimensionError,
    TrainingDivergenceError,
)
from .imagecore import Image, LabeledDataset, load_image

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CodecConfig:
    codebook_size: int = 512
    embed_dim: int = 64
    f_model: int = 4
    hidden: int = 64
    commitment_weight: float = 0.25
    learning_rate: float = 1.5e-3
    epochs: int = 60
    batch_size: int = 16
    resolution: tuple[int, int] = (64, 64)
    seed: int = 0

    @property
    def bits_per_index(self) -> int:
        return max(1, math.ceil(math.log2(self.codebook_size)))


@dataclass(frozen=True)
class Codebook:
    """K learned embedding vectors of dimension d_c."""

    vectors: np.ndarray  # (K, d_c)

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 2:
            raise DimensionError(f"codebook must be (K>=2, d_c), got {self.vectors.shape}")
        if not np.isfinite(self.vectors).all():
            raise TrainingDivergenceError("codebook contains NaN/Inf")

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def bits_per_index(self) -> int:
        return max(1, math.ceil(math.log2(self.size)))


@dataclass(frozen=True)
class LatentGrid:
    """A 2-D grid of codebook indices plus the pixel shape it encodes."""

    indices: np.ndarray  # (h, w) int64
    source_shape: tuple[int, int]

    def __post_init__(self):
        idx = self.indices
        if idx.ndim != 2:
            raise DimensionError(f"latent grid must be 2-D, got shape {idx.shape}")
        if idx.dtype != np.int64:
            object.__setattr__(self, "indices", idx.astype(np.int64))

    @property
    def h(self) -> int:
        return self.indices.shape[0]

    @property
    def w(self) -> int:
        return self.indices.shape[1]

    @property
    def cells(self) -> int:
        return self.h * self.w


def quantize_cell(codebook: Codebook, e: np.ndarray) -> int:
    """Index of the nearest codeword by squared distance; lowest index wins ties."""
    e = np.asarray(e, dtype=np.float64).reshape(-1)
    if e.shape[0] != codebook.dim:
        raise DimensionError(
            f"embedding dim {e.shape[0]} != codebook dim {codebook.dim}"
        )
    d = ((codebook.vectors.astype(np.float64) - e) ** 2).sum(axis=1)
    return int(d.argmin())


class Encoder(nn.Module):
    """Conv net with total spatial stride f_model (two stride-2 stages for f=4)."""

    def __init__(self, hidden: int, embed_dim: int, f_model: int):
        super().__init__()
        if f_model not in (2, 4):
            raise DimensionError(f"unsupported encoder stride {f_model}")
        layers = [nn.Conv2d(3, hidden, 4, stride=2, padding=1), nn.ReLU()]
        if f_model == 4:
            layers += [nn.Conv2d(hidden, hidden, 4, stride=2, padding=1), nn.ReLU()]
        layers += [
            nn.Conv2d(hidden, hidden, 3, stride=1, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden, embed_dim, 1),
        ]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class Decoder(nn.Module):
    """Transposed-conv mirror of the encoder; resolution agnostic."""

    def __init__(self, hidden: int, embed_dim: int, f_model: int):
        super().__init__()
        layers = [nn.Conv2d(embed_dim, hidden, 3, stride=1, padding=1), nn.ReLU()]
        if f_model == 4:
            layers += [nn.ConvTranspose2d(hidden, hidden, 4, stride=2, padding=1), nn.ReLU()]
        layers += [
            nn.ConvTranspose2d(hidden, hidden, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden, 3, 3, stride=1, padding=1),
        ]
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return self.net(z)


class CodecModel(nn.Module):
    """Encoder + codebook + decoder; inference on a frozen model is read-only."""

    def __init__(self, config: CodecConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config.hidden, config.embed_dim, config.f_model)
        self.decoder = Decoder(config.hidden, config.embed_dim, config.f_model)
        self.embedding = nn.Embedding(config.codebook_size, config.embed_dim)
        k = config.codebook_size
        self.embedding.weight.data.uniform_(-1.0 / k, 1.0 / k)

    @property
    def codebook(self) -> Codebook:
        return Codebook(self.embedding.weight.detach().cpu().numpy().copy())

    def quantize(self, z_e: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Nearest-codeword indices and quantized embeddings for (B, d, h, w)."""
        b, d, h, w = z_e.shape
        flat = z_e.permute(0, 2, 3, 1).reshape(-1, d)
        cb = self.embedding.weight
        # squared distances; argmin returns the first (lowest) index on ties
        dist = (
            flat.pow(2).sum(1, keepdim=True)
            - 2.0 * flat @ cb.t()
            + cb.pow(2).sum(1)
        )
        idx = dist.argmin(dim=1)
        z_q = self.embedding(idx).reshape(b, h, w, d).permute(0, 3, 1, 2)
        return idx.reshape(b, h, w), z_q


def _image_batch(model: CodecModel, x: Image) -> torch.Tensor:
    f = model.config.f_model
    if x.height % f or x.width % f:
        raise DimensionError(
            f"image {x.height}x{x.width} not divisible by f_model={f}"
        )
    dtype = next(model.parameters()).dtype
    return torch.from_numpy(x.pixels).to(dtype).unsqueeze(0)


def encode(model: CodecModel, x: Image) -> LatentGrid:
    """Quantized latent grid of an image: nearest-codeword indices of E(x)."""
    model.eval()
    with torch.no_grad():
        z_e = model.encoder(_image_batch(model, x))
        idx, _ = model.quantize(z_e)
    return LatentGrid(idx[0].cpu().numpy().astype(np.int64), (x.height, x.width))


def decode(model: CodecModel, z: LatentGrid) -> Image:
    """Decode an index grid to pixels, clamped to [-1, 1]."""
    k = model.config.codebook_size
    if (z.indices < 0).any() or (z.indices >= k).any():
        raise CorruptLatentError(
            f"latent grid holds indices outside [0, {k})"
        )
    model.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        idx = torch.from_numpy(z.indices).long().unsqueeze(0)
        z_q = model.embedding(idx).permute(0, 3, 1, 2).to(dtype)
        out = model.decoder(z_q)[0]
    pix = out.float().cpu().numpy()
    return Image(np.clip(pix, -1.0, 1.0).astype(np.float32))


def vq_loss(
    model: CodecModel, x: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Reconstruction + codebook + commitment terms and their weighted sum.

    Straight-through estimator: reconstruction gradients bypass the
    quantizer; the stop-gradient sides of the codebook/commitment terms
    receive no gradient. Each term is the per-image squared-L2 sum,
    averaged over the batch.
    """
    if x.ndim == 3:
        x = x.unsqueeze(0)
    n = x.shape[0]
    z_e = model.encoder(x)
    _, z_q = model.quantize(z_e)
    z_st = z_e + (z_q - z_e).detach()
    x_hat = model.decoder(z_st)
    recon = torch.sum((x_hat - x) ** 2) / n
    codebook_term = torch.sum((z_e.detach() - z_q) ** 2) / n
    commit = torch.sum((z_e - z_q.detach()) ** 2) / n
    total = recon + codebook_term + model.config.commitment_weight * commit
    if not torch.isfinite(total):
        raise TrainingDivergenceError(
            f"non-finite loss: recon={recon.item()}, codebook={codebook_term.item()}, "
            f"commit={commit.item()}"
        )
    return total, recon, codebook_term, commit


def load_split_tensor(dataset: LabeledDataset, resolution: tuple[int, int]) -> torch.Tensor:
    h, w = resolution
    return torch.stack(
        [torch.from_numpy(load_image(p, h, w).pixels) for p, _ in dataset.items]
    )


def psnr(x: Image, y: Image) -> float:
    """Peak signal-to-noise ratio in dB over the [-1, 1] range (peak 2.0)."""
    mse = float(np.mean((x.pixels.astype(np.float64) - y.pixels.astype(np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(4.0 / mse)


@dataclass
class TrainingRecord:
    epoch_losses: list[float] = field(default_factory=list)
    val_psnr: float = float("nan")
    codebook_usage: np.ndarray | None = None


def train_codec(
    dataset: LabeledDataset,
    config: CodecConfig,
    val_dataset: LabeledDataset | None = None,
) -> tuple[CodecModel, TrainingRecord]:
    """Train the codec on a split; records the loss curve and validation PSNR."""
    if len(dataset) == 0:
        raise TrainingDivergenceError("empty training split")
    torch.manual_seed(config.seed)
    model = CodecModel(config)
    data = load_split_tensor(dataset, config.resolution)
    # seed the codebook from first-batch embeddings: with the uniform
    # [-1/K, 1/K] init one codeword captures every cell and the rest never
    # receive gradients, so the codebook collapses
    with torch.no_grad():
        z0 = (
            model.encoder(data[: 8 * config.batch_size])
            .permute(0, 2, 3, 1)
            .reshape(-1, config.embed_dim)
        )
        sel = torch.randperm(len(z0))[: config.codebook_size]
        model.embedding.weight[: len(sel)] = z0[sel]
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    record = TrainingRecord()
    usage = np.zeros(config.codebook_size, dtype=np.int64)

    for epoch in range(config.epochs):
        order = rng.permutation(len(data))
        usage[:] = 0
        total_cells = 0
        epoch_loss = 0.0
        n_batches = 0
        model.train()
        for start in range(0, len(order), config.batch_size):
            batch = data[order[start : start + config.batch_size]]
            total, recon, cb, commit = vq_loss(model, batch)
            opt.zero_grad()
            total.backward()
            opt.step()
            epoch_loss += total.item()
            n_batches += 1
            with torch.no_grad():
                idx, _ = model.quantize(model.encoder(batch))
            binc = np.bincount(
                idx.reshape(-1).cpu().numpy(), minlength=config.codebook_size
            )
            usage += binc
            total_cells += idx.numel()
        record.epoch_losses.append(epoch_loss / max(1, n_batches))
        dead = usage < max(1, int(1e-4 * total_cells))
        if dead.any():
            log.warning(
                "epoch %d: %d/%d codewords below usage floor; histogram head=%s",
                epoch,
                int(dead.sum()),
                config.codebook_size,
                usage[:16].tolist(),
            )
        log.info("epoch %d loss %.5f", epoch, record.epoch_losses[-1])

    record.codebook_usage = usage.copy()
    if val_dataset is not None and len(val_dataset):
        vals = []
        for path, _ in val_dataset.items:
            img = load_image(path, *config.resolution)
            vals.append(psnr(img, decode(model, encode(model, img))))
        record.val_psnr = float(np.mean(vals))
        log.info("validation PSNR %.2f dB", record.val_psnr)
    model.eval()
    return model, record
