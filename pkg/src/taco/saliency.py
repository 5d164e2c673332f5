"""Task classifier, GradCAM saliency, and pixel-to-latent-cell importance.

The classifier is a small conv net whose final conv layer feeds a
global-average-pooled linear head; GradCAM weights that layer's feature maps
by the spatial mean of the class-score gradients. Saliency is pooled onto the
latent grid through the fixed stride-f_model block correspondence.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DimensionError, TrainingDivergenceError
from .imagecore import Image, LabeledDataset
from .codec import load_split_tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClassifierConfig:
    class_count: int = 4
    hidden: int = 32
    epochs: int = 8
    learning_rate: float = 1e-3
    batch_size: int = 32
    label_smoothing: float = 0.1  # keeps softmax confidence usable as a gate
    resolution: tuple[int, int] = (64, 64)
    seed: int = 0


class TaskModel(nn.Module):
    """4-block conv classifier; `final_conv` is the GradCAM target layer."""

    def __init__(self, config: ClassifierConfig):
        super().__init__()
        h = config.hidden
        self.config = config
        self.features = nn.Sequential(
            nn.Conv2d(3, h, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(h, 2 * h, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(2 * h, 2 * h, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        )
        self.final_conv = nn.Conv2d(2 * h, 2 * h, 3, padding=1)
        self.head = nn.Linear(2 * h, config.class_count)

    def forward(self, x):
        a = self.activations(x)
        pooled = F.relu(a).mean(dim=(2, 3))
        return self.head(pooled)

    def activations(self, x):
        """Final-conv feature maps A^k (pre-ReLU)."""
        return self.final_conv(self.features(x))


def predict(model: TaskModel, x: Image) -> tuple[int, np.ndarray]:
    """Argmax class and softmax probabilities for one image."""
    model.eval()
    with torch.no_grad():
        logits = model(torch.from_numpy(x.pixels).unsqueeze(0))
        probs = torch.softmax(logits[0], dim=0).cpu().numpy()
    return int(probs.argmax()), probs


def cam_from_activations(
    activations: torch.Tensor, gradients: torch.Tensor, out_hw: tuple[int, int]
) -> np.ndarray:
    """Core GradCAM map: rectified gradient-weighted activation sum.

    Channel weights are the spatial mean of the gradients; the weighted sum
    is rectified, bilinearly upsampled to `out_hw`, and min-max normalized
    (an identically zero map stays zero).
    """
    alpha = gradients.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((alpha * activations).sum(dim=1, keepdim=True))
    cam = F.interpolate(cam, size=out_hw, mode="bilinear", align_corners=False)[0, 0]
    cam = cam.cpu().numpy().astype(np.float64)
    cam -= cam.min()
    peak = cam.max()
    if peak > 0:
        cam /= peak
    return cam


def gradcam(model: TaskModel, x: Image, target_class: int | None = None) -> np.ndarray:
    """Pixel saliency map of shape (H, W) in [0, 1].

    The target class defaults to the model's own argmax prediction
    (no ground truth is available at the transmitter).
    """
    model.eval()
    inp = torch.from_numpy(x.pixels).unsqueeze(0)
    with torch.enable_grad():
        act = model.activations(inp)
        pooled = F.relu(act).mean(dim=(2, 3))
        logits = model.head(pooled)
        n_classes = logits.shape[1]
        if target_class is None:
            target_class = int(logits[0].argmax())
        if not 0 <= target_class < n_classes:
            raise ValueError(f"target class {target_class} outside [0, {n_classes})")
        grads = torch.autograd.grad(logits[0, target_class], act)[0]
    return cam_from_activations(act.detach(), grads, (x.height, x.width))


@dataclass(frozen=True)
class ImportanceGrid:
    """Per-latent-cell saliency scores plus the selected cell set."""

    scores: np.ndarray  # (h, w), max 1 unless identically zero
    selected: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        s = self.scores
        if s.ndim != 2:
            raise DimensionError(f"scores must be 2-D, got {s.shape}")
        seen = set()
        for a, b in self.selected:
            if not (0 <= a < s.shape[0] and 0 <= b < s.shape[1]):
                raise DimensionError(f"selected cell ({a},{b}) out of bounds")
            if (a, b) in seen:
                raise DimensionError(f"duplicate selected cell ({a},{b})")
            seen.add((a, b))


def pool_to_latent(saliency: np.ndarray, f_model: int) -> ImportanceGrid:
    """Block-mean pixel saliency onto the latent grid; renormalize max to 1."""
    hp, wp = saliency.shape
    if hp % f_model or wp % f_model:
        raise DimensionError(
            f"saliency map {hp}x{wp} not divisible by f_model={f_model}"
        )
    h, w = hp // f_model, wp // f_model
    blocks = saliency.reshape(h, f_model, w, f_model).mean(axis=(1, 3))
    peak = blocks.max()
    if peak > 0:
        blocks = blocks / peak
    return ImportanceGrid(scores=blocks)


def rank_cells(grid: ImportanceGrid) -> list[tuple[int, int]]:
    """All cells in descending score order; ties row-major, then column."""
    h, w = grid.scores.shape
    cells = [(a, b) for a in range(h) for b in range(w)]
    cells.sort(key=lambda ab: (-grid.scores[ab[0], ab[1]], ab[0], ab[1]))
    return cells


def select_top_p(grid: ImportanceGrid, p: float) -> tuple[tuple[int, int], ...]:
    """Top ceil(p% of cells) by score; p=0 selects nothing, p=100 everything."""
    if not 0 <= p <= 100:
        raise ValueError(f"percentage {p} outside [0, 100]")
    h, w = grid.scores.shape
    count = math.ceil(p / 100.0 * h * w)
    return tuple(rank_cells(grid)[:count])


@dataclass
class ClassifierRecord:
    epoch_losses: list[float] = field(default_factory=list)
    val_accuracy: float = float("nan")


def evaluate_accuracy(model: TaskModel, images: torch.Tensor, labels: torch.Tensor) -> float:
    model.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, len(images), 64):
            logits = model(images[start : start + 64])
            correct += int((logits.argmax(1) == labels[start : start + 64]).sum())
    return correct / max(1, len(images))


def train_classifier(
    dataset: LabeledDataset,
    config: ClassifierConfig,
    val_dataset: LabeledDataset | None = None,
) -> tuple[TaskModel, ClassifierRecord]:
    """Cross-entropy training of the desk-scale classifier."""
    if len(dataset) == 0:
        raise TrainingDivergenceError("empty training split")
    torch.manual_seed(config.seed)
    model = TaskModel(config)
    data = load_split_tensor(dataset, config.resolution)
    labels = torch.tensor([lbl for _, lbl in dataset.items], dtype=torch.long)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    record = ClassifierRecord()

    for epoch in range(config.epochs):
        order = rng.permutation(len(data))
        epoch_loss, n_batches = 0.0, 0
        model.train()
        for start in range(0, len(order), config.batch_size):
            sel = order[start : start + config.batch_size]
            loss = F.cross_entropy(
                model(data[sel]), labels[sel],
                label_smoothing=config.label_smoothing,
            )
            if not torch.isfinite(loss):
                raise TrainingDivergenceError(f"classifier loss NaN at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item()
            n_batches += 1
        record.epoch_losses.append(epoch_loss / max(1, n_batches))
        log.info("classifier epoch %d loss %.5f", epoch, record.epoch_losses[-1])

    if val_dataset is not None and len(val_dataset):
        vimg = load_split_tensor(val_dataset, config.resolution)
        vlab = torch.tensor([lbl for _, lbl in val_dataset.items], dtype=torch.long)
        record.val_accuracy = evaluate_accuracy(model, vimg, vlab)
        log.info("classifier validation accuracy %.3f", record.val_accuracy)
    model.eval()
    return model, record
