"""Shared fixtures: the synthetic desk dataset and trained models.

Training is deterministic given the seeds, so trained checkpoints are cached
under tests/_artifacts and reused across pytest runs. Bump _CACHE_VERSION
whenever a change invalidates cached models.
"""

import os

import pytest
import torch

from taco import checkpoint, data
from taco.codec import CodecConfig, CodecModel, train_codec
from taco.harness import RunConfig
from taco.imagecore import load_manifest
from taco.saliency import ClassifierConfig, TaskModel, train_classifier

_CACHE_VERSION = "v5"
ARTIFACTS = os.path.join(os.path.dirname(__file__), "_artifacts", _CACHE_VERSION)

torch.set_num_threads(max(1, os.cpu_count() or 1))


@pytest.fixture(scope="session")
def run_config():
    return RunConfig(
        data_dir=os.path.join(ARTIFACTS, "dataset"),
        out_dir=os.path.join(ARTIFACTS, "out"),
        seed=0,
    )


@pytest.fixture(scope="session")
def desk_dataset(run_config):
    """Synthetic dataset: 640 train / 128 val / 100 test images at 64x64."""
    root = run_config.data_dir
    marker = os.path.join(root, "done.txt")
    if not os.path.exists(marker):
        data.generate_dataset(root, n_train=640, n_val=128, n_test=100, size=64, seed=0)
        with open(marker, "w") as fh:
            fh.write("ok\n")
    return {
        split: {
            task: os.path.join(root, f"{split}_{task}.csv")
            for task in ("shape", "glyph")
        }
        for split in ("train", "val", "test")
    }


@pytest.fixture(scope="session")
def trained_codec(desk_dataset, run_config):
    path = os.path.join(ARTIFACTS, "codec.ckpt")
    cfg = run_config.codec_config()
    if not os.path.exists(path):
        train = load_manifest(desk_dataset["train"]["shape"], 4, "train")
        train.items = train.items[:320]  # the codec saturates well before 640
        val = load_manifest(desk_dataset["val"]["shape"], 4, "val")
        model, record = train_codec(train, cfg, val)
        os.makedirs(ARTIFACTS, exist_ok=True)
        checkpoint.save_checkpoint(path, "codec", cfg, model.state_dict())
        with open(os.path.join(ARTIFACTS, "codec_record.txt"), "w") as fh:
            fh.write(f"val_psnr={record.val_psnr}\n")
            fh.write(f"used={(record.codebook_usage > 0).sum()}\n")
    cfg_dict, state = checkpoint.load_checkpoint(path, "codec")
    cfg_dict["resolution"] = tuple(cfg_dict["resolution"])
    model = CodecModel(CodecConfig(**cfg_dict))
    model.load_state_dict(state)
    model.eval()
    return model


def _trained_classifier(desk_dataset, run_config, task: str, seed_offset: int) -> TaskModel:
    path = os.path.join(ARTIFACTS, f"task_{task}.ckpt")
    cfg = run_config.classifier_config(4, seed_offset)
    if not os.path.exists(path):
        train = load_manifest(desk_dataset["train"][task], 4, "train")
        val = load_manifest(desk_dataset["val"][task], 4, "val")
        model, record = train_classifier(train, cfg, val)
        os.makedirs(ARTIFACTS, exist_ok=True)
        checkpoint.save_checkpoint(path, "classifier", cfg, model.state_dict())
        with open(os.path.join(ARTIFACTS, f"task_{task}_record.txt"), "w") as fh:
            fh.write(f"val_accuracy={record.val_accuracy}\n")
    cfg_dict, state = checkpoint.load_checkpoint(path, "classifier")
    cfg_dict["resolution"] = tuple(cfg_dict["resolution"])
    model = TaskModel(ClassifierConfig(**cfg_dict))
    model.load_state_dict(state)
    model.eval()
    return model


@pytest.fixture(scope="session")
def shape_classifier(desk_dataset, run_config):
    return _trained_classifier(desk_dataset, run_config, "shape", 0)


@pytest.fixture(scope="session")
def glyph_classifier(desk_dataset, run_config):
    return _trained_classifier(desk_dataset, run_config, "glyph", 1)


@pytest.fixture(scope="session")
def test_images(desk_dataset, run_config):
    """All test-split images with both label columns."""
    from taco.imagecore import load_image

    shape_ds = load_manifest(desk_dataset["test"]["shape"], 4, "test")
    glyph_ds = load_manifest(desk_dataset["test"]["glyph"], 4, "test")
    out = []
    for (path, shape_label), (_, glyph_label) in zip(shape_ds.items, glyph_ds.items):
        out.append((load_image(path, 64, 64), shape_label, glyph_label))
    return out
