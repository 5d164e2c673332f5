import os

import numpy as np
import pytest
from PIL import Image as PILImage

from taco.errors import DimensionError, IngestionError
from taco.imagecore import (
    Image,
    downsample,
    from_uint8,
    load_image,
    load_manifest,
    upsample,
)


def _random_image(rng, c=3, h=64, w=64):
    return Image(rng.uniform(-1, 1, size=(c, h, w)).astype(np.float32))


def test_uint8_endpoints():
    img = from_uint8(np.full((4, 4, 3), 255, dtype=np.uint8))
    assert np.allclose(img.pixels, 1.0)
    img = from_uint8(np.zeros((4, 4, 3), dtype=np.uint8))
    assert np.allclose(img.pixels, -1.0)


def test_load_image_resizes(tmp_path):
    rng = np.random.default_rng(0)
    src = rng.integers(0, 256, size=(96, 96, 3), dtype=np.uint8)
    path = str(tmp_path / "img.png")
    PILImage.fromarray(src).save(path)
    img = load_image(path, 64, 64)
    assert img.pixels.shape == (3, 64, 64)
    assert img.pixels.min() >= -1.0 and img.pixels.max() <= 1.0


def test_load_image_bad_file(tmp_path):
    path = str(tmp_path / "junk.png")
    with open(path, "wb") as fh:
        fh.write(b"not an image")
    with pytest.raises(IngestionError, match="junk.png"):
        load_image(path, 64, 64)


def test_downsample_shape():
    rng = np.random.default_rng(1)
    out = downsample(_random_image(rng, 3, 256, 512), 4)
    assert out.pixels.shape == (3, 64, 128)


def test_downsample_identity_and_errors():
    rng = np.random.default_rng(2)
    x = _random_image(rng)
    assert downsample(x, 1) is x
    with pytest.raises(DimensionError):
        downsample(_random_image(rng, 3, 30, 30), 4)


def test_resampling_preserves_constants():
    x = Image(np.full((3, 16, 16), 0.37, dtype=np.float32))
    for f in (2, 4):
        assert np.allclose(downsample(x, f).pixels, 0.37, atol=1e-6)
        assert np.allclose(upsample(x, f).pixels, 0.37, atol=1e-6)
        roundtrip = downsample(upsample(x, f), f)
        assert np.allclose(roundtrip.pixels, 0.37, atol=1e-6)


def test_upsample_shape():
    rng = np.random.default_rng(3)
    out = upsample(_random_image(rng, 3, 64, 128), 4)
    assert out.pixels.shape == (3, 256, 512)
    x = _random_image(rng)
    assert upsample(x, 1) is x


def test_up_down_same_factor_restores_shape():
    rng = np.random.default_rng(4)
    x = _random_image(rng, 3, 32, 48)
    assert downsample(upsample(x, 4), 4).pixels.shape == x.pixels.shape


def test_outputs_clamped():
    x = Image(np.float32(np.sign(np.random.default_rng(5).normal(size=(3, 32, 32)))))
    up = upsample(x, 4)
    assert up.pixels.min() >= -1.0 and up.pixels.max() <= 1.0


def test_resampling_deterministic():
    rng = np.random.default_rng(6)
    x = _random_image(rng)
    a = upsample(x, 4).pixels
    b = upsample(Image(x.pixels.copy()), 4).pixels
    assert np.array_equal(a, b)


def test_manifest_roundtrip(tmp_path):
    img = np.zeros((8, 8, 3), dtype=np.uint8)
    PILImage.fromarray(img).save(tmp_path / "a.png")
    manifest = tmp_path / "train.csv"
    manifest.write_text("path,label\na.png,2\n")
    ds = load_manifest(str(manifest), 4, "train")
    assert len(ds) == 1
    path, label = ds.items[0]
    assert label == 2
    assert os.path.isabs(path) and os.path.exists(path)


def test_manifest_rejects_bad_labels(tmp_path):
    manifest = tmp_path / "train.csv"
    manifest.write_text("path,label\na.png,7\n")
    with pytest.raises(IngestionError):
        load_manifest(str(manifest), 4)
