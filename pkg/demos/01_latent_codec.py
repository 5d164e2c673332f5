"""Train a small latent codec and look at what it produces.

Generates a miniature synthetic dataset, trains for a handful of epochs
(enough to see the loss fall, not enough for pretty reconstructions; an
occasional mid-run spike while the codebook reshuffles is normal at this
scale), then encodes one image and walks through the latent grid it gets
back. Runs in about two minutes on one CPU core.
"""

import tempfile

import numpy as np

from taco.codec import CodecConfig, decode, encode, psnr, train_codec
from taco.data import generate_dataset
from taco.imagecore import load_image, load_manifest

workdir = tempfile.mkdtemp(prefix="taco-demo1-")
manifests = generate_dataset(workdir, n_train=160, n_val=16, n_test=8, seed=0)
train = load_manifest(manifests["train"]["shape"], 4, "train")
val = load_manifest(manifests["val"]["shape"], 4, "val")
print(f"dataset: {len(train)} train / {len(val)} val images in {workdir}")

config = CodecConfig(codebook_size=128, embed_dim=64, hidden=64, epochs=14, seed=0)
model, record = train_codec(train, config, val)
print(f"\nepoch losses: {[round(v, 1) for v in record.epoch_losses]}")
print(f"validation PSNR after {config.epochs} epochs: {record.val_psnr:.2f} dB")
used = int((record.codebook_usage > 0).sum())
print(f"codebook usage: {used}/{config.codebook_size} codewords")

# one image through the codec
path, label = val.items[0]
x = load_image(path, 64, 64)
z = encode(model, x)
print(f"\nlatent grid: {z.h}x{z.w} cells, indices in [0, {config.codebook_size})")
print(f"each cell covers a {config.f_model}x{config.f_model} pixel block")
print("top-left corner of the index grid:")
print(z.indices[:4, :4])

x_hat = decode(model, z)
print(f"\nround-trip PSNR on this image: {psnr(x, x_hat):.2f} dB")
print(f"payload if transmitted raw: {z.cells} cells x "
      f"{config.bits_per_index} bits = {z.cells * config.bits_per_index} bits")
