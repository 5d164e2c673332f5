"""From classifier gradients to a set of latent cells worth paying for.

Trains a quick shape classifier, runs GradCAM on one test image, pools the
pixel saliency onto the latent grid, and shows which cells survive at
different task-information percentages.
"""

import tempfile

import numpy as np

from taco.data import generate_dataset
from taco.imagecore import load_image, load_manifest
from taco.saliency import (
    ClassifierConfig,
    gradcam,
    pool_to_latent,
    predict,
    select_top_p,
    train_classifier,
)

workdir = tempfile.mkdtemp(prefix="taco-demo2-")
manifests = generate_dataset(workdir, n_train=512, n_val=64, n_test=8, seed=1)
train = load_manifest(manifests["train"]["shape"], 4, "train")
val = load_manifest(manifests["val"]["shape"], 4, "val")

config = ClassifierConfig(class_count=4, epochs=30, seed=0)
model, record = train_classifier(train, config, val)
print(f"shape classifier: val accuracy {record.val_accuracy:.3f} after {config.epochs} epochs")

test = load_manifest(manifests["test"]["shape"], 4, "test")
x = load_image(test.items[0][0], 64, 64)
pred, probs = predict(model, x)
print(f"\ntest image: true class {test.items[0][1]}, predicted {pred} "
      f"(confidence {probs.max():.2f})")

# pixel saliency for the predicted class, then block-pool onto the 16x16 grid
cam = gradcam(model, x)
grid = pool_to_latent(cam, 4)
print(f"saliency map {cam.shape} -> importance grid {grid.scores.shape}")

for p in (10, 30, 70):
    cells = select_top_p(grid, p)
    marks = np.full(grid.scores.shape, ".", dtype=object)
    for a, b in cells:
        marks[a, b] = "#"
    print(f"\ntop {p}% of cells ({len(cells)} of {grid.scores.size}):")
    print("\n".join(" ".join(row) for row in marks))
