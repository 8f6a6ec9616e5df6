"""
Weak and strong views of synthetic images
=========================================

Each row of the saved grid is one image: the original, a weak view and a
strongly augmented view. Run from the repository root::

    python demos/augmentations.py
"""
from pathlib import Path

import numpy as np
from PIL import Image

from clsa.augment import OPS, StrongAugConfig, WeakAugConfig, apply_op, preview_grid, sample_strong_ops
from clsa.data import synth_dataset, to_float

out = Path("demos/out")
out.mkdir(parents=True, exist_ok=True)

# four classes, two images each
data = synth_dataset(seed=0, num_classes=4, per_class=2)
print(data.class_names)

# the 14 ops and their magnitude ranges
for op in OPS:
    print(f"{op.name:12s} {op.kind:6s} [{op.lo}, {op.hi}]")

# one strong recipe: s rounds, each an op, a magnitude and a coin flip
rng = np.random.default_rng(0)
for op, magnitude, applied in sample_strong_ops(StrongAugConfig(strength=5), rng):
    print(f"{op.name:12s} {magnitude:8.3f}  {'applied' if applied else 'skipped'}")

# a single op at the two ends of its range
img = to_float(data.images[0])
for m in (0.05, 0.95):
    print("Contrast", m, "pixel std", apply_op(img, "Contrast", m).std().round(4))

grid = preview_grid(list(data.images), WeakAugConfig(), StrongAugConfig(crop_sizes=(32,)), seed=0, scale=4)
Image.fromarray(grid).save(out / "augmentations.png")
print("wrote", out / "augmentations.png")
