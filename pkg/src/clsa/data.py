"""Image datasets: folder ingestion and a procedural synthetic generator.

Images are stored as ``H x W x 3`` uint8 arrays in ``[0, 255]``. Conversion to
floats in ``[0, 1]`` happens once, in :func:`to_float`, right before
augmentation.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError
from scipy import ndimage

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp", ".ppm"}
MIN_SIDE = 32


@dataclass(frozen=True)
class Dataset:
    """An ordered, immutable collection of labelled RGB images."""

    images: tuple[np.ndarray, ...]
    labels: tuple[int, ...]
    name: str
    image_size: tuple[int, int]
    num_classes: int
    class_names: tuple[str, ...] = ()
    sources: tuple[str, ...] = ()
    skipped: int = 0
    _label_array: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        for img in self.images:
            if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
                raise ValueError("images must be H x W x 3 uint8 arrays")
            img.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "_label_array", labels)

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, idx: int) -> tuple[np.ndarray, int]:
        return self.images[idx], self.labels[idx]

    @property
    def label_array(self) -> np.ndarray:
        return self._label_array

    def subset(self, indices) -> "Dataset":
        indices = [int(i) for i in indices]
        return Dataset(
            images=tuple(self.images[i] for i in indices),
            labels=tuple(self.labels[i] for i in indices),
            name=self.name,
            image_size=self.image_size,
            num_classes=self.num_classes,
            class_names=self.class_names,
            sources=tuple(self.sources[i] for i in indices) if self.sources else (),
        )


def to_float(image: np.ndarray) -> np.ndarray:
    """Convert a uint8 image to float32 in ``[0, 1]``."""
    if image.dtype != np.uint8:
        raise TypeError(f"expected uint8 image, got {image.dtype}")
    return image.astype(np.float32) / 255.0


def load_image_folder(path, image_size: tuple[int, int]) -> Dataset:
    """Read ``<root>/<class_name>/<file>`` into a :class:`Dataset`.

    Labels follow the sorted order of the class directories. Files that cannot
    be decoded are skipped with a warning; the number skipped is stored on the
    returned dataset as ``skipped``.
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"image folder not found: {root}")
    h, w = image_size
    if h < MIN_SIDE or w < MIN_SIDE:
        raise ValueError(f"image_size must be at least {MIN_SIDE}x{MIN_SIDE}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ValueError(f"no classes found in {root}")

    images, labels, sources = [], [], []
    skipped = 0
    for label, class_dir in enumerate(class_dirs):
        for file in sorted(class_dir.iterdir()):
            if not file.is_file() or file.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                with PILImage.open(file) as im:
                    im = im.convert("RGB").resize((w, h), PILImage.BILINEAR)
                    pixels = np.asarray(im, dtype=np.uint8).copy()
            except (UnidentifiedImageError, OSError, ValueError) as exc:
                skipped += 1
                warnings.warn(f"skipping undecodable image {file}: {exc}", stacklevel=2)
                continue
            images.append(pixels)
            labels.append(label)
            sources.append(str(file))
    if skipped:
        log.warning("skipped %d undecodable file(s) under %s", skipped, root)
    return Dataset(
        images=tuple(images),
        labels=tuple(labels),
        name=root.name,
        image_size=(h, w),
        num_classes=len(class_dirs),
        class_names=tuple(p.name for p in class_dirs),
        sources=tuple(sources),
        skipped=skipped,
    )


def export_image_folder(dataset: Dataset, root) -> Path:
    """Write a dataset as PNG files in the image-folder layout."""
    root = Path(root)
    names = dataset.class_names or tuple(f"class_{c:03d}" for c in range(dataset.num_classes))
    counters = [0] * dataset.num_classes
    for name in names:
        (root / name).mkdir(parents=True, exist_ok=True)
    for img, label in zip(dataset.images, dataset.labels):
        PILImage.fromarray(img).save(root / names[label] / f"{counters[label]:05d}.png")
        counters[label] += 1
    return root


def _hsv_to_rgb(h, s, v):
    h6 = (h % 1.0) * 6.0
    sector = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    conds = [sector == k for k in range(6)]
    r = np.select(conds, [v, q, p, p, t, v])
    g = np.select(conds, [t, v, v, q, p, p])
    b = np.select(conds, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


# One texture family per class index modulo 4; the frequency band moves with
# c // 4 so that datasets with more than four classes stay separable.
_PATTERNS = ("stripes", "checker", "rings", "blotches")


def _pattern(kind: str, freq: float, coords, rng: np.random.Generator) -> np.ndarray:
    yy, xx = coords
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    u = xx * np.cos(theta) + yy * np.sin(theta)
    v = -xx * np.sin(theta) + yy * np.cos(theta)
    if kind == "stripes":
        return np.sin(2 * np.pi * freq * u + phase)
    if kind == "checker":
        return np.sin(2 * np.pi * freq * u + phase) * np.sin(2 * np.pi * freq * v)
    if kind == "rings":
        cy, cx = rng.uniform(0.2, 0.8, size=2)
        r = np.hypot(yy - cy, xx - cx)
        return np.sin(2 * np.pi * freq * r + phase)
    noise = rng.standard_normal(yy.shape)
    smooth = ndimage.gaussian_filter(noise, sigma=yy.shape[0] / (3.0 * freq), mode="wrap")
    return smooth / (np.abs(smooth).max() + 1e-8)


def synth_dataset(
    seed: int,
    num_classes: int,
    per_class: int,
    image_size: tuple[int, int] = (32, 32),
    hue_spread: float = 0.2,
) -> Dataset:
    """Generate a deterministic labelled dataset of procedural textures.

    Each class has a base hue (evenly spaced on the colour wheel, perturbed
    per image by ``hue_spread``) and a texture family with a class-specific
    spatial frequency. Colour alone separates classes only partially; texture
    carries the rest of the signal.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    h, w = image_size
    if h < MIN_SIDE or w < MIN_SIDE:
        raise ValueError(f"image_size must be at least {MIN_SIDE}x{MIN_SIDE}")

    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = (yy / h, xx / w)
    images, labels = [], []
    for c in range(num_classes):
        kind = _PATTERNS[c % len(_PATTERNS)]
        base_freq = 2.0 + 1.5 * (c // len(_PATTERNS))
        for _ in range(per_class):
            hue = c / num_classes + rng.normal(0.0, hue_spread)
            sat = rng.uniform(0.35, 0.9)
            val = rng.uniform(0.45, 0.9)
            freq = base_freq * rng.uniform(0.85, 1.15)
            pat = _pattern(kind, freq, coords, rng)
            value = np.clip(val * (0.6 + 0.4 * pat), 0.0, 1.0)
            saturation = np.clip(sat * (0.8 - 0.2 * pat), 0.0, 1.0)
            rgb = _hsv_to_rgb(np.full_like(value, hue), saturation, value)
            rgb += rng.normal(0.0, 0.03, size=rgb.shape)
            images.append(np.round(np.clip(rgb, 0.0, 1.0) * 255).astype(np.uint8))
            labels.append(c)

    return Dataset(
        images=tuple(images),
        labels=tuple(labels),
        name=f"synth-s{seed}-c{num_classes}-n{per_class}",
        image_size=(h, w),
        num_classes=num_classes,
        class_names=tuple(f"{c:02d}_{_PATTERNS[c % 4]}" for c in range(num_classes)),
    )
