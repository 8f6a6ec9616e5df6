"""Weak and strong augmentation pipelines.

All operations work on ``H x W x 3`` float32 images in ``[0, 1]`` and return
images in the same range. Pipelines end with per-channel normalisation and
return ``3 x H x W`` float32 arrays ready to be stacked into a batch.

Randomness always comes from an explicit :class:`numpy.random.Generator`, so
a pipeline call is a pure function of ``(image, config, rng state)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import to_float

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
FILL = 0.5
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass(frozen=True)
class OpSpec:
    name: str
    lo: float
    hi: float
    kind: str = "real"  # "real", "int" or "flag"

    def check(self, magnitude: float) -> None:
        if self.kind == "flag":
            if magnitude not in (0, 1):
                raise ValueError(f"{self.name}: magnitude must be 0 or 1, got {magnitude}")
        elif not (self.lo <= magnitude <= self.hi):
            raise ValueError(
                f"{self.name}: magnitude {magnitude} outside [{self.lo}, {self.hi}]"
            )

    def sample(self, rng: np.random.Generator) -> float:
        if self.kind == "flag":
            return int(rng.integers(0, 2))
        if self.kind == "int":
            return int(rng.integers(int(self.lo), int(self.hi) + 1))
        return float(rng.uniform(self.lo, self.hi))


OPS: tuple[OpSpec, ...] = (
    OpSpec("ShearX", -0.3, 0.3),
    OpSpec("ShearY", -0.3, 0.3),
    OpSpec("TranslateX", -0.3, 0.3),
    OpSpec("TranslateY", -0.3, 0.3),
    OpSpec("Rotate", -30.0, 30.0),
    OpSpec("AutoContrast", 0, 1, "flag"),
    OpSpec("Invert", 0, 1, "flag"),
    OpSpec("Equalize", 0, 1, "flag"),
    OpSpec("Solarize", 0.0, 256.0),
    OpSpec("Posterize", 4, 8, "int"),
    OpSpec("Contrast", 0.05, 0.95),
    OpSpec("Color", 0.05, 0.95),
    OpSpec("Brightness", 0.05, 0.95),
    OpSpec("Sharpness", 0.05, 0.95),
)
OPS_BY_NAME = {op.name: op for op in OPS}


# --------------------------------------------------------------------------
# Sampling primitives


def _bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray, fill: float | None) -> np.ndarray:
    """Bilinear lookup at input coordinates ``(ys, xs)``.

    ``fill=None`` clamps coordinates to the border; otherwise taps outside
    the image read the constant ``fill``.
    """
    h, w, _ = img.shape
    if fill is None:
        ys = np.clip(ys, 0, h - 1)
        xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    wy = (ys - y0).astype(np.float32)[..., None]
    wx = (xs - x0).astype(np.float32)[..., None]

    def tap(yi, xi):
        v = img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        if fill is not None:
            inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            v = np.where(inside[..., None], v, np.float32(fill))
        return v

    top = tap(y0, x0) * (1 - wx) + tap(y0, x0 + 1) * wx
    bottom = tap(y0 + 1, x0) * (1 - wx) + tap(y0 + 1, x0 + 1) * wx
    return (top * (1 - wy) + bottom * wy).astype(np.float32)


def _affine(img: np.ndarray, matrix, fill: float = FILL) -> np.ndarray:
    """Warp with ``matrix`` mapping output (x, y, 1) to input (x, y)."""
    h, w, _ = img.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    (a, b, c), (d, e, f) = matrix
    return _bilinear(img, d * xs + e * ys + f, a * xs + b * ys + c, fill)


def _interp_matrix(start: int, length: int, size: int, extent: int) -> np.ndarray:
    """Row-stochastic ``size x extent`` matrix for half-pixel linear resampling."""
    pos = start + (np.arange(size) + 0.5) * (length / size) - 0.5
    pos = np.clip(pos, start, start + length - 1)
    lo = np.floor(pos).astype(np.int64)
    frac = (pos - lo).astype(np.float32)
    hi = np.minimum(lo + 1, extent - 1)
    mat = np.zeros((size, extent), dtype=np.float32)
    rows = np.arange(size)
    mat[rows, lo] += 1 - frac
    mat[rows, hi] += frac
    return mat


def resized_crop(img: np.ndarray, box: tuple[int, int, int, int], size: int) -> np.ndarray:
    """Crop ``box = (top, left, height, width)`` and bilinearly resize to ``size x size``."""
    top, left, ch, cw = box
    h, w, _ = img.shape
    ry = _interp_matrix(top, ch, size, h)
    rx = _interp_matrix(left, cw, size, w)
    rows = (ry @ img.reshape(h, -1)).reshape(size, w, -1)
    return np.matmul(rx, rows).astype(np.float32, copy=False)


def sample_crop_box(
    h: int, w: int, scale: tuple[float, float], ratio: tuple[float, float], rng: np.random.Generator
) -> tuple[int, int, int, int]:
    area = h * w
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    # fall back to a centred crop at the closest admissible aspect ratio
    in_ratio = w / h
    if in_ratio < ratio[0]:
        cw, ch = w, int(round(w / ratio[0]))
    elif in_ratio > ratio[1]:
        ch, cw = h, int(round(h * ratio[1]))
    else:
        cw, ch = w, h
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def center_crop_box(h: int, w: int, fraction: float) -> tuple[int, int, int, int]:
    ch, cw = max(1, int(round(h * fraction))), max(1, int(round(w * fraction)))
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def normalize(img: np.ndarray, mean, std) -> np.ndarray:
    out = (img - np.asarray(mean, np.float32)) / np.asarray(std, np.float32)
    return np.ascontiguousarray(out.transpose(2, 0, 1), dtype=np.float32)


def denormalize(chw: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    img = chw.transpose(1, 2, 0) * np.asarray(std, np.float32) + np.asarray(mean, np.float32)
    return np.clip(img, 0.0, 1.0)


# --------------------------------------------------------------------------
# Photometric helpers


def grayscale(img: np.ndarray) -> np.ndarray:
    return img @ _LUMA


def _blend(degenerate, img, factor):
    return np.clip(degenerate + factor * (img - degenerate), 0.0, 1.0).astype(np.float32)


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.round(img * 255.0).astype(np.uint8)


def _equalize_channel(u8: np.ndarray) -> np.ndarray:
    hist = np.bincount(u8.ravel(), minlength=256)
    nonzero = hist[hist > 0]
    if nonzero.size <= 1:
        return u8
    step = (nonzero.sum() - nonzero[-1]) // 255
    if step == 0:
        return u8
    before = np.concatenate([[0], np.cumsum(hist)[:-1]])
    lut = np.minimum((step // 2 + before) // step, 255).astype(np.uint8)
    return lut[u8]


_SMOOTH = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float32) / 13.0


def _smooth(img: np.ndarray) -> np.ndarray:
    out = img.copy()
    for c in range(3):
        out[1:-1, 1:-1, c] = ndimage.correlate(img[..., c], _SMOOTH, mode="nearest")[1:-1, 1:-1]
    return out


_RGB2YIQ = np.array(
    [[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]], dtype=np.float64
)
_YIQ2RGB = np.linalg.inv(_RGB2YIQ)


def hue_shift(img: np.ndarray, shift: float) -> np.ndarray:
    """Rotate chroma by ``shift`` turns of the colour wheel (luma preserved)."""
    theta = 2 * math.pi * shift
    rot = np.array(
        [[1, 0, 0], [0, math.cos(theta), -math.sin(theta)], [0, math.sin(theta), math.cos(theta)]]
    )
    mat = (_YIQ2RGB @ rot @ _RGB2YIQ).astype(np.float32)
    return np.clip(img @ mat.T, 0.0, 1.0)


# --------------------------------------------------------------------------
# The fourteen strong operations


def apply_op(image: np.ndarray, op: OpSpec | str, magnitude: float, rng=None) -> np.ndarray:
    """Apply one strong operation at ``magnitude`` to a float image.

    ``rng`` is accepted for interface symmetry; every operation is
    deterministic given its magnitude.
    """
    if isinstance(op, str):
        op = OPS_BY_NAME[op]
    op.check(magnitude)
    img = image
    h, w, _ = img.shape
    name = op.name
    m = magnitude

    if name == "ShearX":
        return _affine(img, ((1, m, 0), (0, 1, 0)))
    if name == "ShearY":
        return _affine(img, ((1, 0, 0), (m, 1, 0)))
    if name == "TranslateX":
        return _affine(img, ((1, 0, m * w), (0, 1, 0)))
    if name == "TranslateY":
        return _affine(img, ((1, 0, 0), (0, 1, m * h)))
    if name == "Rotate":
        theta = math.radians(m)
        cos, sin = math.cos(theta), math.sin(theta)
        cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
        # inverse rotation about the centre: output -> input
        return _affine(
            img,
            (
                (cos, sin, cx - cos * cx - sin * cy),
                (-sin, cos, cy + sin * cx - cos * cy),
            ),
        )
    if m == 0 and op.kind == "flag":
        return img
    if name == "AutoContrast":
        lo = img.min(axis=(0, 1), keepdims=True)
        hi = img.max(axis=(0, 1), keepdims=True)
        span = hi - lo
        out = np.where(span > 0, (img - lo) / np.where(span > 0, span, 1), img)
        return np.clip(out, 0.0, 1.0).astype(np.float32)
    if name == "Invert":
        return (1.0 - img).astype(np.float32)
    if name == "Equalize":
        u8 = _quantize(img)
        out = np.stack([_equalize_channel(u8[..., c]) for c in range(3)], axis=-1)
        return out.astype(np.float32) / 255.0
    if name == "Solarize":
        return np.where(img * 255.0 >= m, 1.0 - img, img).astype(np.float32)
    if name == "Posterize":
        bits = int(m)
        mask = np.uint8((0xFF << (8 - bits)) & 0xFF)
        return (_quantize(img) & mask).astype(np.float32) / 255.0
    if name == "Contrast":
        return _blend(np.float32(grayscale(img).mean()), img, m)
    if name == "Color":
        return _blend(grayscale(img)[..., None], img, m)
    if name == "Brightness":
        return _blend(np.float32(0.0), img, m)
    if name == "Sharpness":
        return _blend(_smooth(img), img, m)
    raise ValueError(f"unknown op {name}")


# --------------------------------------------------------------------------
# Configurations


@dataclass(frozen=True)
class WeakAugConfig:
    """Crop, colour jitter, grayscale, blur, flip and normalise.

    Defaults follow the MoCo-v2 recipe. ``blur_sigma`` is expressed for a
    224-pixel crop and rescaled to ``crop_size``.
    """

    crop_size: int = 32
    crop_scale: tuple[float, float] = (0.2, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    jitter_prob: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    flip_prob: float = 0.5
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        if self.crop_size <= 0:
            raise ValueError("crop_size must be positive")
        for name in ("jitter_prob", "grayscale_prob", "blur_prob", "flip_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass(frozen=True)
class StrongAugConfig:
    """``strength`` rounds of a uniformly drawn Table-style op, each kept with ``apply_prob``."""

    strength: int = 5
    apply_prob: float = 0.5
    crop_sizes: tuple[int, ...] = (16,)
    crop_scale: tuple[float, float] = (0.2, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        if self.strength < 1:
            raise ValueError("strength must be >= 1")
        if not 0.0 <= self.apply_prob <= 1.0:
            raise ValueError("apply_prob must lie in [0, 1]")
        if not self.crop_sizes or any(int(c) <= 0 for c in self.crop_sizes):
            raise ValueError("crop_sizes must be a non-empty list of positive sizes")
        object.__setattr__(self, "crop_sizes", tuple(int(c) for c in self.crop_sizes))


# --------------------------------------------------------------------------
# Pipelines


def _as_float(image: np.ndarray) -> np.ndarray:
    return to_float(image) if image.dtype == np.uint8 else image.astype(np.float32, copy=False)


def crop_and_flip(img, size, scale, ratio, flip_prob, rng) -> np.ndarray:
    h, w, _ = img.shape
    box = sample_crop_box(h, w, scale, ratio, rng)
    out = resized_crop(img, box, size)
    if rng.random() < flip_prob:
        out = out[:, ::-1]
    return out


def color_jitter(img: np.ndarray, cfg: WeakAugConfig, rng: np.random.Generator) -> np.ndarray:
    b = rng.uniform(max(0.0, 1 - cfg.brightness), 1 + cfg.brightness)
    c = rng.uniform(max(0.0, 1 - cfg.contrast), 1 + cfg.contrast)
    s = rng.uniform(max(0.0, 1 - cfg.saturation), 1 + cfg.saturation)
    hshift = rng.uniform(-cfg.hue, cfg.hue)
    for k in rng.permutation(4):
        if k == 0:
            img = _blend(np.float32(0.0), img, b)
        elif k == 1:
            img = _blend(np.float32(grayscale(img).mean()), img, c)
        elif k == 2:
            img = _blend(grayscale(img)[..., None], img, s)
        else:
            img = hue_shift(img, hshift)
    return img


def weak_augment(image: np.ndarray, cfg: WeakAugConfig, rng: np.random.Generator) -> np.ndarray:
    img = _as_float(image)
    h, w, _ = img.shape
    img = resized_crop(img, sample_crop_box(h, w, cfg.crop_scale, cfg.crop_ratio, rng), cfg.crop_size)
    if rng.random() < cfg.jitter_prob:
        img = color_jitter(img, cfg, rng)
    if rng.random() < cfg.grayscale_prob:
        img = np.repeat(grayscale(img)[..., None], 3, axis=-1)
    if rng.random() < cfg.blur_prob:
        sigma = rng.uniform(*cfg.blur_sigma) * cfg.crop_size / 224.0
        img = ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect")
    if rng.random() < cfg.flip_prob:
        img = img[:, ::-1]
    return normalize(img, cfg.mean, cfg.std)


def sample_strong_ops(cfg: StrongAugConfig, rng: np.random.Generator) -> list[tuple[OpSpec, float, bool]]:
    """Draw ``cfg.strength`` rounds of (op, magnitude, applied)."""
    rounds = []
    for _ in range(cfg.strength):
        op = OPS[int(rng.integers(len(OPS)))]
        magnitude = op.sample(rng)
        applied = bool(rng.random() < cfg.apply_prob)
        rounds.append((op, magnitude, applied))
    return rounds


def strong_augment(
    image: np.ndarray, cfg: StrongAugConfig, crop_size: int, rng: np.random.Generator
) -> np.ndarray:
    if crop_size not in cfg.crop_sizes:
        raise ValueError(f"crop_size {crop_size} not in configured crop_sizes {cfg.crop_sizes}")
    img = crop_and_flip(_as_float(image), crop_size, cfg.crop_scale, cfg.crop_ratio, cfg.flip_prob, rng)
    for op, magnitude, applied in sample_strong_ops(cfg, rng):
        if applied:
            img = apply_op(img, op, magnitude)
    return normalize(img, cfg.mean, cfg.std)


def center_view(image: np.ndarray, crop_size: int, fraction: float = 1.0, mean=IMAGENET_MEAN, std=IMAGENET_STD):
    """Deterministic evaluation view: centre crop of ``fraction`` resized to ``crop_size``."""
    img = _as_float(image)
    h, w, _ = img.shape
    return normalize(resized_crop(img, center_crop_box(h, w, fraction), crop_size), mean, std)


def preview_grid(images, weak: WeakAugConfig, strong: StrongAugConfig, seed: int, scale: int = 4) -> np.ndarray:
    """Rows of (original | weak | strong) as one uint8 image."""
    size = weak.crop_size
    rows = []
    for i, image in enumerate(images):
        rng = np.random.default_rng([seed, i])
        orig = resized_crop(_as_float(image), (0, 0, *image.shape[:2]), size)
        wv = denormalize(weak_augment(image, weak, rng), weak.mean, weak.std)
        sv = denormalize(strong_augment(image, strong, strong.crop_sizes[0], rng), strong.mean, strong.std)
        sv = resized_crop(sv, (0, 0, *sv.shape[:2]), size)
        pad = np.ones((size, 2, 3), np.float32)
        rows.append(np.concatenate([orig, pad, wv, pad, sv], axis=1))
    grid = np.concatenate(rows, axis=0)
    grid = np.kron(grid, np.ones((scale, scale, 1), np.float32)) if scale > 1 else grid
    return np.round(grid * 255).astype(np.uint8)


__all__ = [
    "OPS",
    "OpSpec",
    "StrongAugConfig",
    "WeakAugConfig",
    "apply_op",
    "center_view",
    "sample_strong_ops",
    "strong_augment",
    "weak_augment",
    "preview_grid",
]
