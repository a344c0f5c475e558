"""
Synthetic Dataset Service
Procedural texture classes standing in for tissue types
"""

import logging
from typing import List, Sequence, Tuple

import numpy as np

from ..core.exceptions import DatasetError
from ..core.models import ClassSpec, Dataset, TextureKind
from ..core.rng import DATA, SPLIT, make_rng

logger = logging.getLogger(__name__)

# Base table at 64 pixels; scales are in pixels and grow with the image size.
BASE_CLASSES: Tuple[Tuple[TextureKind, Tuple[float, float, float], float], ...] = (
    (TextureKind.BLOBS, (0.85, 0.45, 0.55), 7.0),
    (TextureKind.STRIPES, (0.45, 0.75, 0.50), 8.0),
    (TextureKind.CHECKER, (0.50, 0.50, 0.90), 8.0),
    (TextureKind.LOW_FREQ_NOISE, (0.90, 0.80, 0.40), 16.0),
    (TextureKind.HIGH_FREQ_NOISE, (0.60, 0.40, 0.80), 1.0),
    (TextureKind.RINGS, (0.40, 0.80, 0.85), 10.0),
)

# Per-channel direction of the out-of-distribution palette shift.
PALETTE_SHIFT_DIRECTION = np.array([1.0, -0.5, 0.5])
PIXEL_NOISE_STD = 4.0
COLOR_JITTER = 0.04


def class_specs(num_classes: int) -> List[ClassSpec]:
    """Class table; beyond the base six, kinds repeat with larger scales and rotated colors."""
    specs = []
    for index in range(num_classes):
        kind, color, scale = BASE_CLASSES[index % len(BASE_CLASSES)]
        cycle = index // len(BASE_CLASSES)
        if cycle:
            color = tuple(np.roll(color, cycle).tolist())
            scale = scale * (1.0 + 0.5 * cycle)
        name = kind.value if cycle == 0 else f"{kind.value}_{cycle}"
        specs.append(ClassSpec(index=index, name=name, kind=kind, color=color, scale=scale))
    return specs


def _coords(size: int) -> Tuple[np.ndarray, np.ndarray]:
    return np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")


def _blobs(size, scale, rng):
    y, x = _coords(size)
    pattern = np.zeros((size, size))
    for _ in range(int(rng.integers(4, 8))):
        cy, cx = rng.uniform(0, size, 2)
        radius = scale * rng.uniform(0.7, 1.3)
        pattern += np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2.0 * radius ** 2))
    return np.clip(pattern, 0.0, 1.0)


def _stripes(size, scale, rng):
    y, x = _coords(size)
    angle = np.pi / 4 + rng.uniform(-0.3, 0.3)
    phase = rng.uniform(0, 2 * np.pi)
    return 0.5 + 0.5 * np.sin(2 * np.pi * (x * np.cos(angle) + y * np.sin(angle)) / scale + phase)


def _checker(size, scale, rng):
    y, x = _coords(size)
    oy, ox = rng.uniform(0, 2 * scale, 2)
    return ((np.floor((y + oy) / scale) + np.floor((x + ox) / scale)) % 2).astype(np.float64)


def _low_freq_noise(size, scale, rng):
    cells = int(np.ceil(size / scale)) + 2
    coarse = rng.random((cells, cells))
    # bilinear upsampling of the coarse lattice
    pos = np.arange(size) / scale + rng.uniform(0, 1)
    i0 = np.minimum(np.floor(pos).astype(int), cells - 2)
    frac = pos - i0
    rows = coarse[i0] * (1 - frac)[:, None] + coarse[i0 + 1] * frac[:, None]
    return rows[:, i0] * (1 - frac)[None, :] + rows[:, i0 + 1] * frac[None, :]


def _high_freq_noise(size, scale, rng):
    cell = max(1, int(round(scale)))
    fine = rng.random((-(-size // cell), -(-size // cell)))
    return np.repeat(np.repeat(fine, cell, axis=0), cell, axis=1)[:size, :size]


def _rings(size, scale, rng):
    y, x = _coords(size)
    cy, cx = size / 2 + rng.uniform(-size / 4, size / 4, 2)
    phase = rng.uniform(0, 2 * np.pi)
    return 0.5 + 0.5 * np.sin(2 * np.pi * np.hypot(y - cy, x - cx) / scale + phase)


_GENERATORS = {
    TextureKind.BLOBS: _blobs,
    TextureKind.STRIPES: _stripes,
    TextureKind.CHECKER: _checker,
    TextureKind.LOW_FREQ_NOISE: _low_freq_noise,
    TextureKind.HIGH_FREQ_NOISE: _high_freq_noise,
    TextureKind.RINGS: _rings,
}


def render_texture(spec: ClassSpec, size: int, rng: np.random.Generator,
                   palette_shift: float = 0.0) -> np.ndarray:
    """One integer-valued (size,size,3) image in [0,255]."""
    scale = spec.scale * size / 64.0
    pattern = _GENERATORS[spec.kind](size, scale, rng)
    color = np.clip(np.asarray(spec.color) + rng.uniform(-COLOR_JITTER, COLOR_JITTER, 3), 0.0, 1.0)
    image = 255.0 * (0.1 + 0.8 * color[None, None, :] * (0.35 + 0.65 * pattern[:, :, None]))
    image = image + rng.normal(0.0, PIXEL_NOISE_STD, image.shape) + palette_shift * PALETTE_SHIFT_DIRECTION
    return np.clip(np.floor(image + 0.5), 0.0, 255.0).astype(np.float32)


def generate_synthetic(num_classes: int, per_class: int, size: int, seed: int,
                       palette_shift: float = 0.0) -> Dataset:
    """Class-ordered dataset; image j of class c depends only on (seed, c, j)."""
    if num_classes < 2:
        raise DatasetError(f"need at least 2 classes, got {num_classes}")
    if per_class < 1:
        raise DatasetError(f"need at least 1 image per class, got {per_class}")
    specs = class_specs(num_classes)
    images = np.empty((num_classes * per_class, size, size, 3), dtype=np.float32)
    labels = np.repeat(np.arange(num_classes), per_class)
    for spec in specs:
        for j in range(per_class):
            images[spec.index * per_class + j] = render_texture(
                spec, size, make_rng(seed, DATA, spec.index, j), palette_shift)
    logger.info(f"Generated {len(images)} synthetic images ({num_classes} classes, size {size}, seed {seed})")
    return Dataset(images, labels, tuple(s.name for s in specs), split="all")


def split(ds: Dataset, test_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Stratified, disjoint train/test split; within each split indices keep dataset order."""
    if not 0.0 < test_fraction < 1.0:
        raise DatasetError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    train_idx, test_idx = [], []
    for label in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == label)
        if len(members) < 2:
            raise DatasetError(f"class '{ds.class_names[label]}' has {len(members)} items; need >= 2 to split")
        shuffled = make_rng(seed, SPLIT, label).permutation(members)
        n_test = min(max(int(round(len(members) * test_fraction)), 1), len(members) - 1)
        test_idx.extend(shuffled[:n_test])
        train_idx.extend(shuffled[n_test:])
    return ds.take(sorted(train_idx), "train"), ds.take(sorted(test_idx), "test")


def balanced_subset(ds: Dataset, total: int, seed: int) -> Dataset:
    """`total` images spread evenly over classes (remainder to the lowest class indices)."""
    k = ds.num_classes
    quotas = [total // k + (1 if c < total % k else 0) for c in range(k)]
    chosen: List[int] = []
    for label, quota in enumerate(quotas):
        members = np.flatnonzero(ds.labels == label)
        if quota > len(members):
            raise DatasetError(
                f"class '{ds.class_names[label]}' has {len(members)} items, {quota} requested")
        chosen.extend(make_rng(seed, SPLIT, label, 1).permutation(members)[:quota])
    return ds.take(sorted(chosen))


def subset_per_class(ds: Dataset, per_class: int, seed: int) -> Dataset:
    return balanced_subset(ds, per_class * ds.num_classes, seed)


def train_test(num_classes: int, per_class_train: int, per_class_test: int, size: int,
               seed: int, palette_shift: float = 0.0) -> Tuple[Dataset, Dataset]:
    """Generate and split so each class gets exactly the requested counts."""
    total = per_class_train + per_class_test
    full = generate_synthetic(num_classes, total, size, seed, palette_shift)
    return split(full, per_class_test / total, seed)


def flatten_pixels(images: Sequence[np.ndarray]) -> np.ndarray:
    return np.asarray(images, dtype=np.float32).reshape(len(images), -1) / 255.0
