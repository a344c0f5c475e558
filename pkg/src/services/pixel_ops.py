"""Pixel-space helpers shared by attacks, probes and evaluation."""

from typing import Optional, Union

import numpy as np

from ..core.exceptions import ShapeError
from ..core.models import Perturbation

PIXEL_MIN = 0.0
PIXEL_MAX = 255.0


def apply(delta: Optional[Union[Perturbation, np.ndarray]], images: np.ndarray) -> np.ndarray:
    """image + delta clamped to [0,255]; works on one image or a (N,H,W,3) batch."""
    images = np.asarray(images, dtype=np.float32)
    if delta is None:
        return images
    offsets = delta.delta if isinstance(delta, Perturbation) else np.asarray(delta, dtype=np.float32)
    if offsets.shape != images.shape[-3:]:
        raise ShapeError(f"perturbation shape {offsets.shape} does not match image shape {images.shape[-3:]}")
    return np.clip(images + offsets, PIXEL_MIN, PIXEL_MAX)


def float32_bound(epsilon: float) -> np.float32:
    """Largest float32 not above `epsilon`, so clamped values never exceed the bound."""
    bound = np.float32(epsilon)
    if float(bound) > float(epsilon):
        bound = np.nextafter(bound, np.float32(0))
    return bound


def project(delta: np.ndarray, epsilon: float) -> np.ndarray:
    bound = float32_bound(epsilon)
    return np.clip(np.asarray(delta, dtype=np.float32), -bound, bound)
