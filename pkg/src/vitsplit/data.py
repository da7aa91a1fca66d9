"""Seeded synthetic image classification data."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_math import DTYPE


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    """Class templates with pixel std ``separation`` plus unit Gaussian noise."""

    num_classes: int = 8
    samples_per_class: int = 40
    image_size: int = 16
    channels: int = 1
    separation: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1 or self.samples_per_class < 1:
            raise ValueError("need at least one class and one sample per class")
        if self.image_size < 1 or self.channels < 1:
            raise ValueError("image_size and channels must be positive")
        if self.separation < 0:
            raise ValueError("separation must be non-negative")


def generate_synthetic(spec: SyntheticDatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(X, y)`` with X of shape (n, channels, size, size), shuffled."""
    rng = np.random.default_rng(spec.seed)
    shape = (spec.channels, spec.image_size, spec.image_size)
    templates = spec.separation * rng.standard_normal((spec.num_classes,) + shape)
    y = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    X = templates[y] + rng.standard_normal((len(y),) + shape)
    order = rng.permutation(len(y))
    return X[order].astype(DTYPE), y[order].astype(np.int64)
