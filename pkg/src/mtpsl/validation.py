"""Input validation helpers for the estimator-facing API."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError
from .tasks import Sample, TaskSpec


def check_image_array(X, stride: int) -> np.ndarray:
    """Coerce to a float32 (N, 3, H, W) batch with stride-compatible dims."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1] != 3:
        raise ShapeError(f"expected images of shape (N, 3, H, W), got {X.shape}")
    if X.shape[2] % stride or X.shape[3] % stride:
        raise ShapeError(f"spatial dims {X.shape[2:]} must be divisible by {stride}")
    return X


def check_sample_list(samples, tasks: list[TaskSpec], stride: int) -> list[Sample]:
    """Validate a training set: Sample instances with consistent image shapes
    and label shapes matching each task's channel count."""
    if not samples:
        raise ConfigError("empty sample list")
    by_id = {t.id: t for t in tasks}
    shape = None
    for i, s in enumerate(samples):
        if not isinstance(s, Sample):
            raise ConfigError(f"item {i} is {type(s).__name__}, expected Sample")
        check_image_array(s.image, stride)
        if shape is None:
            shape = s.image.shape
        elif s.image.shape != shape:
            raise ShapeError(f"sample {i} image shape {s.image.shape} != {shape}")
        if s.mask is None:
            raise ConfigError(f"sample {i} has no label mask")
        for t, label in s.labels.items():
            if t not in by_id:
                raise ConfigError(f"sample {i} labelled for unknown task id {t}")
            spec = by_id[t]
            expected = 1 if spec.loss_kind == "cross_entropy" else spec.out_channels
            if label.shape != (expected, *shape[-2:]):
                raise ShapeError(
                    f"sample {i} task {spec.name!r} label shape {label.shape}, "
                    f"expected {(expected, *shape[-2:])}"
                )
    return list(samples)
