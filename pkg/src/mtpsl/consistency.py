"""Crop-equivariance consistency for unlabelled tasks.

Predictions on an unlabelled task should not depend on whether the model
sees the full image or a crop: the crop of the full-image prediction is
penalized (mean squared error, on raw head outputs) against the prediction
on the cropped image. Crop sizes are snapped to the encoder stride grid so
both branches stay shape-compatible without any resizing; gradients flow
through both branches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ShapeError


@dataclass(frozen=True)
class CropParams:
    top: int
    left: int
    height: int
    width: int

    def compose(self, inner: "CropParams") -> "CropParams":
        """Window equivalent to applying ``self`` first, then ``inner``."""
        if inner.top + inner.height > self.height or inner.left + inner.width > self.width:
            raise ShapeError(f"{inner} does not fit inside {self}")
        return CropParams(self.top + inner.top, self.left + inner.left, inner.height, inner.width)


def sample_crop(height: int, width: int, seed: int, min_frac: float = 0.5,
                stride: int = 8) -> CropParams:
    """Uniform random window with dims >= min_frac of the image, snapped to
    multiples of ``stride``."""
    if height < 2 * stride or width < 2 * stride:
        raise ShapeError(f"image {height}x{width} too small for stride-{stride} crops")
    rng = np.random.default_rng(seed)

    def pick(full: int) -> tuple[int, int]:
        lo = int(np.ceil(min_frac * full / stride))
        hi = full // stride
        size = int(rng.integers(lo, hi + 1)) * stride
        offset = int(rng.integers(0, full - size + 1))
        return offset, size

    top, crop_h = pick(height)
    left, crop_w = pick(width)
    return CropParams(top=top, left=left, height=crop_h, width=crop_w)


def apply_crop(tensor: torch.Tensor, r: CropParams) -> torch.Tensor:
    """Exact sub-window along the two trailing dims; no interpolation."""
    H, W = tensor.shape[-2], tensor.shape[-1]
    if r.top < 0 or r.left < 0 or r.top + r.height > H or r.left + r.width > W:
        raise ShapeError(f"crop {r} out of bounds for spatial dims {(H, W)}")
    return tensor[..., r.top:r.top + r.height, r.left:r.left + r.width]


def ssl_objective(model, images: torch.Tensor, labels, masks, crop: CropParams):
    """Supervised objective plus the crop-consistency term of the
    semi-supervised baseline, sharing one crop window across the batch:

        (1/N) sum_n (1/|U_n|) sum_{t in U_n} MSE(crop(pred_t(x)), pred_t(crop(x)))
    """
    from .losses import supervised_objective

    preds_full = model.predict_all(images)
    report = supervised_objective(model, images, labels, masks, preds=preds_full)
    preds_crop = model.predict_all(apply_crop(images, crop))

    term = images.new_zeros(())
    n_terms = 0
    for t in sorted(preds_full):
        rows = [n for n, m in enumerate(masks) if t in m.unlabelled]
        if not rows:
            continue
        idx = torch.as_tensor(rows)
        diff = apply_crop(preds_full[t][idx], crop) - preds_crop[t][idx]
        per_image = diff.pow(2).mean(dim=(-3, -2, -1))
        weights = torch.as_tensor(
            [1.0 / (len(masks) * len(masks[n].unlabelled)) for n in rows],
            dtype=per_image.dtype,
        )
        term = term + (per_image * weights).sum()
        n_terms += len(rows)
    if n_terms:
        report.terms["consistency"] = float(term.detach())
        report.total = report.total + term
    return report


def ssl_consistency_loss(model, image: torch.Tensor, unlabelled, r: CropParams) -> torch.Tensor:
    """Mean over unlabelled tasks of MSE(crop(predict(x)), predict(crop(x)))."""
    unlabelled = sorted(unlabelled)
    if not unlabelled:
        return torch.zeros(())
    preds_full = model.predict_all(image)
    preds_crop = model.predict_all(apply_crop(image, r))
    total = 0.0
    for t in unlabelled:
        diff = apply_crop(preds_full[t], r) - preds_crop[t]
        total = total + diff.pow(2).mean()
    return total / len(unlabelled)
