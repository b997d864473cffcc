"""Per-task supervised losses, the masked multi-task objective, and
uncertainty-based loss weighting.

The multi-task objective averages per-image over the labelled tasks only:

    (1/N) sum_n (1/|T_n|) sum_{t in T_n} L_t(pred, label)

Losses for unlabelled tasks are never evaluated, so head parameters of a
task nobody in the batch is labelled for receive exactly zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeError, UndefinedLossError
from .tasks import IGNORE_INDEX, LabelMask, TaskSpec

_EPS = 1e-8


@dataclass
class LossReport:
    """Scalar view of one objective evaluation.

    ``terms`` holds the named, already-weighted objective components, so
    ``total`` always equals their sum; which keys appear is fully determined
    by the training strategy. ``per_task`` holds the mean supervised loss per
    contributing image and ``counts`` how many images contributed.
    """

    per_task: dict[int, float] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)
    terms: dict[str, float] = field(default_factory=dict)
    total: torch.Tensor | float = 0.0
    cross_task_terms: int = 0
    zero_norm_events: int = 0
    extras: dict = field(default_factory=dict)  # live tensors for auxiliary optimizers

    @property
    def total_value(self) -> float:
        if isinstance(self.total, torch.Tensor):
            return float(self.total.detach())
        return float(self.total)


def _per_pixel_cosine(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """1 - cosine between per-pixel direction vectors; shape (..., H, W)."""
    dot = (pred * target).sum(dim=-3)
    norms = pred.norm(dim=-3).clamp_min(_EPS) * target.norm(dim=-3).clamp_min(_EPS)
    return 1.0 - dot / norms


def task_loss(pred: torch.Tensor, label: torch.Tensor, spec: TaskSpec) -> torch.Tensor:
    """Supervised loss for one task on one image (or a batch, averaged).

    cross_entropy: mean over non-ignored pixels of -log softmax at the true
    class. l1: mean absolute difference. cosine: mean over pixels of one
    minus the cosine of the angle between prediction and label directions.
    """
    if spec.loss_kind == "cross_entropy":
        if pred.dim() == 3:
            pred = pred.unsqueeze(0)
        if pred.shape[-3] != spec.out_channels:
            raise ShapeError(f"expected {spec.out_channels} logit channels, got {pred.shape}")
        label = label.reshape(pred.shape[0], *pred.shape[-2:]).long()
        valid = label != IGNORE_INDEX
        if not bool(valid.any()):
            raise UndefinedLossError(f"all pixels ignored for task {spec.name!r}")
        return F.cross_entropy(pred, label, ignore_index=IGNORE_INDEX)
    if spec.loss_kind == "l1":
        if pred.shape != label.shape:
            raise ShapeError(f"prediction {tuple(pred.shape)} vs label {tuple(label.shape)}")
        return (pred - label).abs().mean()
    if spec.loss_kind == "cosine":
        if pred.shape != label.shape or pred.shape[-3] != 3:
            raise ShapeError(f"direction fields must be (..., 3, H, W), got {tuple(pred.shape)}")
        return _per_pixel_cosine(pred, label).mean()
    raise ConfigError(f"unknown loss kind {spec.loss_kind!r}")


def per_image_task_losses(
    preds: dict[int, torch.Tensor],
    labels: dict[int, torch.Tensor],
    masks: list[LabelMask],
    tasks: list[TaskSpec],
) -> dict[int, tuple[torch.Tensor, torch.Tensor]]:
    """For each task: (row indices labelled for it, per-image losses there).

    Only labelled rows are evaluated; tasks labelled nowhere are absent from
    the result, so no gradient path to their heads exists at all.
    """
    out: dict[int, tuple[torch.Tensor, torch.Tensor]] = {}
    for spec in tasks:
        rows = [n for n, m in enumerate(masks) if spec.id in m.labelled]
        if not rows:
            continue
        idx = torch.as_tensor(rows, dtype=torch.long)
        pred = preds[spec.id][idx]
        label = labels[spec.id][idx]
        if spec.loss_kind == "cross_entropy":
            label2d = label.reshape(pred.shape[0], *pred.shape[-2:]).long()
            pix = F.cross_entropy(pred, label2d, ignore_index=IGNORE_INDEX, reduction="none")
            valid = (label2d != IGNORE_INDEX).to(pix.dtype)
            counts = valid.sum(dim=(-2, -1))
            if bool((counts == 0).any()):
                raise UndefinedLossError(f"an image has all pixels ignored for task {spec.name!r}")
            per_image = (pix * valid).sum(dim=(-2, -1)) / counts
        elif spec.loss_kind == "l1":
            per_image = (pred - label).abs().mean(dim=(-3, -2, -1))
        else:
            per_image = _per_pixel_cosine(pred, label).mean(dim=(-2, -1))
        out[spec.id] = (idx, per_image)
    return out


def supervised_objective(
    model,
    images: torch.Tensor,
    labels: dict[int, torch.Tensor],
    masks: list[LabelMask],
    preds: dict[int, torch.Tensor] | None = None,
    apply_uncertainty: bool = True,
) -> LossReport:
    """Masked multi-task objective over a batch.

    ``labels[t]`` is a full-batch tensor; rows for images not labelled for t
    are placeholders and are never read. Pass ``preds`` to reuse an existing
    forward pass.

    When the model carries learned per-task ``log_vars``, the plain per-image
    average is replaced by the uncertainty weighting of the per-task mean
    losses (tasks absent from the batch are skipped).
    """
    if images.dim() != 4 or images.shape[0] == 0:
        raise ConfigError("batch must be a non-empty (B, 3, H, W) tensor")
    if len(masks) != images.shape[0]:
        raise ConfigError(f"{len(masks)} masks for batch of {images.shape[0]}")
    if preds is None:
        preds = model.predict_all(images)

    batch = images.shape[0]
    report = LossReport()
    total = images.new_zeros(())
    task_means: dict[int, torch.Tensor] = {}
    for task_id, (idx, per_image) in per_image_task_losses(preds, labels, masks, model.tasks).items():
        weights = torch.as_tensor(
            [1.0 / len(masks[int(n)].labelled) for n in idx], dtype=per_image.dtype
        )
        total = total + (per_image * weights).sum()
        task_means[task_id] = per_image.mean()
        report.per_task[task_id] = float(per_image.detach().mean())
        report.counts[task_id] = int(idx.numel())
    total = total / batch

    log_vars = getattr(model, "log_vars", None) if apply_uncertainty else None
    if log_vars is not None:
        present = sorted(task_means)
        total = uncertainty_weighted(
            torch.stack([task_means[t] for t in present]),
            log_vars[torch.as_tensor(present)],
        )
    report.terms["supervised"] = float(total.detach())
    report.total = total
    return report


def uncertainty_weighted(losses, log_vars: torch.Tensor) -> torch.Tensor:
    """Homoscedastic-uncertainty combination: sum_t exp(-s_t) * L_t + s_t.

    The same form is applied to every loss kind; the regression/classification
    constant of the original formulation is absorbed by the learned s_t.
    """
    if not isinstance(losses, torch.Tensor):
        losses = torch.stack(list(losses))
    if losses.shape != log_vars.shape:
        raise ConfigError(f"{losses.shape[0]} losses for {log_vars.shape[0]} log-variances")
    return (torch.exp(-log_vars) * losses + log_vars).sum()
