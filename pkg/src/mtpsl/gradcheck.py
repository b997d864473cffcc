"""Central finite-difference verification of analytic gradients.

Every training objective is checked on a 2-task toy model in float64:
backpropagated gradients must match (f(p+h) - f(p-h)) / 2h coordinate-wise.
The finite-difference side re-evaluates the objective as a black box, so it
stays independent of the autograd path it verifies. Large tensors are
spot-checked on a seeded sample of coordinates; small tensors (biases,
conditioner rows) are checked in full.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .consistency import CropParams
from .crosstask import MappingConfig, ModelState, strategy_objective
from .networks import EncoderConfig
from .tasks import LabelMask, TaskSpec


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    checked: int
    worst_param: str | None = None

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol


def finite_difference_check(objective, named_params, *, h: float = 1e-7,
                            max_entries_per_tensor: int | None = None,
                            seed: int = 0, name: str = "objective") -> GradCheckResult:
    """Compare backward() gradients against central differences.

    ``objective`` must be a deterministic closure returning a scalar tensor.
    The relative error uses a unit floor, |a - fd| / max(1, |a|, |fd|), so
    near-zero gradients are compared absolutely. The default step keeps
    truncation error small even through the per-pixel normalization of
    direction heads, whose curvature blows up as pre-normalization norms
    shrink; float64 keeps the matching roundoff at roughly 1e-9.
    """
    params = [(n, p) for n, p in named_params if p.requires_grad]
    for _, p in params:
        p.grad = None
    objective().backward()
    analytic = {
        n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for n, p in params
    }

    rng = np.random.default_rng(seed)
    max_err, worst, checked = 0.0, None, 0
    with torch.no_grad():
        for pname, p in params:
            flat = p.data.view(-1)
            n = flat.numel()
            if max_entries_per_tensor is not None and n > max_entries_per_tensor:
                idxs = np.sort(rng.choice(n, size=max_entries_per_tensor, replace=False))
            else:
                idxs = np.arange(n)
            a_flat = analytic[pname].view(-1)
            for i in idxs:
                i = int(i)
                orig = flat[i].item()
                flat[i] = orig + h
                f_plus = float(objective())
                flat[i] = orig - h
                f_minus = float(objective())
                flat[i] = orig
                fd = (f_plus - f_minus) / (2.0 * h)
                a = a_flat[i].item()
                err = abs(a - fd) / max(1.0, abs(a), abs(fd))
                checked += 1
                if err > max_err:
                    max_err, worst = err, pname
    return GradCheckResult(name=name, max_rel_err=max_err, checked=checked, worst_param=worst)


# ---------------------------------------------------------------------------
# toy problem shared by the test suite and the `mtpsl gradcheck` command


def toy_tasks() -> list[TaskSpec]:
    return [
        TaskSpec(0, "seg", 3, "cross_entropy", "miou", higher_is_better=True),
        TaskSpec(1, "normals", 3, "cosine", "mean_angle_err", higher_is_better=False),
    ]


def toy_encoder_cfg() -> EncoderConfig:
    # two stages so 8x8 images still allow a genuine 4x4 consistency crop
    return EncoderConfig(widths=(4, 8))


def toy_mapping_cfg() -> MappingConfig:
    return MappingConfig(input_width=4, trunk_widths=(4, 8))


def toy_batch(seed: int = 0, size: int = 8):
    """Four 2-task images: two labelled for seg only, one for normals only,
    one fully labelled, so every objective has live cross-task pairs and the
    contrastive/discriminator strategies get in-batch negatives."""
    rng = np.random.default_rng(seed)
    images = torch.from_numpy(rng.uniform(0.1, 0.9, size=(4, 3, size, size)))
    seg = torch.from_numpy(rng.integers(0, 3, size=(4, 1, size, size)).astype(np.int64))
    raw = rng.normal(size=(4, 3, size, size))
    raw[:, 2] = np.abs(raw[:, 2]) + 0.5
    normals = torch.from_numpy(raw / np.linalg.norm(raw, axis=1, keepdims=True))
    labels = {0: seg, 1: normals}
    masks = [
        LabelMask.of({0}, 2),
        LabelMask.of({1}, 2),
        LabelMask.of({0}, 2),
        LabelMask.of({0, 1}, 2),
    ]
    return images, labels, masks


def build_toy_state(strategy: str, seed: int = 0, uncertainty: bool = False) -> ModelState:
    torch.manual_seed(seed)
    state = ModelState.for_strategy(
        strategy, toy_tasks(), toy_encoder_cfg(),
        uncertainty=uncertainty, mapping_cfg=toy_mapping_cfg(),
    )
    return state.double()


def run_suite(max_entries_per_tensor: int = 32, seed: int = 0) -> list[GradCheckResult]:
    """Finite-difference checks for every objective on the toy problem."""
    images, labels, masks = toy_batch(seed)
    crop = CropParams(top=1, left=2, height=4, width=4)
    results = []
    for strategy in ("sl", "ssl", "ours", "ours_no_reg", "direct_map",
                     "perceptual_map", "contrastive", "discriminator"):
        state = build_toy_state(strategy, seed=seed)

        if strategy == "ours":
            # training treats the regularizer's feature target as a constant
            # (stop-gradient); pin it so the differenced function is the one
            # whose gradient the backward pass computes
            from .crosstask import full_objective

            with torch.no_grad():
                target = state.encode(images)

            def objective(state=state, target=target):
                return full_objective(state, images, labels, masks,
                                      regularizer_target=target).total
        else:
            def objective(state=state, strategy=strategy):
                report = strategy_objective(state, strategy, images, labels, masks, crop=crop)
                return report.total

        # the discriminator objective is the generator step: its parameters
        # are deliberately constant there, so they are excluded from the check
        named = [
            (n, p) for n, p in state.named_parameters()
            if not n.startswith("discriminator.")
        ]
        results.append(
            finite_difference_check(
                objective, named, max_entries_per_tensor=max_entries_per_tensor,
                seed=seed, name=strategy,
            )
        )
    return results
