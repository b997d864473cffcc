"""Task definitions, samples, and partial-label masking protocols.

A task set is a list of :class:`TaskSpec` with dense ids ``0..K-1``. Every
training image carries a :class:`LabelMask` splitting the task set into a
labelled part and an unlabelled part; the masking protocols below turn a
fully-labelled dataset into the partially-annotated regimes used for
training (one label per image, a random subset per image, or imbalanced
per-task label budgets).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

IGNORE_INDEX = 255

LOSS_KINDS = ("cross_entropy", "l1", "cosine")
METRIC_KINDS = ("miou", "abs_err", "mean_angle_err")


@dataclass(frozen=True)
class TaskSpec:
    """One dense prediction task: identity, output shape and scoring rules."""

    id: int
    name: str
    out_channels: int
    loss_kind: str
    metric_kind: str
    higher_is_better: bool

    def __post_init__(self):
        if self.id < 0:
            raise ConfigError(f"task id must be >= 0, got {self.id}")
        if self.out_channels < 1:
            raise ConfigError(f"out_channels must be >= 1, got {self.out_channels}")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss_kind {self.loss_kind!r}")
        if self.metric_kind not in METRIC_KINDS:
            raise ConfigError(f"unknown metric_kind {self.metric_kind!r}")
        if self.loss_kind == "cosine" and self.out_channels != 3:
            raise ConfigError("cosine tasks predict unit 3-vectors; out_channels must be 3")


def check_task_set(tasks: list[TaskSpec]) -> list[TaskSpec]:
    """Validate that ids are dense 0..K-1 and names unique; returns tasks sorted by id."""
    tasks = sorted(tasks, key=lambda t: t.id)
    ids = [t.id for t in tasks]
    if ids != list(range(len(tasks))):
        raise ConfigError(f"task ids must be dense 0..K-1, got {ids}")
    names = [t.name for t in tasks]
    if len(set(names)) != len(names):
        raise ConfigError(f"task names must be unique, got {names}")
    return tasks


def default_tasks(num_classes: int = 5) -> list[TaskSpec]:
    """The synthetic benchmark trio: segmentation, depth, surface normals."""
    return [
        TaskSpec(0, "seg", num_classes, "cross_entropy", "miou", higher_is_better=True),
        TaskSpec(1, "depth", 1, "l1", "abs_err", higher_is_better=False),
        TaskSpec(2, "normals", 3, "cosine", "mean_angle_err", higher_is_better=False),
    ]


@dataclass(frozen=True)
class LabelMask:
    """Partition of the task set into labelled and unlabelled ids."""

    labelled: frozenset[int]
    unlabelled: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "labelled", frozenset(self.labelled))
        object.__setattr__(self, "unlabelled", frozenset(self.unlabelled))
        if not self.labelled:
            raise ConfigError("every image must be labelled for at least one task")
        if self.labelled & self.unlabelled:
            raise ConfigError("labelled and unlabelled task sets overlap")

    @classmethod
    def of(cls, labelled, num_tasks: int) -> "LabelMask":
        labelled = frozenset(labelled)
        if not labelled <= set(range(num_tasks)):
            raise ConfigError(f"labelled ids {sorted(labelled)} outside 0..{num_tasks - 1}")
        return cls(labelled, frozenset(range(num_tasks)) - labelled)

    @property
    def num_tasks(self) -> int:
        return len(self.labelled) + len(self.unlabelled)


@dataclass
class Sample:
    """An image plus dense labels for exactly the tasks in ``mask.labelled``.

    ``image`` is float32 of shape (3, H, W) in [0, 1]. Labels are keyed by
    task id: segmentation is an integer class map (1, H, W) with
    :data:`IGNORE_INDEX` for void pixels, everything else float32 of shape
    (out_channels, H, W).
    """

    image: np.ndarray
    labels: dict[int, np.ndarray] = field(default_factory=dict)
    mask: LabelMask | None = None

    def __post_init__(self):
        if self.mask is not None and set(self.labels) != set(self.mask.labelled):
            raise ConfigError(
                f"labels present for {sorted(self.labels)} but mask says {sorted(self.mask.labelled)}"
            )


def make_one_label_mask(num_images: int, num_tasks: int, seed: int) -> list[LabelMask]:
    """One labelled task per image, balanced so per-task counts differ by <= 1.

    Assignment is a seeded shuffle of the round-robin sequence
    ``0, 1, ..., K-1, 0, 1, ...`` rather than i.i.d. sampling, which matches
    near-equal per-task totals (e.g. 2975 images over 2 tasks -> 1487/1488).
    """
    if num_images < num_tasks:
        raise ConfigError(f"need at least {num_tasks} images to label every task, got {num_images}")
    rng = np.random.default_rng(seed)
    assignment = np.arange(num_images) % num_tasks
    rng.shuffle(assignment)
    return [LabelMask.of({int(t)}, num_tasks) for t in assignment]


def make_random_label_mask(num_images: int, num_tasks: int, seed: int) -> list[LabelMask]:
    """Between 1 and K-1 labelled tasks per image.

    The label count is uniform over {1..K-1}, then that many tasks are drawn
    uniformly without replacement.
    """
    if num_tasks < 2:
        raise ConfigError("random-label protocol needs at least 2 tasks")
    rng = np.random.default_rng(seed)
    masks = []
    for _ in range(num_images):
        count = int(rng.integers(1, num_tasks))
        chosen = rng.choice(num_tasks, size=count, replace=False)
        masks.append(LabelMask.of({int(t) for t in chosen}, num_tasks))
    return masks


def make_imbalanced_mask(num_images: int, ratios: list[float], seed: int) -> list[LabelMask]:
    """Label task t on floor(ratios[t] * num_images) images, no image left empty.

    Per-task label quotas are dealt like cards: every image first receives one
    random quota slot (guaranteeing a non-empty mask), then the remaining
    slots are distributed among images not already holding that task. When the
    quotas cannot cover every image, leftover images are repaired by granting
    the task with the largest ratio; if that repair would inflate the task
    more than 10% past its quota the configuration is rejected.
    """
    if not ratios:
        raise ConfigError("ratios must be non-empty")
    for r in ratios:
        if not 0.0 < r <= 1.0:
            raise ConfigError(f"ratios must lie in (0, 1], got {r}")
    num_tasks = len(ratios)
    rng = np.random.default_rng(seed)
    quotas = [int(np.floor(r * num_images)) for r in ratios]

    slots = np.repeat(np.arange(num_tasks), quotas)
    rng.shuffle(slots)
    image_order = rng.permutation(num_images)
    held: list[set[int]] = [set() for _ in range(num_images)]

    covered = min(num_images, len(slots))
    for i in range(covered):
        held[image_order[i]].add(int(slots[i]))

    shortfall = num_images - len(slots)
    if shortfall > 0:
        repair_task = int(np.argmax(ratios))
        if quotas[repair_task] + shortfall > 1.1 * quotas[repair_task]:
            raise ConfigError(
                f"ratios {ratios} leave {shortfall} images unlabelled; repairing them would "
                f"exceed task {repair_task}'s quota of {quotas[repair_task]} by more than 10%"
            )
        for i in range(covered, num_images):
            held[image_order[i]].add(repair_task)

    for slot in slots[covered:]:
        t = int(slot)
        eligible = np.flatnonzero([t not in h for h in held])
        held[int(eligible[rng.integers(len(eligible))])].add(t)

    return [LabelMask.of(h, num_tasks) for h in held]


def make_masks(protocol: str, num_images: int, num_tasks: int, seed: int,
               ratios: list[float] | None = None) -> list[LabelMask]:
    """Protocol dispatch: full | one | random | imbalanced."""
    if protocol == "full":
        return [LabelMask.of(range(num_tasks), num_tasks) for _ in range(num_images)]
    if protocol == "one":
        return make_one_label_mask(num_images, num_tasks, seed)
    if protocol == "random":
        return make_random_label_mask(num_images, num_tasks, seed)
    if protocol == "imbalanced":
        if ratios is None:
            raise ConfigError("imbalanced protocol needs per-task ratios")
        if len(ratios) != num_tasks:
            raise ConfigError(f"got {len(ratios)} ratios for {num_tasks} tasks")
        return make_imbalanced_mask(num_images, ratios, seed)
    raise ConfigError(f"unknown protocol {protocol!r}")


def save_mask_manifest(path, masks: list[LabelMask], seed: int, protocol: str) -> None:
    manifest = {
        "seed": seed,
        "protocol": protocol,
        "masks": [sorted(m.labelled) for m in masks],
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh)


def load_mask_manifest(path, num_tasks: int) -> tuple[list[LabelMask], dict]:
    with open(path) as fh:
        manifest = json.load(fh)
    masks = [LabelMask.of(ids, num_tasks) for ids in manifest["masks"]]
    return masks, manifest
