"""Synthetic multi-task scenes: segmentation, depth and surface normals that
are analytically coupled.

Scenes are axis-aligned rectangles and circles painted back to front. Each
shape carries a planar depth ramp; its surface normal is computed from the
ramp coefficients, never by differencing the rendered depth, so normals are
exact even at occlusion boundaries (boundary pixels take the top shape's
normal). Class ids are tied to disjoint depth bands, which gives the tasks
nonzero mutual information by construction. The image is a class-colored
rendering shaded by depth plus seeded Gaussian noise; labels are never
noised.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DatasetFormatError
from .tasks import LabelMask, Sample, make_masks

DATASET_MAGIC = b"MTPS"

# fixed palette, one RGB row per class id (background first)
_PALETTE = np.array(
    [
        [0.15, 0.15, 0.18],
        [0.85, 0.30, 0.25],
        [0.25, 0.70, 0.30],
        [0.25, 0.40, 0.85],
        [0.90, 0.75, 0.20],
        [0.70, 0.30, 0.75],
        [0.30, 0.75, 0.75],
        [0.80, 0.55, 0.35],
    ],
    dtype=np.float64,
)


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    min_shapes: int = 2
    max_shapes: int = 6
    num_classes: int = 5  # including background class 0
    depth_min: float = 0.1
    depth_max: float = 1.0
    noise_sigma: float = 0.02
    # world-space height per depth unit, with pixel spacing 1: depth ramps are
    # gentle in depth units (class->depth coupling stays tight) yet produce
    # surface tilts tens of degrees wide, so the normals task carries signal
    slope_scale: float = 48.0
    seed: int = 0

    def __post_init__(self):
        if self.height % 8 or self.width % 8:
            raise ConfigError(f"scene dims must be divisible by 8, got {self.height}x{self.width}")
        if not 2 <= self.num_classes <= len(_PALETTE):
            raise ConfigError(f"num_classes must be in [2, {len(_PALETTE)}]")
        if not 0 < self.min_shapes <= self.max_shapes:
            raise ConfigError("need 0 < min_shapes <= max_shapes")
        if not 0 < self.depth_min < self.depth_max:
            raise ConfigError("need 0 < depth_min < depth_max")


@dataclass
class ShapeParams:
    kind: str  # "rect" | "circle"
    class_id: int
    base_depth: float
    ramp_x: float  # d(depth)/d(col), per pixel
    ramp_y: float  # d(depth)/d(row), per pixel
    center: tuple[float, float]  # (row, col)
    extent: tuple[float, float]  # rect: (half_h, half_w); circle: (radius, radius)


@dataclass
class Scene:
    """Rendered scene with per-pixel internals kept for verification."""

    image: np.ndarray  # (3, H, W) float32
    seg: np.ndarray  # (1, H, W) int16
    depth: np.ndarray  # (1, H, W) float32
    normals: np.ndarray  # (3, H, W) float32, unit per pixel
    shape_index: np.ndarray  # (H, W) int16, -1 = background
    shapes: list[ShapeParams]


def _plane_normal(ramp_x: float, ramp_y: float, slope_scale: float) -> np.ndarray:
    n = np.array([-ramp_x * slope_scale, -ramp_y * slope_scale, 1.0])
    return n / np.linalg.norm(n)


def render_scene(cfg: SceneConfig) -> Scene:
    """Deterministically render one scene from ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    H, W = cfg.height, cfg.width
    span = cfg.depth_max - cfg.depth_min
    n_shape_classes = cfg.num_classes - 1
    # shapes live in the front 80% of the depth range; background sits at depth_max
    band = 0.8 * span / n_shape_classes
    ramp_max = 0.5 * span / max(H, W)

    n_shapes = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
    shapes = []
    for _ in range(n_shapes):
        class_id = int(rng.integers(1, cfg.num_classes))
        base = cfg.depth_min + (class_id - 1) * band + band * rng.uniform(0.1, 0.9)
        kind = "rect" if rng.uniform() < 0.5 else "circle"
        cy = rng.uniform(0.15 * H, 0.85 * H)
        cx = rng.uniform(0.15 * W, 0.85 * W)
        if kind == "rect":
            extent = (rng.uniform(H / 10, H / 4), rng.uniform(W / 10, W / 4))
        else:
            r = rng.uniform(H / 10, H / 4)
            extent = (r, r)
        shapes.append(
            ShapeParams(
                kind=kind,
                class_id=class_id,
                base_depth=float(base),
                ramp_x=float(rng.uniform(-ramp_max, ramp_max)),
                ramp_y=float(rng.uniform(-ramp_max, ramp_max)),
                center=(float(cy), float(cx)),
                extent=(float(extent[0]), float(extent[1])),
            )
        )

    rows = np.arange(H, dtype=np.float64)[:, None]
    cols = np.arange(W, dtype=np.float64)[None, :]

    seg = np.zeros((H, W), dtype=np.int16)
    depth = np.full((H, W), cfg.depth_max, dtype=np.float64)
    normals = np.zeros((3, H, W), dtype=np.float64)
    normals[2] = 1.0  # flat background
    shape_index = np.full((H, W), -1, dtype=np.int16)

    # painter's algorithm: far shapes first, near shapes overwrite
    order = sorted(range(n_shapes), key=lambda i: -shapes[i].base_depth)
    for idx in order:
        sh = shapes[idx]
        cy, cx = sh.center
        if sh.kind == "rect":
            inside = (np.abs(rows - cy) <= sh.extent[0]) & (np.abs(cols - cx) <= sh.extent[1])
        else:
            inside = (rows - cy) ** 2 + (cols - cx) ** 2 <= sh.extent[0] ** 2
        plane = sh.base_depth + sh.ramp_x * (cols - cx) + sh.ramp_y * (rows - cy)
        seg[inside] = sh.class_id
        depth[inside] = plane[inside]
        n = _plane_normal(sh.ramp_x, sh.ramp_y, cfg.slope_scale)
        for k in range(3):
            normals[k][inside] = n[k]
        shape_index[inside] = idx

    shade = np.clip(1.0 - 0.6 * (depth - cfg.depth_min) / span, 0.15, 1.0)
    image = _PALETTE[seg].transpose(2, 0, 1) * shade[None]
    image = image + rng.normal(0.0, cfg.noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0)

    return Scene(
        image=image.astype(np.float32),
        seg=seg[None].copy(),
        depth=depth[None].astype(np.float32),
        normals=normals.astype(np.float32),
        shape_index=shape_index,
        shapes=shapes,
    )


def generate_scene(cfg: SceneConfig) -> Sample:
    """Render a scene and package it as a fully-labelled :class:`Sample`."""
    scene = render_scene(cfg)
    mask = LabelMask.of({0, 1, 2}, 3)
    return Sample(
        image=scene.image,
        labels={0: scene.seg, 1: scene.depth, 2: scene.normals},
        mask=mask,
    )


def splitmix64(state: int) -> tuple[int, int]:
    """One step of the splitmix64 sequence; returns (next_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return state, z ^ (z >> 31)


def sample_seeds(master_seed: int, count: int) -> list[int]:
    """Independent per-sample seeds derived from the master seed."""
    state = master_seed & 0xFFFFFFFFFFFFFFFF
    out = []
    for _ in range(count):
        state, value = splitmix64(state)
        out.append(value)
    return out


@dataclass
class SynthDataset:
    scene: SceneConfig
    protocol: str
    seed: int
    train: list[Sample]
    test: list[Sample]
    ratios: list[float] | None = None


def generate_dataset(cfg: SceneConfig, n_train: int, n_test: int, protocol: str,
                     seed: int, ratios: list[float] | None = None) -> SynthDataset:
    """Train split masked by ``protocol`` (mask seed = master seed); test split
    is always fully labelled since evaluation needs every ground truth."""
    num_tasks = 3
    masks = make_masks(protocol, n_train, num_tasks, seed, ratios)
    seeds = sample_seeds(seed, n_train + n_test)

    train = []
    for n in range(n_train):
        full = generate_scene(dataclasses.replace(cfg, seed=seeds[n]))
        kept = {t: full.labels[t] for t in masks[n].labelled}
        train.append(Sample(image=full.image, labels=kept, mask=masks[n]))
    test = [
        generate_scene(dataclasses.replace(cfg, seed=seeds[n_train + m]))
        for m in range(n_test)
    ]
    return SynthDataset(scene=cfg, protocol=protocol, seed=seed, train=train, test=test,
                        ratios=list(ratios) if ratios is not None else None)


def save_dataset(path, dataset: SynthDataset) -> None:
    from .container import write_container

    arrays: dict[str, np.ndarray] = {}
    for split_name, split in (("train", dataset.train), ("test", dataset.test)):
        for i, sample in enumerate(split):
            arrays[f"{split_name}/{i:05d}/image"] = sample.image
            for t in sorted(sample.labels):
                arrays[f"{split_name}/{i:05d}/label{t}"] = sample.labels[t]
    meta = {
        "kind": "dataset",
        "scene": dataclasses.asdict(dataset.scene),
        "protocol": dataset.protocol,
        "ratios": dataset.ratios,
        "seed": dataset.seed,
        "n_train": len(dataset.train),
        "n_test": len(dataset.test),
        "train_masks": [sorted(s.mask.labelled) for s in dataset.train],
    }
    write_container(path, DATASET_MAGIC, meta, arrays)


def load_dataset(path) -> SynthDataset:
    from .container import read_container

    header, arrays = read_container(path, DATASET_MAGIC)
    if header.get("kind") != "dataset":
        raise DatasetFormatError(f"{path}: not a dataset container")
    scene = SceneConfig(**header["scene"])
    num_tasks = 3

    def build(split_name: str, count: int, masks) -> list[Sample]:
        out = []
        for i in range(count):
            prefix = f"{split_name}/{i:05d}/"
            labelled = masks[i] if masks is not None else list(range(num_tasks))
            labels = {t: arrays[prefix + f"label{t}"] for t in labelled}
            out.append(
                Sample(
                    image=arrays[prefix + "image"],
                    labels=labels,
                    mask=LabelMask.of(labelled, num_tasks),
                )
            )
        return out

    train = build("train", header["n_train"], header["train_masks"])
    test = build("test", header["n_test"], None)
    return SynthDataset(scene=scene, protocol=header["protocol"], seed=header["seed"],
                        train=train, test=test, ratios=header.get("ratios"))
