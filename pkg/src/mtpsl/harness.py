"""Experiment runner: deterministic training loop, evaluation, single-task
baselines and comparison tables.

Training is single-threaded math with seeded generators (numpy for data
order and crops, torch for parameter init), so a config plus a seed fully
determines the final parameters and the checkpoint bytes.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .consistency import sample_crop
from .crosstask import MappingConfig, ModelState, strategy_objective, STRATEGIES
from .errors import ConfigError, TrainingDiverged
from .losses import LossReport
from .metrics import ConfusionMatrix, delta_mtl
from .networks import EncoderConfig, save_checkpoint
from .synth import SceneConfig, SynthDataset, generate_dataset, load_dataset
from .tasks import IGNORE_INDEX, LabelMask, Sample, TaskSpec, default_tasks

PROTOCOLS = ("full", "one", "random", "imbalanced")


@dataclass
class ExperimentConfig:
    strategy: str = "ours"
    protocol: str = "one"
    ratios: list[float] | None = None  # imbalanced protocol only
    n_train: int = 300
    n_test: int = 100
    epochs: int = 40
    batch_size: int = 8
    lr: float = 1e-4
    lr_halve_frac: float = 0.5  # halve the learning rate at this fraction of epochs
    lambda_ct: float = 1.0
    margin: float = 0.1
    mapping_lr_mult: float = 1.0
    uncertainty: bool = False
    seed: int = 0
    out_dir: str = "runs"
    run_name: str | None = None
    data_path: str | None = None  # pre-generated dataset container; else generated from scene
    encoder_widths: tuple[int, ...] = (16, 32, 64)
    mapping_input_width: int = 16
    ssl_min_frac: float = 0.5
    scene: SceneConfig = field(default_factory=SceneConfig)

    def __post_init__(self):
        if isinstance(self.scene, dict):
            self.scene = SceneConfig(**self.scene)
        self.encoder_widths = tuple(self.encoder_widths)
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        for name in ("n_train", "n_test", "epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.lr <= 0 or self.lambda_ct < 0 or self.mapping_lr_mult <= 0:
            raise ConfigError("learning rates must be positive and lambda_ct non-negative")

    @property
    def tasks(self) -> list[TaskSpec]:
        return default_tasks(self.scene.num_classes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def resolved_run_name(self) -> str:
        return self.run_name or f"{self.strategy}-{self.protocol}-seed{self.seed}"


def collate(samples: list[Sample], tasks: list[TaskSpec]):
    """Stack samples into full-batch tensors. Label rows for tasks an image is
    not labelled for are placeholders (ignore-filled for segmentation) and are
    never read by the objectives."""
    images = torch.from_numpy(np.stack([s.image for s in samples])).float()
    B, _, H, W = images.shape
    labels: dict[int, torch.Tensor] = {}
    for t in tasks:
        if t.loss_kind == "cross_entropy":
            buf = torch.full((B, 1, H, W), IGNORE_INDEX, dtype=torch.int64)
        else:
            buf = torch.zeros((B, t.out_channels, H, W), dtype=torch.float32)
        for n, s in enumerate(samples):
            if t.id in s.labels:
                arr = torch.from_numpy(np.ascontiguousarray(s.labels[t.id]))
                buf[n] = arr.to(buf.dtype)
        labels[t.id] = buf
    masks = [s.mask for s in samples]
    return images, labels, masks


def evaluate(model, images: torch.Tensor, labels: dict[int, torch.Tensor],
             tasks: list[TaskSpec], batch_size: int = 16) -> dict[int, float]:
    """Dataset-level metrics on a fully-labelled split."""
    confusion: ConfusionMatrix | None = None
    sums = {t.id: 0.0 for t in tasks}
    counts = {t.id: 0 for t in tasks}
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            batch = images[start:start + batch_size]
            preds = model.predict_all(batch)
            for t in tasks:
                pred = preds[t.id]
                label = labels[t.id][start:start + batch.shape[0]]
                if t.metric_kind == "miou":
                    if confusion is None:
                        confusion = ConfusionMatrix(t.out_channels)
                    for i in range(pred.shape[0]):
                        confusion.update(pred[i].numpy(), label[i].numpy())
                elif t.metric_kind == "abs_err":
                    sums[t.id] += float((pred - label).abs().sum())
                    counts[t.id] += label.numel()
                else:  # mean_angle_err
                    dots = (pred * label).sum(dim=-3).clamp(-1.0, 1.0)
                    sums[t.id] += float(torch.rad2deg(torch.arccos(dots)).sum())
                    counts[t.id] += dots.numel()
    out = {}
    for t in tasks:
        if t.metric_kind == "miou":
            out[t.id] = confusion.miou()
        else:
            out[t.id] = sums[t.id] / counts[t.id]
    return out


def _mean_rank_best(history: list[dict[int, float]], tasks: list[TaskSpec]) -> int:
    """Epoch index with the best mean per-task rank (ties -> latest epoch)."""
    n = len(history)
    ranks = np.zeros(n)
    for t in tasks:
        values = np.array([h[t.id] for h in history])
        order = np.argsort(-values if t.higher_is_better else values, kind="stable")
        r = np.empty(n)
        r[order] = np.arange(n)
        ranks += r
    best = 0
    for e in range(n):
        if ranks[e] <= ranks[best]:
            best = e
    return best


@dataclass
class ExperimentReport:
    config: dict
    config_hash: str
    run_dir: str
    history: list[dict]  # per-epoch {"epoch", "metrics", "xt_terms", "mean_loss"}
    best_epoch: int
    best_metrics: dict
    final_metrics: dict
    wall_clock_s: float
    term_keys: list[str]
    zero_norm_events: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _load_or_generate(cfg: ExperimentConfig) -> SynthDataset:
    if cfg.data_path:
        return load_dataset(cfg.data_path)
    return generate_dataset(cfg.scene, cfg.n_train, cfg.n_test, cfg.protocol,
                            cfg.seed, cfg.ratios)


def _build_state(cfg: ExperimentConfig, tasks: list[TaskSpec]) -> ModelState:
    torch.manual_seed(cfg.seed)
    return ModelState.for_strategy(
        cfg.strategy, tasks, EncoderConfig(widths=cfg.encoder_widths),
        uncertainty=cfg.uncertainty,
        mapping_cfg=MappingConfig(input_width=cfg.mapping_input_width),
    )


def _make_optimizers(state: ModelState, cfg: ExperimentConfig):
    groups = [{"params": state.main_parameters(), "lr": cfg.lr}]
    mapping = state.mapping_parameters()
    if mapping:
        groups.append({"params": mapping, "lr": cfg.lr * cfg.mapping_lr_mult})
    main_opt = torch.optim.Adam(groups)
    disc_opt = None
    if state.discriminator is not None:
        disc_opt = torch.optim.Adam(state.discriminator.parameters(), lr=cfg.lr)
    return main_opt, disc_opt


@dataclass
class LoopStats:
    log_rows: list[dict]
    term_keys: set[str]
    zero_norm_events: int


def fit_loop(state: ModelState, cfg: ExperimentConfig, train_images: torch.Tensor,
             train_labels: dict[int, torch.Tensor], train_masks: list,
             on_epoch=None) -> LoopStats:
    """The optimization loop shared by the experiment runner and the
    estimator: seeded shuffling, per-strategy objective, adaptive-moment
    updates with a halving schedule, divergence detection, per-step logging.
    """
    main_opt, disc_opt = _make_optimizers(state, cfg)
    rng = np.random.default_rng(cfg.seed)
    stride = state.encoder_cfg.stride
    n_train = train_images.shape[0]
    halve_at = int(np.floor(cfg.epochs * cfg.lr_halve_frac))

    stats = LoopStats(log_rows=[], term_keys=set(), zero_norm_events=0)
    step = 0
    for epoch in range(cfg.epochs):
        if epoch == halve_at and epoch > 0:
            for opt in filter(None, (main_opt, disc_opt)):
                for group in opt.param_groups:
                    group["lr"] *= 0.5
        perm = rng.permutation(n_train)
        epoch_xt = 0
        epoch_loss = 0.0
        n_batches = 0
        for lo in range(0, n_train, cfg.batch_size):
            idx = torch.from_numpy(perm[lo:lo + cfg.batch_size].copy())
            images = train_images[idx]
            labels = {t: buf[idx] for t, buf in train_labels.items()}
            masks = [train_masks[int(i)] for i in idx]
            crop = None
            if cfg.strategy == "ssl":
                crop = sample_crop(images.shape[-2], images.shape[-1],
                                   seed=int(rng.integers(2 ** 63)),
                                   min_frac=cfg.ssl_min_frac, stride=stride)
            report: LossReport = strategy_objective(
                state, cfg.strategy, images, labels, masks,
                lambda_ct=cfg.lambda_ct, margin=cfg.margin, crop=crop,
            )
            if not torch.isfinite(report.total):
                raise TrainingDiverged(
                    f"non-finite loss at step {step}",
                    step=step, lr=main_opt.param_groups[0]["lr"], terms=report.terms,
                )
            main_opt.zero_grad(set_to_none=True)
            report.total.backward()
            main_opt.step()
            d_loss = report.extras.get("disc_loss")
            if d_loss is not None and disc_opt is not None:
                disc_opt.zero_grad(set_to_none=True)
                d_loss.backward()
                disc_opt.step()
                report.terms["disc"] = float(d_loss.detach())

            stats.term_keys.update(report.terms)
            stats.zero_norm_events += report.zero_norm_events
            epoch_xt += report.cross_task_terms
            epoch_loss += report.total_value
            n_batches += 1
            row = {"step": step, "epoch": epoch, "total": report.total_value,
                   "xt_terms": report.cross_task_terms}
            row.update({f"term_{k}": v for k, v in report.terms.items()})
            row.update({f"task{t}": v for t, v in report.per_task.items()})
            stats.log_rows.append(row)
            step += 1
        if on_epoch is not None:
            on_epoch(epoch, {"xt_terms": epoch_xt,
                             "mean_loss": epoch_loss / max(n_batches, 1)})
    return stats


def train(cfg: ExperimentConfig, tasks: list[TaskSpec] | None = None,
          data: SynthDataset | None = None) -> ExperimentReport:
    """Run one experiment: train, evaluate every epoch, select the best epoch
    by mean per-task rank, and write report.json / losses.csv / checkpoints
    under ``out_dir/run_name``. ``data`` overrides dataset generation (used by
    the single-task baselines to train on label subsets)."""
    start_time = time.perf_counter()
    tasks = tasks or cfg.tasks
    run_dir = Path(cfg.out_dir) / cfg.resolved_run_name()
    run_dir.mkdir(parents=True, exist_ok=True)

    if data is None:
        data = _load_or_generate(cfg)
    n_train = len(data.train)
    train_images, train_labels, train_masks = collate(data.train, tasks)
    test_images, test_labels, _ = collate(data.test, tasks)

    state = _build_state(cfg, tasks)

    history: list[dict] = []
    snapshots: list[dict] = []

    def on_epoch(epoch: int, epoch_stats: dict) -> None:
        metrics = evaluate(state, test_images, test_labels, tasks)
        history.append({"epoch": epoch, "metrics": {str(k): v for k, v in metrics.items()},
                        **epoch_stats})
        snapshots.append({k: v.detach().clone() for k, v in state.state_dict().items()})

    loop = fit_loop(state, cfg, train_images, train_labels, train_masks, on_epoch=on_epoch)

    metric_hist = [{t.id: h["metrics"][str(t.id)] for t in tasks} for h in history]
    best_epoch = _mean_rank_best(metric_hist, tasks)

    meta = {"config": cfg.to_dict(), "config_hash": cfg.config_hash()}
    final_path = run_dir / "checkpoint_final.bin"
    save_checkpoint(final_path, state, {**meta, "epoch": cfg.epochs - 1})
    state.load_state_dict(snapshots[best_epoch])
    save_checkpoint(run_dir / "checkpoint_best.bin", state, {**meta, "epoch": best_epoch})

    _write_losses_csv(run_dir / "losses.csv", loop.log_rows)
    report = ExperimentReport(
        config=cfg.to_dict(),
        config_hash=cfg.config_hash(),
        run_dir=str(run_dir),
        history=history,
        best_epoch=best_epoch,
        best_metrics=history[best_epoch]["metrics"],
        final_metrics=history[-1]["metrics"],
        wall_clock_s=time.perf_counter() - start_time,
        term_keys=sorted(loop.term_keys),
        zero_norm_events=loop.zero_norm_events,
    )
    with open(run_dir / "report.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
    return report


def _write_losses_csv(path, rows: list[dict]) -> None:
    keys = ["step", "epoch", "total", "xt_terms"]
    extra = sorted({k for row in rows for k in row} - set(keys))
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys + extra, restval="")
        writer.writeheader()
        writer.writerows(rows)


def run_stl_baselines(cfg: ExperimentConfig, tasks: list[TaskSpec] | None = None) -> dict[int, ExperimentReport]:
    """Train one single-task model per task on that task's labelled subset
    (same backbone, one head). Feeds the multi-task performance score."""
    tasks = tasks or cfg.tasks
    data = _load_or_generate(cfg)
    reports: dict[int, ExperimentReport] = {}
    for spec in tasks:
        sub_spec = dataclasses.replace(spec, id=0)
        subset = [
            Sample(image=s.image, labels={0: s.labels[spec.id]}, mask=LabelMask.of({0}, 1))
            for s in data.train
            if spec.id in s.mask.labelled
        ]
        if not subset:
            raise ConfigError(f"no training images labelled for task {spec.name!r}")
        test = [
            Sample(image=s.image, labels={0: s.labels[spec.id]}, mask=LabelMask.of({0}, 1))
            for s in data.test
        ]
        sub_cfg = dataclasses.replace(
            cfg, strategy="sl", run_name=f"stl-{spec.name}-seed{cfg.seed}",
            n_train=len(subset), uncertainty=False,
        )
        prepared = SynthDataset(scene=cfg.scene, protocol=cfg.protocol, seed=cfg.seed,
                                train=subset, test=test)
        reports[spec.id] = train(sub_cfg, [sub_spec], data=prepared)
    return reports


def load_report(run_dir) -> dict:
    with open(Path(run_dir) / "report.json") as fh:
        return json.load(fh)


def _scan_run_dirs(reports_dir) -> list[Path]:
    root = Path(reports_dir)
    if (root / "report.json").exists():
        return [root]
    return sorted(p.parent for p in root.glob("**/report.json"))


def compare(reports_dir, out_csv, plots_dir=None) -> list[dict]:
    """Aggregate run reports into a strategy-by-metric table (mean over runs,
    one row per strategy/protocol) plus the multi-task performance score
    against the single-task rows, and plot each run's loss curves.

    Returns the table rows; also writes ``out_csv`` and one PNG per run.
    """
    run_dirs = _scan_run_dirs(reports_dir)
    if not run_dirs:
        raise ConfigError(f"no report.json found under {reports_dir}")
    reports = [load_report(d) for d in run_dirs]
    num_classes = reports[0]["config"]["scene"]["num_classes"]
    tasks = default_tasks(num_classes)

    stl_values: dict[str, list[float]] = {}
    groups: dict[tuple[str, str], list[dict]] = {}
    for rep in reports:
        name = rep["config"]["run_name"] or ""
        if name.startswith("stl-"):
            task_name = name.split("-")[1]
            stl_values.setdefault(task_name, []).append(rep["best_metrics"]["0"])
        else:
            key = (rep["config"]["strategy"], rep["config"]["protocol"])
            groups.setdefault(key, []).append(rep)

    stl_means = {name: float(np.mean(v)) for name, v in stl_values.items()}
    have_stl = set(stl_means) == {t.name for t in tasks}

    rows = []
    if have_stl:
        row = {"strategy": "stl", "protocol": "", "n_runs": max(len(v) for v in stl_values.values())}
        for t in tasks:
            row[f"{t.name}_{t.metric_kind}"] = stl_means[t.name]
        row["delta_mtl"] = 0.0
        rows.append(row)
    for (strategy, protocol), reps in sorted(groups.items()):
        row = {"strategy": strategy, "protocol": protocol, "n_runs": len(reps)}
        means = {}
        for t in tasks:
            means[t.id] = float(np.mean([r["best_metrics"][str(t.id)] for r in reps]))
            row[f"{t.name}_{t.metric_kind}"] = means[t.id]
        if have_stl:
            row["delta_mtl"] = delta_mtl(
                [means[t.id] for t in tasks],
                [stl_means[t.name] for t in tasks],
                [t.higher_is_better for t in tasks],
            )
        else:
            row["delta_mtl"] = ""
        rows.append(row)

    fieldnames = ["strategy", "protocol", "n_runs"] + [
        f"{t.name}_{t.metric_kind}" for t in tasks
    ] + ["delta_mtl"]
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)

    plots = Path(plots_dir) if plots_dir else out_csv.parent / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    for run_dir in run_dirs:
        _plot_losses(run_dir, plots)
    return rows


def _plot_losses(run_dir: Path, plots_dir: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    losses_path = run_dir / "losses.csv"
    if not losses_path.exists():
        return
    with open(losses_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return
    steps = [int(r["step"]) for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, [float(r["total"]) for r in rows], label="total", lw=1.2)
    for key in sorted(rows[0]):
        if key.startswith("term_"):
            values = [float(r[key]) if r[key] else np.nan for r in rows]
            ax.plot(steps, values, label=key[5:], lw=0.8, alpha=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(run_dir.name)
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(plots_dir / f"{run_dir.name}.png", dpi=110)
    plt.close(fig)
