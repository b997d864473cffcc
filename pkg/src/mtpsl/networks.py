"""Shared encoder with per-task decoders for dense prediction.

The backbone is a small strided-convolution encoder (one 2x downsample per
stage) with mirrored nearest-upsample decoders, sized for CPU training in
minutes. Decoders for direction-valued tasks (cosine loss) L2-normalize
their output per pixel. Weights are fan-in-scaled uniform, biases zero, so
a zero image maps to a zero feature.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ShapeError
from .tasks import TaskSpec, check_task_set

CHECKPOINT_MAGIC = b"MTCK"


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 3
    widths: tuple[int, ...] = (16, 32, 64)

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(self.widths))
        if len(self.widths) < 1 or self.feature_channels < 8:
            raise ConfigError(f"encoder widths too small: {self.widths}")

    @property
    def stages(self) -> int:
        return len(self.widths)

    @property
    def stride(self) -> int:
        return 2 ** self.stages

    @property
    def feature_channels(self) -> int:
        return self.widths[-1]


@dataclass(frozen=True)
class HeadConfig:
    """Per-task decoder: upsample stages mirroring the encoder, then a final
    conv emitting the task's channels (L2-normalized for cosine tasks)."""

    out_channels: int
    normalize: bool = False
    widths: tuple[int, ...] = field(default=())  # decoder widths, encoder-reversed when empty


def _init_conv(conv: nn.Conv2d) -> nn.Conv2d:
    nn.init.kaiming_uniform_(conv.weight, a=5 ** 0.5)
    nn.init.zeros_(conv.bias)
    return conv


def _conv(cin: int, cout: int, stride: int = 1) -> nn.Conv2d:
    return _init_conv(nn.Conv2d(cin, cout, kernel_size=3, stride=stride, padding=1))


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        layers = []
        cin = cfg.in_channels
        for w in cfg.widths:
            layers += [_conv(cin, w, stride=2), nn.ReLU()]
            cin = w
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


class Decoder(nn.Module):
    def __init__(self, enc: EncoderConfig, head: HeadConfig):
        super().__init__()
        widths = head.widths or tuple(reversed(enc.widths))
        self.normalize = head.normalize
        layers = []
        cin = enc.feature_channels
        for w in widths:
            layers += [nn.Upsample(scale_factor=2, mode="nearest"), _conv(cin, w), nn.ReLU()]
            cin = w
        layers.append(_conv(cin, head.out_channels))
        self.body = nn.Sequential(*layers)

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        out = self.body(feature)
        if self.normalize:
            norm = out.norm(dim=-3, keepdim=True).clamp_min(1e-8)
            out = out / norm
        return out


def _ensure_batched(x: torch.Tensor, rank: int) -> tuple[torch.Tensor, bool]:
    if x.dim() == rank:
        return x.unsqueeze(0), True
    if x.dim() == rank + 1:
        return x, False
    raise ShapeError(f"expected rank {rank} or {rank + 1} tensor, got shape {tuple(x.shape)}")


class MultiTaskModel(nn.Module):
    """Shared encoder plus one decoder head per task.

    Heads live in a ModuleDict keyed by task name, so checkpoint parameter
    names are canonical ("heads.depth.body.1.weight", ...). Methods accept
    single images (3, H, W) or batches (B, 3, H, W) and mirror the input's
    batching in their output.
    """

    def __init__(self, tasks: list[TaskSpec], encoder_cfg: EncoderConfig | None = None):
        super().__init__()
        self.tasks = check_task_set(tasks)
        self.encoder_cfg = encoder_cfg or EncoderConfig()
        self.encoder = Encoder(self.encoder_cfg)
        self.heads = nn.ModuleDict(
            {
                t.name: Decoder(
                    self.encoder_cfg,
                    HeadConfig(out_channels=t.out_channels, normalize=t.loss_kind == "cosine"),
                )
                for t in self.tasks
            }
        )

    def task(self, task_id: int) -> TaskSpec:
        try:
            return self.tasks[task_id]
        except IndexError:
            raise KeyError(f"unknown task id {task_id}") from None

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        """Image (3, H, W) -> shared feature (C, H/2^S, W/2^S)."""
        image, squeeze = _ensure_batched(image, 3)
        stride = self.encoder_cfg.stride
        if image.shape[-2] % stride or image.shape[-1] % stride:
            raise ShapeError(
                f"spatial dims {tuple(image.shape[-2:])} not divisible by encoder stride {stride}"
            )
        feature = self.encoder(image)
        return feature.squeeze(0) if squeeze else feature

    def predict_task(self, feature: torch.Tensor, task_id: int) -> torch.Tensor:
        """Shared feature -> dense prediction (O_t, H, W) for one task."""
        spec = self.task(task_id)
        feature, squeeze = _ensure_batched(feature, 3)
        out = self.heads[spec.name](feature)
        return out.squeeze(0) if squeeze else out

    def predict_all(self, image: torch.Tensor) -> dict[int, torch.Tensor]:
        """One encode shared by every head."""
        feature = self.encode(image)
        return {t.id: self.predict_task(feature, t.id) for t in self.tasks}

    def forward(self, image: torch.Tensor) -> dict[int, torch.Tensor]:
        return self.predict_all(image)


def save_checkpoint(path, model: nn.Module, meta: dict | None = None) -> None:
    """Flat float arrays keyed by canonical parameter names, plus a config echo.

    The container layout has no timestamps, so identical parameters produce
    byte-identical files.
    """
    from .container import write_container

    arrays = {
        name: param.detach().cpu().numpy().astype(np.float32)
        for name, param in sorted(model.state_dict().items())
    }
    write_container(path, CHECKPOINT_MAGIC, {"kind": "checkpoint", **(meta or {})}, arrays)


def load_checkpoint(path, model: nn.Module | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint; if ``model`` is given, load the parameters into it."""
    from .container import read_container

    header, arrays = read_container(path, CHECKPOINT_MAGIC)
    if model is not None:
        state = {k: torch.from_numpy(v) for k, v in arrays.items()}
        model.load_state_dict(state)
    return header, arrays
