"""Cross-task consistency in learned joint pairwise task-spaces.

For every (unlabelled task s, labelled task t) pair of an image, the
prediction for s and the ground truth for t are mapped into a joint
embedding space for the pair and pulled together with a cosine distance.
One shared mapping trunk serves all pairs and both directions: each layer's
feature map is modulated per-channel (scale and shift) by vectors computed
from a one-hot K x K pair matrix, so the parameter count does not grow with
the number of pairs. A regularizer keeps embeddings close to the encoder
feature of the image, which blocks the trivial solution where everything
maps to one point.

Also implemented here: the alternative strategies that replace the joint
space (per-pair direct and perceptual mappings, an in-batch contrastive
hinge, and a discriminator on matched/mismatched embedding pairs), plus the
combined model container used for training.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .consistency import CropParams, apply_crop, ssl_objective
from .errors import ConfigError, ShapeError
from .losses import LossReport, supervised_objective, uncertainty_weighted
from .networks import EncoderConfig, MultiTaskModel, _conv, _init_conv
from .tasks import IGNORE_INDEX, LabelMask, TaskSpec

_EPS = 1e-8

STRATEGIES = (
    "sl",
    "ssl",
    "ours",
    "ours_no_cond",
    "ours_no_reg",
    "direct_map",
    "perceptual_map",
    "contrastive",
    "discriminator",
)


# ---------------------------------------------------------------------------
# pair conditioning


@dataclass(frozen=True)
class PairCondition:
    """One-hot K x K matrix selecting the input task and target pair.

    Row = input task, column = the other task of the pair; the diagonal is
    always zero because no self-task relation is defined.
    """

    matrix: torch.Tensor

    def __post_init__(self):
        m = self.matrix
        if m.dim() != 2 or m.shape[0] != m.shape[1]:
            raise ConfigError(f"pair condition must be square, got {tuple(m.shape)}")
        if not torch.all((m == 0) | (m == 1)):
            raise ConfigError("pair condition entries must be 0 or 1")
        if int(m.sum()) != 1:
            raise ConfigError("pair condition must have exactly one active entry")
        if torch.any(torch.diagonal(m) != 0):
            raise ConfigError("self-task relations are undefined; diagonal must be zero")

    @property
    def num_tasks(self) -> int:
        return self.matrix.shape[0]

    @property
    def flat(self) -> torch.Tensor:
        return self.matrix.reshape(-1)


def make_condition(s: int, t: int, direction: str, num_tasks: int) -> PairCondition:
    """Condition for mapping into pair (s, t): the source direction maps task
    s's prediction (entry [s, t]), the target direction maps task t's ground
    truth (entry [t, s])."""
    if s == t:
        raise ConfigError(f"no self-task relation: s == t == {s}")
    if not (0 <= s < num_tasks and 0 <= t < num_tasks):
        raise ConfigError(f"task ids ({s}, {t}) outside 0..{num_tasks - 1}")
    if direction not in ("source", "target"):
        raise ConfigError(f"direction must be 'source' or 'target', got {direction!r}")
    m = torch.zeros(num_tasks, num_tasks)
    if direction == "source":
        m[s, t] = 1.0
    else:
        m[t, s] = 1.0
    return PairCondition(m)


def film_modulate(h: torch.Tensor, a_c: torch.Tensor, a_b: torch.Tensor) -> torch.Tensor:
    """Per-channel affine: out[m] = a_c[m] * h[m] + a_b[m] (batched or not)."""
    if a_c.shape != a_b.shape:
        raise ShapeError(f"scale {tuple(a_c.shape)} vs shift {tuple(a_b.shape)}")
    if h.dim() == 3 and a_c.dim() == 1:
        scale, shift = a_c[:, None, None], a_b[:, None, None]
    elif h.dim() == 4 and a_c.dim() == 2:
        scale, shift = a_c[:, :, None, None], a_b[:, :, None, None]
    else:
        raise ShapeError(f"feature rank {h.dim()} with modulation rank {a_c.dim()}")
    if a_c.shape[-1] != h.shape[-3]:
        raise ShapeError(f"{a_c.shape[-1]} modulation channels for {h.shape[-3]} feature channels")
    return scale * h + shift


class PairConditioner(nn.Module):
    """One-layer fully-connected maps from the flattened pair matrix to a
    per-channel scale and shift for every trunk layer.

    The scale is parameterized as 1 + linear(A), so zeroed parameters give
    the identity modulation and the mapping becomes pair-independent.
    """

    def __init__(self, num_tasks: int, layer_widths: tuple[int, ...]):
        super().__init__()
        self.num_tasks = num_tasks
        self.scale = nn.ModuleList()
        self.shift = nn.ModuleList()
        for m in layer_widths:
            for dest in (self.scale, self.shift):
                lin = nn.Linear(num_tasks * num_tasks, m)
                nn.init.zeros_(lin.bias)
                dest.append(lin)

    def forward(self, layer: int, cond_flat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        cond_flat = cond_flat.to(self.scale[layer].weight.dtype)
        return 1.0 + self.scale[layer](cond_flat), self.shift[layer](cond_flat)


# ---------------------------------------------------------------------------
# joint pairwise task-space mapping


@dataclass(frozen=True)
class MappingConfig:
    input_width: int = 16
    trunk_widths: tuple[int, ...] | None = None  # default: (32, ..., 32, C)

    def resolved_widths(self, encoder_cfg: EncoderConfig) -> tuple[int, ...]:
        if self.trunk_widths is not None:
            widths = tuple(self.trunk_widths)
        else:
            widths = (32,) * (encoder_cfg.stages - 1) + (encoder_cfg.feature_channels,)
        if len(widths) != encoder_cfg.stages:
            raise ConfigError(
                f"mapping trunk has {len(widths)} layers but the encoder has "
                f"{encoder_cfg.stages} stages; embeddings would not land at the feature resolution"
            )
        if widths[-1] != encoder_cfg.feature_channels:
            raise ConfigError("last trunk width must equal the encoder feature channels")
        return widths


class MappingNet(nn.Module):
    """Task-agnostic mapping into the joint pairwise task-space.

    A per-task input convolution adapts each task's channel count, then a
    shared strided trunk (stride schedule matching the encoder) produces an
    embedding of shape (C, H', W'). When conditioning is enabled, every trunk
    layer is FiLM-modulated by the pair matrix; otherwise a single un-modulated
    mapping serves all pairs.
    """

    def __init__(self, tasks: list[TaskSpec], encoder_cfg: EncoderConfig,
                 cfg: MappingConfig | None = None, conditioned: bool = True):
        super().__init__()
        cfg = cfg or MappingConfig()
        self.tasks = tasks
        self.num_tasks = len(tasks)
        widths = cfg.resolved_widths(encoder_cfg)
        self.input_layers = nn.ModuleDict(
            {t.name: _conv(t.out_channels, cfg.input_width) for t in tasks}
        )
        trunk = []
        cin = cfg.input_width
        for w in widths:
            trunk.append(_conv(cin, w, stride=2))
            cin = w
        self.trunk = nn.ModuleList(trunk)
        self.conditioner = PairConditioner(self.num_tasks, widths) if conditioned else None
        self.head = _init_conv(nn.Conv2d(cin, encoder_cfg.feature_channels, kernel_size=1))

    def _task_name(self, task_id: int) -> str:
        for t in self.tasks:
            if t.id == task_id:
                return t.name
        raise KeyError(f"unknown task id {task_id}")

    def trunk_forward(self, h: torch.Tensor, cond_flat: torch.Tensor | None) -> torch.Tensor:
        if self.conditioner is not None and cond_flat is None:
            raise ConfigError("conditioned mapping needs a pair condition")
        for i, conv in enumerate(self.trunk):
            h = conv(h)
            if self.conditioner is not None:
                a_c, a_b = self.conditioner(i, cond_flat)
                h = film_modulate(h, a_c, a_b)
            h = F.relu(h)
        return self.head(h)

    def forward(self, dense: torch.Tensor, task_id: int,
                cond: torch.Tensor | None) -> torch.Tensor:
        """dense (B, O_task, H, W) with per-row conditions (B, K, K)."""
        h = F.relu(self.input_layers[self._task_name(task_id)](dense))
        cond_flat = cond.reshape(cond.shape[0], -1) if cond is not None else None
        return self.trunk_forward(h, cond_flat)


def dense_from_label(label: torch.Tensor, spec: TaskSpec) -> torch.Tensor:
    """Ground truth as mapping input: segmentation class maps are one-hot
    encoded to the task's channel count (ignored pixels become all-zero);
    other labels pass through as float."""
    if spec.loss_kind == "cross_entropy":
        cls = label.long().squeeze(-3)  # (H, W) or (B, H, W)
        valid = cls != IGNORE_INDEX
        onehot = F.one_hot(torch.where(valid, cls, torch.zeros_like(cls)), spec.out_channels)
        onehot = onehot.float() * valid.unsqueeze(-1).float()
        return onehot.movedim(-1, -3)
    return label.float() if not label.is_floating_point() else label


def dense_from_prediction(pred: torch.Tensor, spec: TaskSpec) -> torch.Tensor:
    """Prediction as mapping input: segmentation logits become a softmax
    distribution (the ground-truth side sees the one-hot encoding, so the two
    directions differ only by distribution-vs-one-hot plus the pair bit)."""
    if spec.loss_kind == "cross_entropy":
        return torch.softmax(pred, dim=-3)
    return pred


def map_to_joint(net: MappingNet, dense: torch.Tensor, s: int, pair: tuple[int, int],
                 direction: str) -> torch.Tensor:
    """Map one task's dense map into the joint space of ``pair``; the
    condition row is built from ``pair`` and ``direction`` (s must be the
    input task: pair[0] for source, pair[1] for target)."""
    cond = make_condition(pair[0], pair[1], direction, net.num_tasks)
    expected = pair[0] if direction == "source" else pair[1]
    if s != expected:
        raise ConfigError(f"input task {s} does not match the {direction} slot of pair {pair}")
    squeeze = dense.dim() == 3
    if squeeze:
        dense = dense.unsqueeze(0)
    cond_rows = cond.matrix.unsqueeze(0).expand(dense.shape[0], -1, -1)
    emb = net(dense, s, cond_rows)
    return emb.squeeze(0) if squeeze else emb


# ---------------------------------------------------------------------------
# losses in the joint space


def _cosine_rows(a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Row-wise cosine distance on flattened tensors, with epsilon-guarded
    norms; also reports how many rows needed the guard."""
    a2 = a.reshape(a.shape[0], -1)
    b2 = b.reshape(b.shape[0], -1)
    if a2.shape != b2.shape:
        raise ShapeError(f"embedding shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    na = a2.norm(dim=1)
    nb = b2.norm(dim=1)
    clamped = int((na < _EPS).sum() + (nb < _EPS).sum())
    dist = 1.0 - (a2 * b2).sum(dim=1) / (na.clamp_min(_EPS) * nb.clamp_min(_EPS))
    return dist, clamped


def cross_task_loss(e_a: torch.Tensor, e_b: torch.Tensor) -> torch.Tensor:
    """Cosine distance between joint-space embeddings, in [0, 2] (averaged
    over the batch dimension when present)."""
    if e_a.dim() == e_b.dim() == 3:
        e_a, e_b = e_a.unsqueeze(0), e_b.unsqueeze(0)
    dist, _ = _cosine_rows(e_a, e_b)
    return dist.mean()


def mapping_regularizer(feature: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
    """Cosine distance between an embedding and the (detached) encoder feature
    of the same image. The feature is a constant target: gradients flow into
    the mapping only, so the encoder cannot collapse toward the mapping."""
    if feature.shape != emb.shape:
        raise ConfigError(
            f"regularizer needs matching shapes, got feature {tuple(feature.shape)} "
            f"vs embedding {tuple(emb.shape)}"
        )
    if feature.dim() == 3:
        feature, emb = feature.unsqueeze(0), emb.unsqueeze(0)
    dist, _ = _cosine_rows(feature.detach(), emb)
    return dist.mean()


# ---------------------------------------------------------------------------
# the full objective (supervised + cross-task + regularizer)


def _pair_tuples(masks: list[LabelMask]) -> list[tuple[int, int, int]]:
    """All (image row, unlabelled s, labelled t) pairs, in deterministic order."""
    return [
        (n, s, t)
        for n, m in enumerate(masks)
        for s in sorted(m.unlabelled)
        for t in sorted(m.labelled)
    ]


def _map_items(net: MappingNet, items: list[tuple[int, torch.Tensor, torch.Tensor]]) -> torch.Tensor:
    """Run the mapping on a heterogeneous list of (task id, dense, condition)
    in one trunk pass, grouping by task for the input layers; the result rows
    follow the input order."""
    by_task: dict[int, list[int]] = {}
    for pos, (tid, _, _) in enumerate(items):
        by_task.setdefault(tid, []).append(pos)
    pieces = []
    positions: list[int] = []
    for tid in sorted(by_task):
        rows = by_task[tid]
        dense = torch.stack([items[p][1] for p in rows])
        pieces.append(F.relu(net.input_layers[net._task_name(tid)](dense)))
        positions.extend(rows)
    h = torch.cat(pieces)
    cond = torch.stack([items[p][2] for p in positions]).reshape(len(items), -1)
    emb = net.trunk_forward(h, cond)
    inverse = torch.empty(len(items), dtype=torch.long)
    inverse[torch.as_tensor(positions)] = torch.arange(len(items))
    return emb[inverse]


def _joint_embeddings(state, preds, labels, tuples):
    """Embeddings for the prediction side (unlabelled s) and ground-truth side
    (labelled t) of every tuple, each of shape (len(tuples), C, H', W')."""
    K = len(state.tasks)
    dtype = next(state.mapping.parameters()).dtype
    items = []
    for n, s, t in tuples:
        dense = dense_from_prediction(preds[s][n], state.task(s))
        items.append((s, dense, make_condition(s, t, "source", K).matrix.to(dtype)))
    for n, s, t in tuples:
        dense = dense_from_label(labels[t][n], state.task(t)).to(dtype)
        items.append((t, dense, make_condition(s, t, "target", K).matrix.to(dtype)))
    emb = _map_items(state.mapping, items)
    return emb[: len(tuples)], emb[len(tuples):]


def full_objective(state, images, labels, masks, *, lambda_ct: float = 1.0,
                   use_regularizer: bool = True,
                   regularizer_target: torch.Tensor | None = None) -> LossReport:
    """Supervised objective plus, for each (unlabelled s, labelled t) pair,
    the cosine distance between the two joint-space embeddings and (optionally)
    the anti-collapse regularizer on both, averaged per image by 1/|U_n|.

    On fully-labelled data there are no pairs and the result equals the
    supervised objective exactly. The regularizer pulls embeddings toward the
    current encoder feature treated as a constant; pass ``regularizer_target``
    to pin that constant explicitly (finite-difference checks do).
    """
    feature = state.encode(images)
    preds = {t.id: state.predict_task(feature, t.id) for t in state.tasks}
    report = supervised_objective(state, images, labels, masks, preds=preds)

    tuples = _pair_tuples(masks)
    if not tuples:
        return report

    e_pred, e_gt = _joint_embeddings(state, preds, labels, tuples)
    weights = torch.tensor(
        [1.0 / (len(masks) * len(masks[n].unlabelled)) for n, _, _ in tuples],
        dtype=e_pred.dtype,
    )
    dist, clamped = _cosine_rows(e_pred, e_gt)
    ct_term = lambda_ct * (weights * dist).sum()
    total = report.total + ct_term
    report.terms["cross_task"] = float(ct_term.detach())
    report.cross_task_terms = len(tuples)
    report.zero_norm_events += clamped

    if use_regularizer:
        rows = torch.as_tensor([n for n, _, _ in tuples])
        target = regularizer_target if regularizer_target is not None else feature.detach()
        feat_rows = target[rows]
        reg_pred, c1 = _cosine_rows(feat_rows, e_pred)
        reg_gt, c2 = _cosine_rows(feat_rows, e_gt)
        reg_term = lambda_ct * (weights * (reg_pred + reg_gt)).sum()
        total = total + reg_term
        report.terms["regularizer"] = float(reg_term.detach())
        report.zero_norm_events += c1 + c2

    report.total = total
    return report


# ---------------------------------------------------------------------------
# alternative strategy: per-pair mapping networks (direct / perceptual)


class PairMapNet(nn.Module):
    """Dedicated encoder-decoder mapping one task's dense space to another's
    (O_s x H x W -> O_t x H x W). One instance per ordered task pair."""

    def __init__(self, in_channels: int, out_channels: int, widths: tuple[int, ...] = (16, 32)):
        super().__init__()
        layers = []
        cin = in_channels
        for w in widths:
            layers += [_conv(cin, w, stride=2), nn.ReLU()]
            cin = w
        for w in reversed(widths):
            layers += [nn.Upsample(scale_factor=2, mode="nearest"), _conv(cin, w), nn.ReLU()]
            cin = w
        layers.append(_conv(cin, out_channels))
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


def pair_key(s: int, t: int) -> str:
    return f"{s}to{t}"


def _flat_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    dist, _ = _cosine_rows(a.unsqueeze(0) if a.dim() == 3 else a,
                           b.unsqueeze(0) if b.dim() == 3 else b)
    return dist.mean()


def direct_map_loss(state, image, s: int, t: int, y_t: torch.Tensor) -> torch.Tensor:
    """Cosine distance between a per-pair mapped prediction for s and the
    ground truth for t."""
    net = state.pair_net(s, t)
    pred = dense_from_prediction(state.predict_all(image)[s], state.task(s))
    mapped = net(pred.unsqueeze(0) if pred.dim() == 3 else pred)
    target = dense_from_label(y_t, state.task(t)).to(mapped.dtype)
    return _flat_cosine(mapped.squeeze(0) if pred.dim() == 3 else mapped, target)


def perceptual_map_loss(state, image, s: int, t: int, y_s: torch.Tensor) -> torch.Tensor:
    """Cosine distance between the pair-mapped prediction and the pair-mapped
    ground truth of the *same* task s, measured in task t's space. Requires
    the image to be labelled for s."""
    if y_s is None:
        raise ConfigError("perceptual mapping needs the ground truth of the source task")
    net = state.pair_net(s, t)
    spec = state.task(s)
    pred = dense_from_prediction(state.predict_all(image)[s], spec)
    gt = dense_from_label(y_s, spec).to(pred.dtype)
    squeeze = pred.dim() == 3
    if squeeze:
        pred, gt = pred.unsqueeze(0), gt.unsqueeze(0)
    return _flat_cosine(net(pred), net(gt))


def direct_map_objective(state, images, labels, masks, *, lambda_ct: float = 1.0) -> LossReport:
    """Supervised objective plus per-pair direct mapping losses over all
    (unlabelled s, labelled t), weighted 1/|U_n| per image."""
    preds = state.predict_all(images)
    report = supervised_objective(state, images, labels, masks, preds=preds)
    tuples = _pair_tuples(masks)
    if not tuples:
        return report
    total_ct = images.new_zeros(())
    for n, s, t in tuples:
        pred = dense_from_prediction(preds[s][n], state.task(s)).unsqueeze(0)
        mapped = state.pair_net(s, t)(pred)
        target = dense_from_label(labels[t][n], state.task(t)).to(mapped.dtype).unsqueeze(0)
        w = 1.0 / (len(masks) * len(masks[n].unlabelled))
        total_ct = total_ct + w * _flat_cosine(mapped, target)
    ct_term = lambda_ct * total_ct
    report.terms["cross_task"] = float(ct_term.detach())
    report.cross_task_terms = len(tuples)
    report.total = report.total + ct_term
    return report


def perceptual_map_objective(state, images, labels, masks, *, lambda_ct: float = 1.0) -> LossReport:
    """Supervised objective plus perceptual mapping losses: for every labelled
    task s, prediction and ground truth are both mapped into every other
    task's space and pulled together (averaged over an image's pairs)."""
    preds = state.predict_all(images)
    report = supervised_objective(state, images, labels, masks, preds=preds)
    tuples = [
        (n, s, t)
        for n, m in enumerate(masks)
        for s in sorted(m.labelled)
        for t in range(len(state.tasks))
        if t != s
    ]
    if not tuples:
        return report
    counts = {n: sum(1 for nn_, _, _ in tuples if nn_ == n) for n, _, _ in tuples}
    total_ct = images.new_zeros(())
    for n, s, t in tuples:
        spec = state.task(s)
        pred = dense_from_prediction(preds[s][n], spec).unsqueeze(0)
        gt = dense_from_label(labels[s][n], spec).to(pred.dtype).unsqueeze(0)
        net = state.pair_net(s, t)
        total_ct = total_ct + _flat_cosine(net(pred), net(gt)) / (len(masks) * counts[n])
    ct_term = lambda_ct * total_ct
    report.terms["cross_task"] = float(ct_term.detach())
    report.cross_task_terms = len(tuples)
    report.total = report.total + ct_term
    return report


# ---------------------------------------------------------------------------
# alternative strategy: contrastive hinge on joint embeddings


def contrastive_pair_loss(pos_a: torch.Tensor, pos_b: torch.Tensor, neg_b: torch.Tensor,
                          margin: float = 0.1) -> torch.Tensor:
    """Hinge on cosine distances: the positive pair (same image, two tasks)
    must be closer than the negative pair (different images) by ``margin``."""
    pos = _flat_cosine(pos_a, pos_b)
    neg = _flat_cosine(pos_a, neg_b)
    return torch.clamp(pos - neg + margin, min=0.0)


def _same_pair_groups(tuples):
    groups: dict[tuple[int, int], list[int]] = {}
    for k, (_, s, t) in enumerate(tuples):
        groups.setdefault((s, t), []).append(k)
    return groups


def contrastive_objective(state, images, labels, masks, *, lambda_ct: float = 1.0,
                          margin: float = 0.1) -> LossReport:
    """Supervised objective plus the mean hinge over every valid in-batch
    triplet: for each (s, t) tuple, negatives are the ground-truth embeddings
    of the same pair from other images."""
    feature = state.encode(images)
    preds = {t.id: state.predict_task(feature, t.id) for t in state.tasks}
    report = supervised_objective(state, images, labels, masks, preds=preds)
    tuples = _pair_tuples(masks)
    if not tuples:
        return report
    e_pred, e_gt = _joint_embeddings(state, preds, labels, tuples)

    hinges = []
    for group in _same_pair_groups(tuples).values():
        for k in group:
            for j in group:
                if tuples[j][0] != tuples[k][0]:
                    hinges.append(contrastive_pair_loss(e_pred[k], e_gt[k], e_gt[j], margin))
    report.cross_task_terms = len(tuples)
    if not hinges:
        return report
    ct_term = lambda_ct * torch.stack(hinges).mean()
    report.terms["cross_task"] = float(ct_term.detach())
    report.total = report.total + ct_term
    return report


# ---------------------------------------------------------------------------
# alternative strategy: discriminator on matched/mismatched embedding pairs


class Discriminator(nn.Module):
    """Small convolutional classifier on channel-concatenated embedding pairs."""

    def __init__(self, embed_channels: int, width: int = 32):
        super().__init__()
        self.body = nn.Sequential(
            _conv(2 * embed_channels, width), nn.ReLU(),
            _conv(width, width, stride=2), nn.ReLU(),
        )
        self.classify = nn.Linear(width, 1)
        nn.init.zeros_(self.classify.bias)

    def forward(self, pairs: torch.Tensor) -> torch.Tensor:
        h = self.body(pairs).mean(dim=(-2, -1))
        return self.classify(h).squeeze(-1)


def discriminator_step(disc: Discriminator, pos_pairs: torch.Tensor,
                       neg_pairs: torch.Tensor) -> tuple[torch.Tensor | None, torch.Tensor | None]:
    """One alternating round: the discriminator's binary cross-entropy on
    detached embeddings (positives -> 1, negatives -> 0), and the adversarial
    loss pushing live positive pairs to be classified positive, computed with
    the discriminator frozen so only the task/mapping networks receive
    gradient. Returns (None, None) when either pair set is empty."""
    if pos_pairs.shape[0] == 0 or neg_pairs.shape[0] == 0:
        return None, None
    logits_pos = disc(pos_pairs.detach())
    logits_neg = disc(neg_pairs.detach())
    d_loss = 0.5 * (
        F.binary_cross_entropy_with_logits(logits_pos, torch.ones_like(logits_pos))
        + F.binary_cross_entropy_with_logits(logits_neg, torch.zeros_like(logits_neg))
    )
    for p in disc.parameters():
        p.requires_grad_(False)
    live = disc(pos_pairs)
    g_loss = F.binary_cross_entropy_with_logits(live, torch.ones_like(live))
    for p in disc.parameters():
        p.requires_grad_(True)
    return d_loss, g_loss


def adversarial_objective(state, images, labels, masks, *, lambda_ct: float = 1.0) -> LossReport:
    """Supervised objective plus the generator-side adversarial loss; the
    discriminator loss rides along in ``extras`` for its own optimizer."""
    feature = state.encode(images)
    preds = {t.id: state.predict_task(feature, t.id) for t in state.tasks}
    report = supervised_objective(state, images, labels, masks, preds=preds)
    tuples = _pair_tuples(masks)
    report.cross_task_terms = len(tuples)
    if not tuples:
        return report
    e_pred, e_gt = _joint_embeddings(state, preds, labels, tuples)

    neg_of: list[int] = []
    pos_rows: list[int] = []
    for group in _same_pair_groups(tuples).values():
        for i, k in enumerate(group):
            partner = next(
                (group[(i + step) % len(group)]
                 for step in range(1, len(group))
                 if tuples[group[(i + step) % len(group)]][0] != tuples[k][0]),
                None,
            )
            if partner is not None:
                pos_rows.append(k)
                neg_of.append(partner)
    if not pos_rows:
        return report
    pos = torch.cat([e_pred[pos_rows], e_gt[pos_rows]], dim=1)
    neg = torch.cat([e_pred[pos_rows], e_gt[neg_of]], dim=1)
    d_loss, g_loss = discriminator_step(state.discriminator, pos, neg)
    adv_term = lambda_ct * g_loss
    report.terms["adversarial"] = float(adv_term.detach())
    report.extras["disc_loss"] = d_loss
    report.total = report.total + adv_term
    return report


# ---------------------------------------------------------------------------
# combined model and strategy dispatch


def strategy_requirements(strategy: str) -> dict[str, bool]:
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    joint = strategy in ("ours", "ours_no_cond", "ours_no_reg", "contrastive", "discriminator")
    return {
        "mapping": joint,
        "conditioning": joint and strategy != "ours_no_cond",
        "pair_nets": strategy in ("direct_map", "perceptual_map"),
        "discriminator": strategy == "discriminator",
    }


class ModelState(MultiTaskModel):
    """Everything the optimizer touches: encoder, task heads, and whichever
    cross-task components the strategy needs (joint mapping, per-pair
    networks, discriminator, per-task uncertainty scalars)."""

    def __init__(self, tasks, encoder_cfg: EncoderConfig | None = None, *,
                 with_mapping: bool = False, with_conditioning: bool = True,
                 with_pair_nets: bool = False, with_discriminator: bool = False,
                 with_uncertainty: bool = False, mapping_cfg: MappingConfig | None = None):
        super().__init__(tasks, encoder_cfg)
        self.mapping = (
            MappingNet(self.tasks, self.encoder_cfg, mapping_cfg, conditioned=with_conditioning)
            if with_mapping else None
        )
        self.pair_nets = None
        if with_pair_nets:
            self.pair_nets = nn.ModuleDict(
                {
                    pair_key(s.id, t.id): PairMapNet(s.out_channels, t.out_channels)
                    for s in self.tasks
                    for t in self.tasks
                    if s.id != t.id
                }
            )
        self.discriminator = (
            Discriminator(self.encoder_cfg.feature_channels) if with_discriminator else None
        )
        self.log_vars = nn.Parameter(torch.zeros(len(self.tasks))) if with_uncertainty else None

    @classmethod
    def for_strategy(cls, strategy: str, tasks, encoder_cfg: EncoderConfig | None = None, *,
                     uncertainty: bool = False, mapping_cfg: MappingConfig | None = None):
        req = strategy_requirements(strategy)
        return cls(
            tasks,
            encoder_cfg,
            with_mapping=req["mapping"],
            with_conditioning=req["conditioning"],
            with_pair_nets=req["pair_nets"],
            with_discriminator=req["discriminator"],
            with_uncertainty=uncertainty,
            mapping_cfg=mapping_cfg,
        )

    def pair_net(self, s: int, t: int) -> PairMapNet:
        if self.pair_nets is None:
            raise ConfigError("this model was built without per-pair mapping networks")
        key = pair_key(s, t)
        if key not in self.pair_nets:
            raise ConfigError(f"no mapping network for pair ({s}, {t})")
        return self.pair_nets[key]

    def main_parameters(self):
        """Encoder, heads and uncertainty scalars (the base learning rate)."""
        params = list(self.encoder.parameters()) + list(self.heads.parameters())
        if self.log_vars is not None:
            params.append(self.log_vars)
        return params

    def mapping_parameters(self):
        """Joint mapping / per-pair networks (the mapping learning rate)."""
        params = []
        if self.mapping is not None:
            params += list(self.mapping.parameters())
        if self.pair_nets is not None:
            params += list(self.pair_nets.parameters())
        return params


def strategy_objective(state: ModelState, strategy: str, images, labels, masks, *,
                       lambda_ct: float = 1.0, margin: float = 0.1,
                       crop: CropParams | None = None) -> LossReport:
    """Evaluate the selected training objective on one batch. The strategy
    string fully determines which named terms appear in the report."""
    if strategy == "sl":
        report = supervised_objective(state, images, labels, masks)
    elif strategy == "ssl":
        if crop is None:
            raise ConfigError("ssl strategy needs a crop window")
        report = ssl_objective(state, images, labels, masks, crop)
    elif strategy in ("ours", "ours_no_cond"):
        report = full_objective(state, images, labels, masks, lambda_ct=lambda_ct)
    elif strategy == "ours_no_reg":
        report = full_objective(state, images, labels, masks, lambda_ct=lambda_ct,
                                use_regularizer=False)
    elif strategy == "direct_map":
        report = direct_map_objective(state, images, labels, masks, lambda_ct=lambda_ct)
    elif strategy == "perceptual_map":
        report = perceptual_map_objective(state, images, labels, masks, lambda_ct=lambda_ct)
    elif strategy == "contrastive":
        report = contrastive_objective(state, images, labels, masks, lambda_ct=lambda_ct,
                                       margin=margin)
    elif strategy == "discriminator":
        report = adversarial_objective(state, images, labels, masks, lambda_ct=lambda_ct)
    else:
        raise ConfigError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    return report
