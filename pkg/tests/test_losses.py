import math

import numpy as np
import pytest
import torch

from mtpsl.errors import ConfigError, UndefinedLossError
from mtpsl.gradcheck import build_toy_state, finite_difference_check, toy_batch
from mtpsl.losses import supervised_objective, task_loss, uncertainty_weighted
from mtpsl.tasks import LabelMask, TaskSpec

SEG = TaskSpec(0, "seg", 3, "cross_entropy", "miou", True)
DEPTH = TaskSpec(1, "depth", 1, "l1", "abs_err", False)
NORMALS = TaskSpec(2, "normals", 3, "cosine", "mean_angle_err", False)


class TestTaskLoss:
    def test_l1_zero_on_match(self):
        x = torch.rand(1, 4, 4)
        assert task_loss(x, x.clone(), DEPTH).item() == 0.0

    def test_l1_symmetric(self):
        a, b = torch.rand(1, 4, 4), torch.rand(1, 4, 4)
        assert task_loss(a, b, DEPTH).item() == pytest.approx(task_loss(b, a, DEPTH).item())

    def test_cross_entropy_uniform_logits(self):
        logits = torch.zeros(3, 4, 4)
        labels = torch.randint(0, 3, (1, 4, 4))
        assert task_loss(logits, labels, SEG).item() == pytest.approx(math.log(3), rel=1e-6)

    def test_cross_entropy_ignores_void(self):
        logits = torch.randn(3, 2, 2)
        labels = torch.tensor([[[0, 255], [255, 255]]])
        expected = -torch.log_softmax(logits[:, 0, 0], dim=0)[0]
        assert task_loss(logits, labels, SEG).item() == pytest.approx(expected.item(), rel=1e-6)

    def test_cross_entropy_all_ignored(self):
        with pytest.raises(UndefinedLossError):
            task_loss(torch.randn(3, 2, 2), torch.full((1, 2, 2), 255), SEG)

    def test_cosine_matched_and_antipodal(self):
        n = torch.zeros(3, 4, 4)
        n[2] = 1.0
        assert task_loss(n, n.clone(), NORMALS).item() == pytest.approx(0.0, abs=1e-7)
        assert task_loss(-n, n, NORMALS).item() == pytest.approx(2.0, abs=1e-7)

    def test_nonnegative(self):
        torch.manual_seed(0)
        for spec, c in ((SEG, 3), (DEPTH, 1), (NORMALS, 3)):
            pred = torch.randn(c, 4, 4)
            label = torch.randint(0, 3, (1, 4, 4)) if spec is SEG else torch.randn(c, 4, 4)
            assert task_loss(pred, label, spec).item() >= 0.0


class TestSupervisedObjective:
    def test_single_image_single_task(self):
        images, labels, masks = toy_batch()
        state = build_toy_state("sl")
        one = supervised_objective(state, images[:1], {t: v[:1] for t, v in labels.items()},
                                   [masks[0]])
        pred = state.predict_all(images[0])[0]
        direct = task_loss(pred, labels[0][0], state.task(0)).detach()
        assert one.total_value == pytest.approx(float(direct), rel=1e-9)

    def test_disjoint_single_labels_average(self):
        images, labels, masks = toy_batch()
        state = build_toy_state("sl")
        with torch.no_grad():
            preds = state.predict_all(images)
        l_a = task_loss(preds[0][0], labels[0][0], state.task(0))
        l_b = task_loss(preds[1][1], labels[1][1], state.task(1))
        two = supervised_objective(state, images[:2], {t: v[:2] for t, v in labels.items()},
                                   masks[:2])
        assert two.total_value == pytest.approx(float(l_a + l_b) / 2, rel=1e-9)

    def test_unlabelled_head_gets_zero_gradient(self):
        images, labels, _ = toy_batch()
        state = build_toy_state("sl")
        masks = [LabelMask.of({0}, 2)] * 4  # nobody labelled for task 1
        report = supervised_objective(state, images, labels, masks)
        report.total.backward()
        for name, p in state.named_parameters():
            if name.startswith("heads.normals."):
                assert p.grad is None or p.grad.abs().max().item() <= 1e-8

    def test_permutation_invariant(self):
        images, labels, masks = toy_batch()
        state = build_toy_state("sl")
        fwd = supervised_objective(state, images, labels, masks).total_value
        perm = [2, 0, 3, 1]
        rev = supervised_objective(
            state, images[perm], {t: v[perm] for t, v in labels.items()},
            [masks[i] for i in perm],
        ).total_value
        assert fwd == pytest.approx(rev, rel=1e-12)

    def test_empty_batch_rejected(self):
        state = build_toy_state("sl")
        with pytest.raises(ConfigError):
            supervised_objective(state, torch.zeros(0, 3, 8, 8), {}, [])

    def test_counts_reported(self):
        images, labels, masks = toy_batch()
        state = build_toy_state("sl")
        report = supervised_objective(state, images, labels, masks)
        assert report.counts == {0: 3, 1: 2}


class TestUncertainty:
    def test_zero_log_vars_plain_sum(self):
        losses = torch.tensor([0.5, 1.5, 2.0])
        assert uncertainty_weighted(losses, torch.zeros(3)).item() == pytest.approx(4.0)

    def test_single_task_analytic(self):
        val = uncertainty_weighted(torch.tensor([2.0]), torch.tensor([math.log(2)]))
        assert val.item() == pytest.approx(1.0 + math.log(2), rel=1e-6)

    def test_gradient_matches_finite_differences(self):
        losses = torch.tensor([0.7, 1.3], dtype=torch.float64)
        s = torch.tensor([0.2, -0.4], dtype=torch.float64, requires_grad=True)
        result = finite_difference_check(
            lambda: uncertainty_weighted(losses, s), [("log_vars", s)], name="uncertainty",
        )
        assert result.max_rel_err < 1e-6

    def test_partial_derivative_formula(self):
        losses = torch.tensor([3.0], dtype=torch.float64)
        s = torch.tensor([0.5], dtype=torch.float64, requires_grad=True)
        uncertainty_weighted(losses, s).backward()
        expected = -math.exp(-0.5) * 3.0 + 1.0
        assert s.grad.item() == pytest.approx(expected, rel=1e-9)

    def test_model_log_vars_applied(self):
        images, labels, masks = toy_batch()
        state = build_toy_state("sl", uncertainty=True)
        assert state.log_vars is not None
        report = supervised_objective(state, images, labels, masks)
        with torch.no_grad():
            plain = supervised_objective(state, images, labels, masks, apply_uncertainty=False)
        # zero-initialized log-vars: weighted total = sum of per-task means
        assert report.total_value == pytest.approx(sum(report.per_task.values()), rel=1e-6)
        assert plain.total_value != pytest.approx(report.total_value)

    def test_length_mismatch(self):
        with pytest.raises(ConfigError):
            uncertainty_weighted(torch.ones(2), torch.zeros(3))
