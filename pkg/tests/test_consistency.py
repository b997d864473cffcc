import numpy as np
import pytest
import torch
from torch import nn

from mtpsl.consistency import CropParams, apply_crop, sample_crop, ssl_consistency_loss
from mtpsl.errors import ShapeError
from mtpsl.gradcheck import build_toy_state, toy_batch


class TestSampleCrop:
    def test_snap_grid(self):
        sizes = set()
        for seed in range(300):
            r = sample_crop(64, 64, seed=seed, stride=8)
            assert 0 <= r.top and r.top + r.height <= 64
            assert 0 <= r.left and r.left + r.width <= 64
            sizes.add(r.height)
            sizes.add(r.width)
        assert sizes == {32, 40, 48, 56, 64}

    def test_full_frac_is_identity(self):
        r = sample_crop(64, 48, seed=1, min_frac=1.0, stride=8)
        assert r == CropParams(0, 0, 64, 48)

    def test_deterministic(self):
        assert sample_crop(64, 64, seed=5) == sample_crop(64, 64, seed=5)

    def test_tiny_image_rejected(self):
        with pytest.raises(ShapeError):
            sample_crop(8, 8, seed=0, stride=8)


class TestApplyCrop:
    def test_identity(self):
        x = torch.rand(3, 16, 16)
        assert torch.equal(apply_crop(x, CropParams(0, 0, 16, 16)), x)

    def test_composition(self):
        x = torch.rand(7, 64, 64)
        r1 = CropParams(4, 8, 40, 48)
        r2 = CropParams(2, 6, 16, 16)
        chained = apply_crop(apply_crop(x, r1), r2)
        composed = apply_crop(x, r1.compose(r2))
        assert torch.equal(chained, composed)

    def test_logit_shapes(self):
        x = torch.rand(7, 64, 64)
        out = apply_crop(x, CropParams(10, 20, 32, 32))
        assert out.shape == (7, 32, 32)

    def test_out_of_bounds(self):
        with pytest.raises(ShapeError):
            apply_crop(torch.rand(3, 16, 16), CropParams(8, 8, 16, 16))

    def test_batched(self):
        x = torch.rand(2, 3, 16, 16)
        out = apply_crop(x, CropParams(0, 4, 8, 8))
        assert out.shape == (2, 3, 8, 8)


class _PointwiseModel(nn.Module):
    """1x1 conv head per task: exactly crop-equivariant, no padding effects."""

    def __init__(self, tasks=(0, 1)):
        super().__init__()
        torch.manual_seed(0)
        self.heads = nn.ModuleDict({str(t): nn.Conv2d(3, 4, kernel_size=1) for t in tasks})

    def predict_all(self, image):
        x = image.unsqueeze(0) if image.dim() == 3 else image
        out = {int(t): head(x) for t, head in self.heads.items()}
        if image.dim() == 3:
            out = {t: v.squeeze(0) for t, v in out.items()}
        return out


class TestSslConsistencyLoss:
    def test_identity_crop_zero(self):
        state = build_toy_state("sl").float()
        img = torch.rand(3, 8, 8)
        loss = ssl_consistency_loss(state, img, {0, 1}, CropParams(0, 0, 8, 8))
        assert loss.item() == 0.0

    def test_empty_unlabelled_zero(self):
        state = build_toy_state("sl").float()
        loss = ssl_consistency_loss(state, torch.rand(3, 8, 8), set(), CropParams(0, 0, 8, 8))
        assert float(loss) == 0.0

    def test_equivariant_model_zero_loss(self):
        model = _PointwiseModel()
        img = torch.rand(3, 32, 32)
        for r in (CropParams(3, 5, 16, 16), CropParams(0, 0, 24, 32), CropParams(10, 2, 8, 8)):
            loss = ssl_consistency_loss(model, img, {0, 1}, r)
            assert loss.item() < 1e-6

    def test_strided_encoder_not_equivariant(self):
        # the real model pads and strides, so a shifted crop produces a
        # genuinely nonzero consistency signal
        state = build_toy_state("sl").float()
        img = torch.rand(3, 8, 8)
        loss = ssl_consistency_loss(state, img, {0, 1}, CropParams(1, 3, 4, 4))
        assert loss.item() > 0.0

    def test_nonnegative(self):
        state = build_toy_state("sl").float()
        img = torch.rand(3, 8, 8)
        for seed in range(5):
            r = sample_crop(8, 8, seed=seed, stride=4)
            assert ssl_consistency_loss(state, img, {1}, r).item() >= 0.0


def test_ssl_term_leaves_labelled_task_gradients_unchanged():
    """The consistency term only involves tasks from each image's unlabelled
    set, so a head whose task is labelled everywhere gets the exact same
    gradient with and without the term."""
    from mtpsl.crosstask import strategy_objective
    from mtpsl.tasks import LabelMask

    images, labels, _ = toy_batch()
    masks = [LabelMask.of({0}, 2), LabelMask.of({0}, 2),
             LabelMask.of({0, 1}, 2), LabelMask.of({0}, 2)]
    crop = CropParams(1, 2, 4, 4)

    state_sl = build_toy_state("sl")
    strategy_objective(state_sl, "sl", images, labels, masks).total.backward()
    state_ssl = build_toy_state("ssl")  # same seed -> identical parameters
    report = strategy_objective(state_ssl, "ssl", images, labels, masks, crop=crop)
    assert report.terms["consistency"] > 0.0
    report.total.backward()

    grads_sl = dict(state_sl.named_parameters())
    for name, p in state_ssl.named_parameters():
        if name.startswith("heads.seg."):  # task 0: labelled on every image
            assert torch.allclose(p.grad, grads_sl[name].grad, atol=1e-12)
        if name.startswith("heads.normals."):  # task 1: gets the extra signal
            assert not torch.allclose(p.grad, grads_sl[name].grad, atol=1e-12)


def test_fully_labelled_batch_has_no_consistency_term():
    from mtpsl.crosstask import strategy_objective
    from mtpsl.tasks import LabelMask

    images, labels, _ = toy_batch()
    full_masks = [LabelMask.of({0, 1}, 2)] * 4
    rep = strategy_objective(build_toy_state("ssl"), "ssl", images, labels,
                             full_masks, crop=CropParams(1, 2, 4, 4))
    assert "consistency" not in rep.terms
