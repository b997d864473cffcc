import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtpsl.errors import ConfigError
from mtpsl.tasks import (
    LabelMask,
    Sample,
    TaskSpec,
    default_tasks,
    load_mask_manifest,
    make_imbalanced_mask,
    make_masks,
    make_one_label_mask,
    make_random_label_mask,
    save_mask_manifest,
)


def counts_per_task(masks, num_tasks):
    counts = [0] * num_tasks
    for m in masks:
        for t in m.labelled:
            counts[t] += 1
    return counts


class TestTaskSpec:
    def test_default_trio(self):
        tasks = default_tasks()
        assert [t.id for t in tasks] == [0, 1, 2]
        assert tasks[0].out_channels == 5
        assert tasks[2].loss_kind == "cosine" and tasks[2].out_channels == 3

    def test_cosine_needs_three_channels(self):
        with pytest.raises(ConfigError):
            TaskSpec(0, "bad", 4, "cosine", "mean_angle_err", False)

    def test_unknown_loss_kind(self):
        with pytest.raises(ConfigError):
            TaskSpec(0, "bad", 1, "l2", "abs_err", False)


class TestLabelMask:
    def test_partition(self):
        m = LabelMask.of({0, 2}, 4)
        assert m.labelled == {0, 2}
        assert m.unlabelled == {1, 3}

    def test_empty_labelled_rejected(self):
        with pytest.raises(ConfigError):
            LabelMask(frozenset(), frozenset({0, 1}))

    def test_overlap_rejected(self):
        with pytest.raises(ConfigError):
            LabelMask(frozenset({0}), frozenset({0, 1}))

    def test_sample_labels_must_match_mask(self):
        image = np.zeros((3, 8, 8), dtype=np.float32)
        with pytest.raises(ConfigError):
            Sample(image=image, labels={0: np.zeros((1, 8, 8))}, mask=LabelMask.of({1}, 2))


class TestOneLabel:
    def test_supplementary_counts_two_tasks(self):
        # 2975 images over 2 tasks split into near-equal halves
        masks = make_one_label_mask(2975, 2, seed=0)
        assert sorted(counts_per_task(masks, 2)) == [1487, 1488]

    def test_single_task_forces_that_task(self):
        masks = make_one_label_mask(10, 1, seed=0)
        assert all(m.labelled == {0} for m in masks)

    def test_balanced_three_tasks(self):
        masks = make_one_label_mask(10, 3, seed=0)
        counts = counts_per_task(masks, 3)
        assert sum(counts) == 10
        assert all(c in (3, 4) for c in counts)
        assert all(len(m.labelled) == 1 for m in masks)

    def test_too_few_images(self):
        with pytest.raises(ConfigError):
            make_one_label_mask(2, 3, seed=0)

    def test_deterministic(self):
        assert make_one_label_mask(50, 3, seed=9) == make_one_label_mask(50, 3, seed=9)


class TestRandomLabel:
    def test_mean_labels_matches_reported_regime(self):
        # three tasks -> counts uniform on {1, 2}, mean 1.5 (reported 1.49)
        means = []
        for seed in range(5):
            masks = make_random_label_mask(795, 3, seed=seed)
            means.append(np.mean([len(m.labelled) for m in masks]))
        assert abs(np.mean(means) - 1.5) < 0.15

    def test_two_tasks_always_single_label(self):
        masks = make_random_label_mask(100, 2, seed=1)
        assert all(len(m.labelled) == 1 for m in masks)

    def test_count_distribution_uniform(self):
        masks = make_random_label_mask(1000, 4, seed=7)
        frac_two = np.mean([len(m.labelled) == 2 for m in masks])
        assert abs(frac_two - 1 / 3) < 0.05

    def test_needs_two_tasks(self):
        with pytest.raises(ConfigError):
            make_random_label_mask(10, 1, seed=0)

    def test_bounds(self):
        masks = make_random_label_mask(500, 5, seed=3)
        assert all(1 <= len(m.labelled) <= 4 for m in masks)


class TestImbalanced:
    def test_nine_to_one_quotas_exact(self):
        masks = make_imbalanced_mask(100, [0.9, 0.1], seed=0)
        assert counts_per_task(masks, 2) == [90, 10]
        assert all(len(m.labelled) >= 1 for m in masks)

    def test_full_ratios_label_everything(self):
        masks = make_imbalanced_mask(100, [1.0, 1.0], seed=0)
        assert all(m.labelled == {0, 1} for m in masks)

    def test_even_split(self):
        masks = make_imbalanced_mask(20, [0.5, 0.5], seed=3)
        assert counts_per_task(masks, 2) == [10, 10]
        assert all(len(m.labelled) >= 1 for m in masks)

    def test_tiny_ratios_rejected(self):
        with pytest.raises(ConfigError):
            make_imbalanced_mask(100, [0.05, 0.05], seed=0)

    def test_shortfall_repair_within_tolerance(self):
        # quotas 95 + 3 leave two images empty; repair grants task 0
        masks = make_imbalanced_mask(100, [0.95, 0.03], seed=2)
        counts = counts_per_task(masks, 2)
        assert counts[1] == 3
        assert 95 <= counts[0] <= int(1.1 * 95)
        assert all(len(m.labelled) >= 1 for m in masks)

    def test_bad_ratio_value(self):
        with pytest.raises(ConfigError):
            make_imbalanced_mask(10, [0.5, 0.0], seed=0)


@settings(max_examples=60, deadline=None)
@given(
    num_images=st.integers(5, 60),
    num_tasks=st.integers(2, 5),
    seed=st.integers(0, 2 ** 31),
    protocol=st.sampled_from(["one", "random", "full"]),
)
def test_mask_invariants(num_images, num_tasks, seed, protocol):
    masks = make_masks(protocol, num_images, num_tasks, seed)
    again = make_masks(protocol, num_images, num_tasks, seed)
    assert masks == again
    everything = frozenset(range(num_tasks))
    for m in masks:
        assert len(m.labelled) >= 1
        assert not (m.labelled & m.unlabelled)
        assert m.labelled | m.unlabelled == everything


def test_manifest_round_trip(tmp_path):
    masks = make_one_label_mask(20, 3, seed=4)
    path = tmp_path / "masks.json"
    save_mask_manifest(path, masks, seed=4, protocol="one")
    loaded, manifest = load_mask_manifest(path, 3)
    assert loaded == masks
    assert manifest["seed"] == 4 and manifest["protocol"] == "one"
    raw = json.loads(path.read_text())
    assert raw["masks"] == [sorted(m.labelled) for m in masks]
