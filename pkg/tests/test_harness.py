import csv
import json

import numpy as np
import pytest
import torch

from mtpsl.errors import ConfigError
from mtpsl.harness import ExperimentConfig, compare, load_report, run_stl_baselines, train
from mtpsl.synth import SceneConfig

TINY_SCENE = SceneConfig(height=32, width=32)


def tiny_config(tmp_path, **kw):
    base = dict(strategy="sl", protocol="one", n_train=12, n_test=4, epochs=2,
                batch_size=4, out_dir=str(tmp_path), scene=TINY_SCENE)
    base.update(kw)
    return ExperimentConfig(**base)


class TestConfig:
    def test_json_round_trip(self, tmp_path):
        cfg = tiny_config(tmp_path, strategy="ours", lambda_ct=0.5)
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg.to_dict()))
        again = ExperimentConfig.from_json(path)
        assert again == cfg
        assert again.config_hash() == cfg.config_hash()

    def test_invalid_strategy(self, tmp_path):
        with pytest.raises(ConfigError):
            tiny_config(tmp_path, strategy="sgd")

    def test_invalid_protocol(self, tmp_path):
        with pytest.raises(ConfigError):
            tiny_config(tmp_path, protocol="most")

    def test_nonpositive_field(self, tmp_path):
        with pytest.raises(ConfigError):
            tiny_config(tmp_path, epochs=0)


class TestTrain:
    def test_smoke_sl_full(self, tmp_path):
        report = train(tiny_config(tmp_path, protocol="full"))
        assert report.term_keys == ["supervised"]
        assert len(report.history) == 2
        for h in report.history:
            assert np.isfinite(h["mean_loss"])
        run_dir = tmp_path / "sl-full-seed0"
        assert (run_dir / "report.json").exists()
        assert (run_dir / "losses.csv").exists()
        assert (run_dir / "checkpoint_best.bin").exists()
        assert (run_dir / "checkpoint_final.bin").exists()

    def test_strategy_determines_logged_terms(self, tmp_path):
        cases = {
            "sl": {"supervised"},
            "ssl": {"supervised", "consistency"},
            "ours": {"supervised", "cross_task", "regularizer"},
            "ours_no_reg": {"supervised", "cross_task"},
        }
        for strategy, expected in cases.items():
            report = train(tiny_config(tmp_path, strategy=strategy))
            assert set(report.term_keys) == expected, strategy

    def test_cross_task_terms_match_partial_image_count(self, tmp_path):
        # one-label protocol on K=3: every image is partially labelled and
        # contributes |U|x|T| = 2 pairs, so each epoch logs 2*n_train terms
        cfg = tiny_config(tmp_path, strategy="ours", n_train=10)
        report = train(cfg)
        for h in report.history:
            assert h["xt_terms"] == 2 * 10

    def test_fully_labelled_has_no_cross_task_terms(self, tmp_path):
        report = train(tiny_config(tmp_path, strategy="ours", protocol="full"))
        assert all(h["xt_terms"] == 0 for h in report.history)

    def test_determinism_byte_identical_checkpoints(self, tmp_path):
        cfg = tiny_config(tmp_path, strategy="ours")
        run_dir = tmp_path / "ours-one-seed0"
        train(cfg)
        first = {
            ckpt: (run_dir / ckpt).read_bytes()
            for ckpt in ("checkpoint_best.bin", "checkpoint_final.bin")
        }
        train(cfg)  # identical run overwrites the same directory
        for ckpt, blob in first.items():
            assert (run_dir / ckpt).read_bytes() == blob, ckpt

    def test_losses_csv_parses_and_counts(self, tmp_path):
        cfg = tiny_config(tmp_path, strategy="ours")
        train(cfg)
        with open(tmp_path / "ours-one-seed0" / "losses.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        steps_per_epoch = int(np.ceil(cfg.n_train / cfg.batch_size))
        assert len(rows) == steps_per_epoch * cfg.epochs
        assert all(float(r["total"]) > 0 for r in rows)
        assert {"term_supervised", "term_cross_task", "term_regularizer"} <= set(rows[0])

    def test_data_path_round_trip(self, tmp_path):
        from mtpsl.synth import generate_dataset, save_dataset

        data = generate_dataset(TINY_SCENE, 12, 4, "one", seed=0)
        path = tmp_path / "data.bin"
        save_dataset(path, data)
        direct = train(tiny_config(tmp_path / "gen"))
        loaded = train(tiny_config(tmp_path / "load", data_path=str(path)))
        assert direct.final_metrics == loaded.final_metrics

    def test_imbalanced_protocol(self, tmp_path):
        cfg = tiny_config(tmp_path, protocol="imbalanced", ratios=[0.9, 0.3, 0.3], n_train=10)
        report = train(cfg)
        assert len(report.history) == 2

    def test_discriminator_strategy_runs(self, tmp_path):
        report = train(tiny_config(tmp_path, strategy="discriminator", epochs=1))
        assert "adversarial" in report.term_keys and "disc" in report.term_keys

    def test_uncertainty_strategy_runs(self, tmp_path):
        report = train(tiny_config(tmp_path, uncertainty=True, epochs=1))
        assert report.term_keys == ["supervised"]


class TestStlBaselines:
    def test_per_task_reports(self, tmp_path):
        cfg = tiny_config(tmp_path)
        reports = run_stl_baselines(cfg)
        assert set(reports) == {0, 1, 2}
        for rep in reports.values():
            assert set(rep.best_metrics) == {"0"}  # single-task model
            assert rep.config["strategy"] == "sl"

    def test_stl_trains_on_labelled_subset_only(self, tmp_path):
        cfg = tiny_config(tmp_path, n_train=12)
        reports = run_stl_baselines(cfg)
        # one-label over 3 tasks: each task sees exactly 4 of 12 images
        for rep in reports.values():
            assert rep.config["n_train"] == 4


class TestCompare:
    def test_table_and_plots(self, tmp_path):
        cfg = tiny_config(tmp_path, strategy="sl")
        train(cfg)
        train(tiny_config(tmp_path, strategy="ours"))
        run_stl_baselines(cfg)
        out = tmp_path / "table.csv"
        rows = compare(tmp_path, out)
        assert len(rows) == 3  # stl + sl + ours
        with open(out, newline="") as fh:
            parsed = list(csv.DictReader(fh))
        assert [r["strategy"] for r in parsed] == [r["strategy"] for r in rows]
        for raw, row in zip(parsed, rows):
            for key, val in row.items():
                if isinstance(val, float):
                    assert float(raw[key]) == pytest.approx(val, rel=1e-12)
        pngs = list((tmp_path / "plots").glob("*.png"))
        assert len(pngs) == 5  # 2 mtl runs + 3 stl runs

    def test_delta_mtl_recomputable_from_columns(self, tmp_path):
        from mtpsl.metrics import delta_mtl
        from mtpsl.tasks import default_tasks

        cfg = tiny_config(tmp_path, strategy="sl")
        train(cfg)
        run_stl_baselines(cfg)
        rows = compare(tmp_path, tmp_path / "table.csv")
        tasks = default_tasks(TINY_SCENE.num_classes)
        by_strategy = {r["strategy"]: r for r in rows}
        stl = by_strategy["stl"]
        row = by_strategy["sl"]
        expected = delta_mtl(
            [row[f"{t.name}_{t.metric_kind}"] for t in tasks],
            [stl[f"{t.name}_{t.metric_kind}"] for t in tasks],
            [t.higher_is_better for t in tasks],
        )
        assert row["delta_mtl"] == pytest.approx(expected, rel=1e-12)

    def test_empty_dir_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            compare(tmp_path / "void", tmp_path / "t.csv")


class TestBestEpochSelection:
    def test_mean_rank_picks_dominating_epoch(self):
        from mtpsl.harness import _mean_rank_best
        from mtpsl.tasks import default_tasks

        tasks = default_tasks()
        history = [
            {0: 0.2, 1: 0.9, 2: 40.0},
            {0: 0.5, 1: 0.4, 2: 20.0},  # best on all three
            {0: 0.4, 1: 0.5, 2: 30.0},
        ]
        assert _mean_rank_best(history, tasks) == 1

    def test_tie_prefers_later_epoch(self):
        from mtpsl.harness import _mean_rank_best
        from mtpsl.tasks import default_tasks

        tasks = default_tasks()[:2]
        history = [
            {0: 0.5, 1: 0.2},  # best seg, worst depth
            {0: 0.4, 1: 0.1},  # worst seg, best depth
        ]
        assert _mean_rank_best(history, tasks) == 1
