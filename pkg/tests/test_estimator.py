import numpy as np
import pytest
import torch
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mtpsl.errors import ConfigError, ShapeError
from mtpsl.estimator import PartialMultiTaskLearner
from mtpsl.synth import SceneConfig, generate_dataset

SCENE = SceneConfig(height=32, width=32, seed=2)


@pytest.fixture(scope="module")
def small_data():
    return generate_dataset(SCENE, 16, 6, "one", seed=2)


def quick_learner(**kw):
    base = dict(strategy="sl", epochs=2, batch_size=4, encoder_widths=(8, 16), seed=0)
    base.update(kw)
    return PartialMultiTaskLearner(**base)


class TestSklearnProtocol:
    def test_get_params_round_trip(self):
        est = quick_learner(lambda_ct=0.7)
        params = est.get_params()
        assert params["lambda_ct"] == 0.7
        est.set_params(lambda_ct=0.3)
        assert est.lambda_ct == 0.3

    def test_clone(self):
        est = quick_learner(strategy="ours")
        dup = clone(est)
        assert dup.get_params() == est.get_params()

    def test_predict_before_fit(self):
        with pytest.raises(NotFittedError):
            quick_learner().predict(np.zeros((1, 3, 32, 32), dtype=np.float32))


class TestFitPredict:
    def test_fit_predict_shapes(self, small_data):
        est = quick_learner().fit(small_data.train)
        images = np.stack([s.image for s in small_data.test])
        preds = est.predict(images)
        assert set(preds) == {"seg", "depth", "normals"}
        assert preds["seg"].shape == (6, 5, 32, 32)
        assert preds["depth"].shape == (6, 1, 32, 32)
        assert preds["normals"].shape == (6, 3, 32, 32)

    def test_single_image_predict(self, small_data):
        est = quick_learner().fit(small_data.train)
        preds = est.predict(small_data.test[0].image)
        assert preds["seg"].shape == (1, 5, 32, 32)

    def test_score_improves_with_training(self, small_data):
        short = quick_learner(epochs=1, seed=1).fit(small_data.train)
        longer = quick_learner(epochs=8, lr=1e-3, seed=1).fit(small_data.train)
        assert longer.score(small_data.test) > short.score(small_data.test)

    def test_evaluate_metrics_keys(self, small_data):
        est = quick_learner().fit(small_data.train)
        metrics = est.evaluate(small_data.test)
        assert set(metrics) == {"seg", "depth", "normals"}
        assert 0.0 <= metrics["seg"] <= 1.0

    def test_fit_deterministic(self, small_data):
        a = quick_learner().fit(small_data.train)
        b = quick_learner().fit(small_data.train)
        for (na, pa), (nb, pb) in zip(a.model_.named_parameters(), b.model_.named_parameters()):
            assert na == nb and torch.equal(pa, pb)

    def test_cross_task_strategy_fits(self, small_data):
        est = quick_learner(strategy="ours", epochs=1).fit(small_data.train)
        assert any("term_cross_task" in row for row in est.loss_log_)


class TestValidation:
    def test_rejects_non_samples(self):
        with pytest.raises(ConfigError):
            quick_learner().fit([np.zeros((3, 32, 32))])

    def test_rejects_bad_image_shape(self, small_data):
        est = quick_learner().fit(small_data.train)
        with pytest.raises(ShapeError):
            est.predict(np.zeros((1, 1, 32, 32), dtype=np.float32))

    def test_rejects_indivisible_dims(self, small_data):
        est = quick_learner().fit(small_data.train)
        with pytest.raises(ShapeError):
            est.predict(np.zeros((1, 3, 30, 30), dtype=np.float32))

    def test_rejects_empty(self):
        with pytest.raises(ConfigError):
            quick_learner().fit([])
