"""Scikit-learn style estimator facade over the training core.

`PartialMultiTaskLearner` makes the method compose with the usual ecosystem
conventions: constructor parameters are stored verbatim (so `get_params`,
`set_params` and `clone` work), `fit` consumes a list of partially-labelled
samples, `predict` returns dense maps per task.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .crosstask import MappingConfig, ModelState
from .harness import ExperimentConfig, collate, evaluate, fit_loop
from .networks import EncoderConfig
from .tasks import TaskSpec, default_tasks
from .validation import check_image_array, check_sample_list


class PartialMultiTaskLearner(BaseEstimator):
    """Multi-task dense prediction learner for partially-annotated samples.

    Parameters mirror the experiment config; ``strategy`` selects the
    training objective ("sl", "ssl", "ours", "ours_no_cond", "ours_no_reg",
    "direct_map", "perceptual_map", "contrastive", "discriminator").
    ``tasks`` defaults to the synthetic benchmark trio (segmentation, depth,
    surface normals).
    """

    def __init__(self, strategy: str = "ours", epochs: int = 40, batch_size: int = 8,
                 lr: float = 1e-4, lr_halve_frac: float = 0.5, lambda_ct: float = 1.0,
                 margin: float = 0.1, mapping_lr_mult: float = 1.0,
                 uncertainty: bool = False, encoder_widths: tuple = (16, 32, 64),
                 mapping_input_width: int = 16, ssl_min_frac: float = 0.5,
                 seed: int = 0, tasks: list[TaskSpec] | None = None):
        self.strategy = strategy
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_halve_frac = lr_halve_frac
        self.lambda_ct = lambda_ct
        self.margin = margin
        self.mapping_lr_mult = mapping_lr_mult
        self.uncertainty = uncertainty
        self.encoder_widths = encoder_widths
        self.mapping_input_width = mapping_input_width
        self.ssl_min_frac = ssl_min_frac
        self.seed = seed
        self.tasks = tasks

    def _config(self, n_train: int) -> ExperimentConfig:
        return ExperimentConfig(
            strategy=self.strategy, epochs=self.epochs, batch_size=self.batch_size,
            lr=self.lr, lr_halve_frac=self.lr_halve_frac, lambda_ct=self.lambda_ct,
            margin=self.margin, mapping_lr_mult=self.mapping_lr_mult,
            uncertainty=self.uncertainty, encoder_widths=tuple(self.encoder_widths),
            mapping_input_width=self.mapping_input_width, ssl_min_frac=self.ssl_min_frac,
            seed=self.seed, n_train=n_train,
        )

    def fit(self, X, y=None):
        """Train on a list of :class:`~mtpsl.tasks.Sample` (each carrying its
        own label mask). ``y`` is ignored; labels travel inside the samples."""
        tasks = self.tasks if self.tasks is not None else default_tasks()
        encoder_cfg = EncoderConfig(widths=tuple(self.encoder_widths))
        samples = check_sample_list(X, tasks, encoder_cfg.stride)
        cfg = self._config(n_train=len(samples))

        torch.manual_seed(self.seed)
        self.model_ = ModelState.for_strategy(
            self.strategy, tasks, encoder_cfg, uncertainty=self.uncertainty,
            mapping_cfg=MappingConfig(input_width=self.mapping_input_width),
        )
        images, labels, masks = collate(samples, self.model_.tasks)
        stats = fit_loop(self.model_, cfg, images, labels, masks)
        self.loss_log_ = stats.log_rows
        self.n_features_in_ = int(np.prod(images.shape[1:]))
        return self

    def _check_fitted(self) -> ModelState:
        if not hasattr(self, "model_"):
            raise NotFittedError("fit must be called before predict/score")
        return self.model_

    def predict(self, X) -> dict[str, np.ndarray]:
        """Dense predictions for a batch of images, keyed by task name.

        Segmentation is returned as logits (num_classes, H, W); take the
        channel argmax for a class map.
        """
        model = self._check_fitted()
        batch = torch.from_numpy(check_image_array(X, model.encoder_cfg.stride))
        with torch.no_grad():
            preds = model.predict_all(batch)
        return {model.task(t).name: p.numpy() for t, p in preds.items()}

    def score(self, X, y=None) -> float:
        """Negative mean supervised loss on (fully or partially) labelled
        samples; higher is better, 0 is perfect."""
        from .losses import supervised_objective

        model = self._check_fitted()
        samples = check_sample_list(X, model.tasks, model.encoder_cfg.stride)
        images, labels, masks = collate(samples, model.tasks)
        with torch.no_grad():
            report = supervised_objective(model, images, labels, masks, apply_uncertainty=False)
        return -report.total_value

    def evaluate(self, X) -> dict[str, float]:
        """Task metrics (mIoU / aErr / mErr) on fully-labelled samples."""
        model = self._check_fitted()
        samples = check_sample_list(X, model.tasks, model.encoder_cfg.stride)
        images, labels, _ = collate(samples, model.tasks)
        values = evaluate(model, images, labels, model.tasks)
        return {model.task(t).name: v for t, v in values.items()}
