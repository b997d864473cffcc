"""Multi-task partially-supervised learning for dense prediction.

A shared-encoder multi-head model trained with masked supervised losses,
crop-equivariance consistency, and cross-task consistency in learned joint
pairwise task-spaces (pair-conditioned mapping network plus an anti-collapse
regularizer), with a synthetic coupled-task benchmark and experiment CLI.
"""

from .consistency import CropParams, apply_crop, sample_crop, ssl_consistency_loss
from .crosstask import (
    MappingConfig,
    MappingNet,
    ModelState,
    PairCondition,
    contrastive_pair_loss,
    cross_task_loss,
    direct_map_loss,
    discriminator_step,
    film_modulate,
    full_objective,
    make_condition,
    map_to_joint,
    mapping_regularizer,
    perceptual_map_loss,
    strategy_objective,
    STRATEGIES,
)
from .errors import (
    ConfigError,
    DatasetFormatError,
    ShapeError,
    TrainingDiverged,
    UndefinedLossError,
    UndefinedMetricError,
)
from .estimator import PartialMultiTaskLearner
from .harness import ExperimentConfig, ExperimentReport, compare, run_stl_baselines, train
from .losses import LossReport, supervised_objective, task_loss, uncertainty_weighted
from .metrics import ConfusionMatrix, abs_err, delta_mtl, mean_angle_err, miou
from .networks import EncoderConfig, HeadConfig, MultiTaskModel, load_checkpoint, save_checkpoint
from .synth import SceneConfig, generate_dataset, generate_scene, load_dataset, save_dataset
from .tasks import (
    IGNORE_INDEX,
    LabelMask,
    Sample,
    TaskSpec,
    default_tasks,
    make_imbalanced_mask,
    make_one_label_mask,
    make_random_label_mask,
)

__version__ = "0.1.0"
