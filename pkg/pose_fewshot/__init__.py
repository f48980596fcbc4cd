# -*- coding: utf-8 -*-

__author__ = 'Pose Few-Shot Developers'
__email__ = 'pose-fewshot@users.noreply.github.com'
__version__ = '1.0.0'

# flake8: noqa

from .config import RunConfig, SyntheticConfig, TrainConfig, resolve_config
from .datamodel import (
    DatasetBundle, Episode, ImageSample, PartHeatmap, SplitAssignment,
    make_reference_query, rasterize_parts, sample_episode, split_classes,
)
from .synthetic import gen_synthetic
from .model import FewShotModel, build_model
from .learners import seed_everything, total_loss, train
from .evaluate import EvalReport, PartImportanceTable, evaluate_allway
from .exceptions import (
    Error, ConfigError, DataError, ShapeError, FrozenParameterError,
    TrainingError, CheckpointError, EvaluationError,
)
