"""Prior-exam-aware breast cancer risk prediction on synthetic cohorts."""

from .core import (
    ConfigError,
    DataError,
    ExamRecord,
    InvalidLabelError,
    LabelPair,
    MissingPriorError,
    NumericError,
    SchemaError,
    SurvivalOutcome,
    build_label,
    pair_prior_inference,
    pair_prior_training,
)
from .model import ModelConfig, ModelParams, init_params, predict_batch
from .synthdata import CohortConfig, generate_cohort
from .train import TrainConfig, train

__version__ = "0.1.0"
