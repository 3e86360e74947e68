"""Category-conditioned visual question generation with cyclic consistency."""

from .config import Config, ConfigError, from_file, from_toml_text, to_toml
from .data import (
    CategoryMap,
    DataError,
    DatasetBundle,
    Sample,
    Vocabulary,
    load_vqa,
    make_toy_dataset,
    split,
)
from .inference import generate, generate_all, generate_records
from .losses import CenterBank, HyperPrior, LossBreakdown, LossWeights, TrainingError
from .metrics import MetricReport, evaluate
from .model import LatentDistribution, ModelConfig, QuestionGenerator, sample_latent
from .training import TrainConfig, TrainState, init_params, train, train_step

__all__ = [
    "CategoryMap", "CenterBank", "Config", "ConfigError", "DataError",
    "DatasetBundle", "HyperPrior", "LatentDistribution", "LossBreakdown",
    "LossWeights", "MetricReport", "ModelConfig", "QuestionGenerator",
    "Sample", "TrainConfig", "TrainState", "TrainingError", "Vocabulary",
    "evaluate", "from_file", "from_toml_text", "generate", "generate_all",
    "generate_records", "init_params", "load_vqa", "make_toy_dataset",
    "sample_latent", "split", "to_toml", "train", "train_step",
]
