"""From-scratch belief-state inference: features, model, training, eval."""

from .model import BeliefNet, ModelConfig, load_checkpoint, save_checkpoint
from .features import (
    EpisodeFeatures,
    QuestionInstance,
    Vocabulary,
    episode_features,
    question_instances,
)
from .train import TrainConfig, TrainResult, split_corpus, train_model
from .evaluate import (
    confidence_interval,
    evaluate_in_situ,
    evaluate_split,
    grid_report,
    in_situ_match_rate,
)

__all__ = [
    "BeliefNet",
    "ModelConfig",
    "EpisodeFeatures",
    "QuestionInstance",
    "Vocabulary",
    "TrainConfig",
    "TrainResult",
    "episode_features",
    "question_instances",
    "split_corpus",
    "train_model",
    "confidence_interval",
    "evaluate_in_situ",
    "evaluate_split",
    "grid_report",
    "in_situ_match_rate",
    "load_checkpoint",
    "save_checkpoint",
]
