"""Stacked Cross Attention for image-text matching."""

from .attention import AttentionTrace, Direction, Method, Pooling, ScanConfig, score_pair, sum_max_score
from .encoders import ModelParams, encode_sentence, project_regions
from .evaluation import ScoreGrid, recall_at_k
from .learning import LossConfig, TrainConfig, train, triplet_loss_all, triplet_loss_hard

__all__ = [
    "AttentionTrace", "Direction", "LossConfig", "Method", "ModelParams", "Pooling", "ScanConfig",
    "ScoreGrid", "TrainConfig", "encode_sentence", "project_regions", "recall_at_k", "score_pair",
    "sum_max_score", "train", "triplet_loss_all", "triplet_loss_hard",
]
