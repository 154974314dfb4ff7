"""Synthetic tasks, training, evaluation and attention extraction."""

from .attention import AttentionRecord, extract_attention
from .data import (ArrayDataset, Dataset, SyntheticDataset, SyntheticTask, TaskKind, generate, load_dataset,
                   make_item, save_dataset, sprite_bank)
from .train import (SGD, TrainConfig, TrainingDiverged, TrainResult, clip_starts, evaluate, log_to_csv,
                    predict_views, train)

__all__ = [
    "ArrayDataset", "AttentionRecord", "Dataset", "SGD", "SyntheticDataset", "SyntheticTask", "TaskKind",
    "TrainConfig", "TrainResult", "TrainingDiverged", "clip_starts", "evaluate", "extract_attention", "generate",
    "load_dataset", "log_to_csv", "make_item", "predict_views", "save_dataset", "sprite_bank", "train",
]
