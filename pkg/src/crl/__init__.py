"""Continual relation-representation learning over pre-embedded features."""
from .continual import AccuracyMatrix, ContinualLearner, TrainConfig, run_sequence
from .data import Dataset, TaskStream, load_jsonl, split_tasks, synth_stream, tri_split

__all__ = [
    "AccuracyMatrix", "ContinualLearner", "TrainConfig", "run_sequence",
    "Dataset", "TaskStream", "load_jsonl", "split_tasks", "synth_stream", "tri_split",
]
