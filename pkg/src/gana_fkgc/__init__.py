"""Few-shot knowledge graph completion with a gated attentive neighbor aggregator,
an attentive Bi-LSTM relation encoder and MAML-adapted TransH scoring."""

from .config import TrainConfig
from .kg_data import (EmbeddingTable, Episode, KnowledgeGraph, TaskSplit, Triple,
                      generate_synthetic_kg, load_dataset, save_dataset)
from .model import GANAModel

__all__ = ["TrainConfig", "EmbeddingTable", "Episode", "KnowledgeGraph", "TaskSplit", "Triple",
           "generate_synthetic_kg", "load_dataset", "save_dataset", "GANAModel"]
__version__ = "0.1.0"
