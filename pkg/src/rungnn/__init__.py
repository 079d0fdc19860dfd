"""RUN-GNN style progressive relational GNN for knowledge-graph completion, on numpy."""
from .kg import DatasetSplit, KnowledgeGraph, Vocabulary, augment, load_dataset, load_triples
from .model import EncoderConfig, ModelParameters, apply_variant, encode, encode_batch
from .training import TrainConfig, fit, load_checkpoint, save_checkpoint, train_epoch
from .evaluation import MetricsReport, evaluate, hop_bucket_eval

__version__ = "0.1.0"
