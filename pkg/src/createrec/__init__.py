"""Sequential recommendation with graph-enriched item embeddings.

A causal (or masked) transformer and a LightGCN/UltraGCN graph encoder share
one item embedding table. The two user representations are aligned with a
Barlow Twins loss, and inference uses the sequential branch only.
"""

from createrec.data import (
    BipartiteGraph,
    DatasetBundle,
    InteractionLog,
    build_graph,
    build_sequences,
    ingest,
    temporal_split,
)
from createrec.embeddings import EmbeddingTables
from createrec.sequential import SeqEncoderConfig, SequentialEncoder
from createrec.graph import GraphEncoder, GraphEncoderConfig
from createrec.alignment import AlignmentConfig
from createrec.training import TrainConfig, Trainer
from createrec.evaluation import MetricsReport, evaluate

__all__ = [
    "AlignmentConfig",
    "BipartiteGraph",
    "DatasetBundle",
    "EmbeddingTables",
    "GraphEncoder",
    "GraphEncoderConfig",
    "InteractionLog",
    "MetricsReport",
    "SeqEncoderConfig",
    "SequentialEncoder",
    "TrainConfig",
    "Trainer",
    "build_graph",
    "build_sequences",
    "evaluate",
    "ingest",
    "temporal_split",
]

__version__ = "0.1.0"
