"""Knowledge-graph-aware aspect sentiment classification toolkit.

Builds entity graphs from page-link dumps, clusters them (Louvain),
embeds both the weighted cluster graph and the dataset-induced subgraph,
trains classifiers over [text; entity] features jointly with the
embeddings, audits aspect disambiguations with a probing matrix, and
generates multi-modal explanations with mode significance.
"""

from .cluster_graph import ClusterGraph, build_cluster_graph, cluster_of
from .data import AlscDataset, AlscInstance, FileFeatureProvider, ToyTextEncoder
from .embedding import EmbeddingTable
from .graph import (
    EntityGraph,
    build_graph,
    induce_subgraph,
    largest_wcc,
    parse_edge_tsv,
    parse_ntriples,
)
from .louvain import ClusterHierarchy, LouvainClustering, coarsest_assignment, louvain_cluster, modularity
from .pipeline import PipelineConfig, run_pipeline, run_stage
from .probing import DisambiguationAuditor, ProbingModel, build_triplets, detect_and_correct, probe_similarity, train_probe
from .sage import GraphSageEmbedder, SageParams, WalkConfig, encode, sample_neighborhood, sample_walks, train_embeddings, unsup_loss
from .sentiment import JointConfig, SentimentHead, TrainConfig, alsc_loss, evaluate, predict, train_joint, train_static
from .two_level import AspectEntityMap, TwoLevelTable, assemble, build_aspect_subgraph, build_two_level_table, load_entity_map

__version__ = "0.1.0"

__all__ = [
    "AlscDataset",
    "AlscInstance",
    "AspectEntityMap",
    "ClusterGraph",
    "ClusterHierarchy",
    "DisambiguationAuditor",
    "EmbeddingTable",
    "EntityGraph",
    "FileFeatureProvider",
    "GraphSageEmbedder",
    "JointConfig",
    "LouvainClustering",
    "PipelineConfig",
    "ProbingModel",
    "SageParams",
    "SentimentHead",
    "ToyTextEncoder",
    "TrainConfig",
    "TwoLevelTable",
    "WalkConfig",
    "alsc_loss",
    "assemble",
    "build_aspect_subgraph",
    "build_cluster_graph",
    "build_graph",
    "build_triplets",
    "build_two_level_table",
    "cluster_of",
    "coarsest_assignment",
    "detect_and_correct",
    "encode",
    "evaluate",
    "induce_subgraph",
    "largest_wcc",
    "load_entity_map",
    "louvain_cluster",
    "modularity",
    "parse_edge_tsv",
    "parse_ntriples",
    "predict",
    "probe_similarity",
    "run_pipeline",
    "run_stage",
    "sample_neighborhood",
    "sample_walks",
    "train_embeddings",
    "train_joint",
    "train_probe",
    "train_static",
    "unsup_loss",
]
