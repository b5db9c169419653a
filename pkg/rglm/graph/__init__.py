"""Graph data model, Neighbor Detail Template serialization and GNN pretraining."""

from __future__ import annotations

from rglm.graph.ndt import GraphTokenSequence, NdtConfig, serialize_pair, serialize_subgraph
from rglm.graph.tag import Subgraph, SyntheticSpec, Tag, generate_synthetic_tag, sample_subgraph

__all__ = [
    "GraphTokenSequence",
    "NdtConfig",
    "Subgraph",
    "SyntheticSpec",
    "Tag",
    "generate_synthetic_tag",
    "sample_subgraph",
    "serialize_pair",
    "serialize_subgraph",
]
