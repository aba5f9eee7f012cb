"""Entropy-guided hierarchical indexing and retrieval over text-attributed graphs."""

from .entropy import (
    DEFAULT_BANDWIDTH_GRID,
    EntropyParams,
    S2Entropy,
    entropy_breakdown,
    kde_log_density,
    s2_term,
    select_bandwidth,
    semantic_entropy,
    structural_term,
    total_tree_entropy,
)
from .graph import GraphError, NodeSet, TextualAttributedGraph, cut_size, induced_subgraph, load_graph, volume
from .index import IndexBundle, IndexFormatError, Summary, TreeIndex, build_index, load_index, save_index
from .pipeline import BuildConfig, QueryEngine, build
from .providers import EmbedderSpec, ProviderError, SummarizerSpec
from .retrieval import RetrievalResult, answer_query, extract_union_subgraph, textualize, top_k_nodes
from .tree import EncodingTree, SolverConfig, TreeError, build_encoding_tree, partition_node, prune_node, regulate

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
