"""Query-time path: top-k tree nodes, union of their subgraphs, prompt text."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import TextualAttributedGraph
from .index import IndexBundle, TreeIndex
from .tree import EncodingTree

ANSWER_TEMPLATE = "Context:\n{context}\n\nQuestion: {question}\nAnswer:"


def count_tokens(text: str) -> int:
    """Whitespace token count (an approximation of model tokens)."""
    return len(text.split())


@dataclass(frozen=True)
class Hit:
    id: int
    level: int
    sim: float


@dataclass
class RetrievalResult:
    hits: list[Hit]
    union_subgraph: TextualAttributedGraph
    textualization: str
    token_counts: dict = field(default_factory=dict)

    def to_dict(self, answer: str | None = None) -> dict:
        g = self.union_subgraph
        return {
            "hits": [{"id": h.id, "level": h.level, "sim": h.sim} for h in self.hits],
            "nodes": [g.ids[i] for i in range(g.n)],
            "edges": [[g.ids[i], g.ids[j]] for i, j in g.edges],
            "textualization": self.textualization,
            "tokens": dict(self.token_counts),
            "answer": answer,
        }


@dataclass(frozen=True)
class Answer:
    text: str
    prompt: str
    provider: str | None


def top_k_nodes(index: TreeIndex, query_embedding: np.ndarray, k: int, exact: bool = False) -> list[Hit]:
    """Top-k tree nodes by cosine similarity, ties broken by smaller id."""
    q = np.asarray(query_embedding, dtype=np.float64)
    if q.shape != (index.dim,):
        raise ValueError(f"dimension mismatch: query has shape {q.shape}, index dim is {index.dim}")
    ids, sims = index.search(q, k, exact=exact)
    level_of = dict(zip(index.ids.tolist(), index.levels.tolist()))
    return [Hit(int(i), int(level_of[int(i)]), float(s)) for i, s in zip(ids, sims)]


def extract_union_subgraph(tree: EncodingTree, g: TextualAttributedGraph, hits) -> TextualAttributedGraph:
    """Union of the subgraphs induced by each hit's cluster.

    An edge is kept only if both endpoints lie in one hit's cluster; edges
    that merely join two different hits are left out.
    """
    hit_ids = [h.id if isinstance(h, Hit) else int(h) for h in hits]
    if not hit_ids:
        raise ValueError("no hits to extract")
    keep_node = np.zeros(g.n, dtype=bool)
    pairs = np.asarray(g.edges, dtype=np.int64).reshape(-1, 2)
    keep_edge = np.zeros(len(pairs), dtype=bool)
    for hid in dict.fromkeys(hit_ids):
        inside = np.zeros(g.n, dtype=bool)
        inside[tree.nodes[hid].members] = True
        keep_node |= inside
        keep_edge |= inside[pairs[:, 0]] & inside[pairs[:, 1]]
    nodes = [(g.ids[i], g.texts[i]) for i in np.flatnonzero(keep_node)]
    edges = [(g.ids[i], g.ids[j], g.edge_text(i, j)) for i, j in pairs[keep_edge]]
    return TextualAttributedGraph(nodes, edges)


def textualize(g: TextualAttributedGraph) -> str:
    if g.n == 0:
        raise ValueError("cannot textualize an empty subgraph")
    lines = [f"node {v}: {t}" for v, t in sorted(zip(g.ids, g.texts))]
    edges = sorted(
        (min(g.ids[i], g.ids[j]), max(g.ids[i], g.ids[j]), g.edge_text(i, j)) for i, j in g.edges
    )
    lines += [f"edge {a} -- {b}: {t if t else '-'}" for a, b, t in edges]
    return "\n".join(lines)


def retrieve(
    bundle: IndexBundle,
    query_embedding: np.ndarray,
    k: int = 6,
    full_graph_tokens: int | None = None,
    exact: bool = False,
) -> RetrievalResult:
    hits = top_k_nodes(bundle.index, query_embedding, k, exact=exact)
    sub = extract_union_subgraph(bundle.tree, bundle.graph, hits)
    text = textualize(sub)
    if full_graph_tokens is None:
        full_graph_tokens = count_tokens(textualize(bundle.graph))
    return RetrievalResult(hits, sub, text, {"context": count_tokens(text), "full_graph": full_graph_tokens})


def build_prompt(question: str, result: RetrievalResult) -> str:
    return ANSWER_TEMPLATE.format(context=result.textualization, question=question)


def answer_query(question: str, result: RetrievalResult, chat=None, provider_id: str | None = None) -> Answer:
    """Assemble the prompt and, if ``chat`` is given, ask it once.

    Without a chat callable the prompt is returned with empty answer text.
    """
    prompt = build_prompt(question, result)
    if chat is None:
        return Answer("", prompt, None)
    return Answer(chat(prompt), prompt, provider_id)
