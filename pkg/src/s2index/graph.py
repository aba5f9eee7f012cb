"""Textual attributed graphs: ingestion, degree/volume/cut accounting, subgraphs."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)


class GraphError(ValueError):
    """Raised for malformed graph input or invalid node references."""


@dataclass(frozen=True)
class NodeSet:
    """A sorted set of node ids with its volume and cut size."""

    ids: tuple[str, ...]
    volume: int
    cut: int

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)


class TextualAttributedGraph:
    """Immutable undirected graph whose nodes and edges carry text.

    Nodes keep their first-appearance order; internally every node is also
    addressed by its position in that order (its *index*).
    """

    def __init__(
        self,
        nodes: Iterable[tuple[str, str]],
        edges: Iterable[tuple[str, str, str | None]] = (),
    ):
        ids: list[str] = []
        texts: list[str] = []
        index: dict[str, int] = {}
        for node_id, text in nodes:
            if node_id in index:
                raise GraphError(f"duplicate node id {node_id!r}")
            index[node_id] = len(ids)
            ids.append(node_id)
            texts.append(text)

        edge_text: dict[tuple[int, int], str | None] = {}
        self.symmetrized = 0
        for src, dst, text in edges:
            for end in (src, dst):
                if end not in index:
                    raise GraphError(f"unknown endpoint {end!r}")
            if src == dst:
                raise GraphError(f"self-loop on {src!r}")
            i, j = index[src], index[dst]
            key = (i, j) if i < j else (j, i)
            if key in edge_text:
                self.symmetrized += 1
                if edge_text[key] is None and text is not None:
                    edge_text[key] = text
                continue
            edge_text[key] = text

        self._ids = tuple(ids)
        self._texts = tuple(texts)
        self._index = index
        self._edges = tuple(sorted(edge_text))
        self._edge_text = edge_text

        n = len(ids)
        if self._edges:
            e = np.asarray(self._edges, dtype=np.int64)
            rows = np.concatenate([e[:, 0], e[:, 1]])
            cols = np.concatenate([e[:, 1], e[:, 0]])
        else:
            rows = cols = np.zeros(0, dtype=np.int64)
        adj = sp.csr_matrix(
            (np.ones(len(rows), dtype=np.int64), (rows, cols)), shape=(n, n)
        )
        adj.sort_indices()
        self._adj = adj
        self._degrees = np.asarray(adj.sum(axis=1)).ravel().astype(np.int64)
        self._degrees.setflags(write=False)

    # -- basic accessors -------------------------------------------------

    @property
    def ids(self) -> tuple[str, ...]:
        return self._ids

    @property
    def texts(self) -> tuple[str, ...]:
        return self._texts

    @property
    def n(self) -> int:
        return len(self._ids)

    @property
    def m(self) -> int:
        return len(self._edges)

    @property
    def adjacency(self) -> sp.csr_matrix:
        return self._adj

    @property
    def degrees(self) -> np.ndarray:
        return self._degrees

    @property
    def total_volume(self) -> int:
        return 2 * self.m

    @property
    def edges(self) -> tuple[tuple[int, int], ...]:
        """Edges as (i, j) index pairs with i < j, sorted."""
        return self._edges

    def edge_text(self, i: int, j: int) -> str | None:
        return self._edge_text[(i, j) if i < j else (j, i)]

    def text(self, node_id: str) -> str:
        return self._texts[self._index[node_id]]

    def index_of(self, node_id: str) -> int:
        try:
            return self._index[node_id]
        except KeyError:
            raise GraphError(f"unknown node id {node_id!r}") from None

    def indices(self, node_ids: Iterable[str]) -> np.ndarray:
        """Sorted, deduplicated index array for a collection of node ids."""
        if isinstance(node_ids, NodeSet):
            node_ids = node_ids.ids
        return np.unique(np.fromiter((self.index_of(v) for v in node_ids), dtype=np.int64))

    def neighbors(self, i: int) -> np.ndarray:
        a = self._adj
        return a.indices[a.indptr[i] : a.indptr[i + 1]]

    def degree(self, node_id: str) -> int:
        return int(self._degrees[self.index_of(node_id)])

    # -- set accounting --------------------------------------------------

    def volume_of(self, idx: np.ndarray) -> int:
        return int(self._degrees[idx].sum())

    def cut_of(self, idx: np.ndarray) -> int:
        """Number of edges with exactly one endpoint in ``idx``."""
        if len(idx) == 0:
            return 0
        internal = int(self._adj[idx][:, idx].sum()) // 2
        return self.volume_of(idx) - 2 * internal

    def node_set(self, node_ids: Iterable[str]) -> NodeSet:
        idx = self.indices(node_ids)
        ids = tuple(sorted(self._ids[i] for i in idx))
        return NodeSet(ids, self.volume_of(idx), self.cut_of(idx))

    def subgraph_indices(self, idx: Iterable[int]) -> "TextualAttributedGraph":
        idx = np.unique(np.asarray(list(idx), dtype=np.int64))
        if len(idx) == 0:
            raise GraphError("empty extraction")
        keep = set(idx.tolist())
        nodes = [(self._ids[i], self._texts[i]) for i in idx]
        edges = [
            (self._ids[i], self._ids[j], self._edge_text[(i, j)])
            for i, j in self._edges
            if i in keep and j in keep
        ]
        return TextualAttributedGraph(nodes, edges)

    # -- serialization ---------------------------------------------------

    def records(self) -> list[dict]:
        out = [{"kind": "node", "id": v, "text": t} for v, t in zip(self._ids, self._texts)]
        for i, j in self._edges:
            rec = {"kind": "edge", "src": self._ids[i], "dst": self._ids[j]}
            text = self._edge_text[(i, j)]
            if text is not None:
                rec["text"] = text
            out.append(rec)
        return out

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in self.records())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TextualAttributedGraph):
            return NotImplemented
        return self.records() == other.records()

    def __repr__(self) -> str:
        return f"TextualAttributedGraph(n={self.n}, m={self.m})"


def parse_graph_lines(lines: Iterable[str]) -> TextualAttributedGraph:
    nodes: list[tuple[str, str]] = []
    edges: list[tuple[str, str, str | None]] = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            kind = rec["kind"]
            if kind == "node":
                nodes.append((_as_str(rec["id"]), _as_str(rec.get("text", ""))))
            elif kind == "edge":
                text = rec.get("text")
                edges.append(
                    (_as_str(rec["src"]), _as_str(rec["dst"]), None if text is None else _as_str(text))
                )
            else:
                raise ValueError(f"unknown kind {kind!r}")
        except (ValueError, KeyError, TypeError) as exc:
            raise GraphError(f"line {lineno}: malformed record ({exc})") from None
    g = TextualAttributedGraph(nodes, edges)
    if g.symmetrized:
        log.warning("merged %d duplicate or reversed edge records", g.symmetrized)
    return g


def _as_str(value) -> str:
    if not isinstance(value, str):
        raise TypeError(f"expected string, got {type(value).__name__}")
    return value


def load_graph(path: str | Path) -> TextualAttributedGraph:
    """Read a graph.jsonl file."""
    with open(path, encoding="utf-8") as fh:
        return parse_graph_lines(fh)


def volume(g: TextualAttributedGraph, s: Iterable[str]) -> int:
    return g.volume_of(g.indices(s))


def cut_size(g: TextualAttributedGraph, s: Iterable[str]) -> int:
    return g.cut_of(g.indices(s))


def induced_subgraph(g: TextualAttributedGraph, s: Iterable[str]) -> TextualAttributedGraph:
    return g.subgraph_indices(g.indices(s))
