"""Tree-node summaries, summary embeddings, the searchable index and its files.

An index directory holds::

    manifest.json     build parameters, provider ids, counts, checksums
    graph.jsonl       canonical copy of the indexed graph
    tree.json         encoding tree topology
    summaries.jsonl   one {"id", "text", "source"} record per tree node
    embeddings.bin    "TRET" | u32 version | u32 dim | u64 count | float32 rows
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .graph import TextualAttributedGraph, parse_graph_lines
from .tree import EncodingTree

log = logging.getLogger(__name__)

MAGIC = b"TRET"
FORMAT_VERSION = 1
MANIFEST_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")
SMALL_INDEX = 256
INDEX_FILES = ("graph.jsonl", "tree.json", "summaries.jsonl", "embeddings.bin")


class IndexFormatError(ValueError):
    """An index directory is missing, corrupt or inconsistent."""


@dataclass(frozen=True)
class Summary:
    id: int
    text: str
    source: str  # "leaf-passthrough" or "generated"

    @property
    def token_count(self) -> int:
        return len(self.text.split())


# -- summaries -------------------------------------------------------------


def cluster_texts(tree: EncodingTree, node_id: int, g: TextualAttributedGraph):
    """Node texts and internal edge texts of one tree node's cluster."""
    members = tree.nodes[node_id].members
    inside = np.zeros(g.n, dtype=bool)
    inside[members] = True
    node_texts = [(g.ids[i], g.texts[i]) for i in members]
    edge_texts = [
        (g.ids[i], g.ids[j], g.edge_text(i, j))
        for i, j in g.edges
        if inside[i] and inside[j]
    ]
    return node_texts, edge_texts


def _resolve(tree: EncodingTree, node_id: int) -> int:
    """Follow pass-through links down to the node that owns the cluster."""
    while tree.is_pass_through(node_id):
        node_id = tree.nodes[node_id].children[0]
    return node_id


def summarize_node(tree: EncodingTree, node_id: int, g: TextualAttributedGraph, summarizer) -> Summary:
    owner = _resolve(tree, node_id)
    node = tree.nodes[owner]
    if node.is_leaf:
        if len(node.members) != 1:
            raise ValueError(f"leaf {owner} is not a singleton")
        return Summary(node_id, g.texts[int(node.members[0])], "leaf-passthrough")
    node_texts, edge_texts = cluster_texts(tree, owner, g)
    try:
        text = summarizer(node_texts, edge_texts)
    except Exception as exc:
        raise RuntimeError(f"summarizer failed on tree node {node_id}: {exc}") from exc
    if not text.strip():
        raise RuntimeError(f"summarizer returned empty text for tree node {node_id}")
    return Summary(node_id, text, "generated")


def summarize_tree(tree: EncodingTree, g: TextualAttributedGraph, summarizer, threads: int = 1) -> list[Summary]:
    """Summaries for every tree node, in id order.

    Pass-through nodes reuse the summary of the cluster they repeat, so the
    summarizer runs once per distinct cluster.
    """
    ids = sorted(tree.nodes)
    owners = {i: _resolve(tree, i) for i in ids}
    distinct = sorted(set(owners.values()))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            made = list(pool.map(lambda i: summarize_node(tree, i, g, summarizer), distinct))
    else:
        made = [summarize_node(tree, i, g, summarizer) for i in distinct]
    by_owner = {s.id: s for s in made}
    return [Summary(i, by_owner[owners[i]].text, by_owner[owners[i]].source) for i in ids]


def embed_tree(summaries: list[Summary], embedder: Callable[[list[str]], np.ndarray]) -> np.ndarray:
    """Unit-norm float32 embedding per summary, rows in summary order."""
    texts = [s.text for s in summaries]
    unique = sorted(set(texts))
    rows = np.asarray(embedder(unique), dtype=np.float64)
    if len(rows) != len(unique):
        raise RuntimeError(f"embedder returned {len(rows)} rows for {len(unique)} texts")
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    rows = rows / np.where(norms == 0, 1.0, norms)
    pos = {t: i for i, t in enumerate(unique)}
    return rows[[pos[t] for t in texts]].astype(np.float32)


# -- search ----------------------------------------------------------------


def exact_top_k(embeddings: np.ndarray, query: np.ndarray, k: int, ids: np.ndarray | None = None):
    """Top-k rows by dot product; ties go to the smaller id."""
    sims = embeddings.astype(np.float64) @ np.asarray(query, dtype=np.float64)
    if ids is None:
        ids = np.arange(len(sims))
    order = np.lexsort((ids, -sims))[:k]
    return ids[order], sims[order]


class IVFIndex:
    """Inverted-file ANN search: k-means coarse cells, scan the nearest cells."""

    def __init__(self, embeddings: np.ndarray, nlist: int | None = None, seed: int = 42, iterations: int = 20):
        x = np.asarray(embeddings, dtype=np.float32)
        n = len(x)
        self.x = x
        # below a few hundred entries one cell (an exact scan) is as fast as any split
        self.nlist = nlist or (1 if n < SMALL_INDEX else int(round(np.sqrt(n))))
        self.nlist = min(self.nlist, n)
        rng = np.random.default_rng(seed)
        centroids = x[np.sort(rng.choice(n, self.nlist, replace=False))].astype(np.float64)
        for _ in range(iterations):
            assign = np.argmax(x @ centroids.T, axis=1)
            for c in range(self.nlist):
                sel = assign == c
                if sel.any():
                    v = x[sel].sum(0, dtype=np.float64)
                    nv = np.linalg.norm(v)
                    if nv > 0:
                        centroids[c] = v / nv
        self.centroids = centroids.astype(np.float32)
        assign = np.argmax(x @ self.centroids.T, axis=1)
        self.lists = [np.flatnonzero(assign == c) for c in range(self.nlist)]
        self.nprobe = 1

    def search(self, query: np.ndarray, k: int, nprobe: int | None = None):
        nprobe = min(nprobe or self.nprobe, self.nlist)
        q = np.asarray(query, dtype=np.float32)
        cells = np.argsort(-(self.centroids @ q), kind="stable")[:nprobe]
        cand = np.sort(np.concatenate([self.lists[c] for c in cells]))
        ids, sims = exact_top_k(self.x[cand], q, k, ids=cand)
        return ids, sims

    def recall(self, probes: np.ndarray, k: int, nprobe: int) -> float:
        hit = total = 0
        for q in probes:
            truth, _ = exact_top_k(self.x, q, k)
            found, _ = self.search(q, k, nprobe)
            hit += len(np.intersect1d(truth, found))
            total += len(truth)
        return hit / total if total else 1.0

    def calibrate(self, probes: np.ndarray, k: int = 10, target: float = 0.95, max_fraction: float = 0.5) -> float:
        """Smallest nprobe reaching ``target`` recall; raises if it needs too many cells."""
        limit = max(1, int(np.ceil(max_fraction * self.nlist)))
        nprobe = 1
        while True:
            rec = self.recall(probes, k, nprobe)
            if rec >= target:
                self.nprobe = nprobe
                return rec
            if nprobe >= limit:
                raise RuntimeError(f"ANN recall {rec:.3f} < {target} with nprobe={nprobe}/{self.nlist}")
            nprobe = min(limit, nprobe * 2)


@dataclass
class TreeIndex:
    """Tree-node embeddings with their levels; exact scan plus optional ANN."""

    ids: np.ndarray
    embeddings: np.ndarray
    levels: np.ndarray
    ann: IVFIndex | None = None
    ann_recall: float | None = None

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def search(self, query: np.ndarray, k: int, exact: bool = False):
        if len(self.ids) == 0:
            raise ValueError("empty index")
        if k < 1:
            raise ValueError("k must be >= 1")
        if self.ann is not None and not exact:
            rows, sims = self.ann.search(query, k)
        else:
            rows, sims = exact_top_k(self.embeddings, query, k)
        return self.ids[rows], sims


def build_index(
    tree: EncodingTree,
    summaries: list[Summary],
    embeddings: np.ndarray,
    ann: bool = False,
    seed: int = 42,
    probes: int = 200,
    recall_target: float = 0.95,
) -> TreeIndex:
    ids = np.array(sorted(tree.nodes), dtype=np.int64)
    if [s.id for s in summaries] != ids.tolist():
        raise ValueError("missing summary: summaries do not cover every tree node in id order")
    emb = np.asarray(embeddings, dtype=np.float32)
    if emb.ndim != 2 or len(emb) != len(ids):
        raise ValueError(f"dimension mismatch: {len(ids)} tree nodes but embeddings of shape {emb.shape}")
    levels = np.array([tree.nodes[i].depth for i in ids], dtype=np.int64)
    index = TreeIndex(ids, emb, levels)
    if ann:
        attach_ann(index, seed=seed, probes=probes, recall_target=recall_target)
    return index


def attach_ann(index: TreeIndex, seed: int = 42, probes: int = 200, recall_target: float = 0.95) -> None:
    """Build the ANN layer and verify recall against exact top-10 on held-out probes."""
    ivf = IVFIndex(index.embeddings, seed=seed)
    rng = np.random.default_rng([seed, 1])
    base = index.embeddings[rng.choice(len(index), size=min(probes, len(index)), replace=False)].astype(np.float64)
    # probes are perturbed copies of entries, not entries themselves
    pert = base + 0.05 * rng.standard_normal(base.shape)
    pert /= np.linalg.norm(pert, axis=1, keepdims=True)
    index.ann_recall = ivf.calibrate(pert, k=10, target=recall_target)
    index.ann = ivf


# -- persistence -----------------------------------------------------------


def write_embeddings(path: Path, emb: np.ndarray) -> None:
    emb = np.ascontiguousarray(emb, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, emb.shape[1], emb.shape[0]))
        fh.write(emb.tobytes())


def read_embeddings(path: Path, expected_dim: int | None = None) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise IndexFormatError("truncated embedding file (header)")
    magic, version, dim, count = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise IndexFormatError("bad magic")
    if version != FORMAT_VERSION:
        raise IndexFormatError(f"version mismatch: embeddings format {version}, expected {FORMAT_VERSION}")
    if expected_dim is not None and dim != expected_dim:
        raise IndexFormatError(f"dimension mismatch: manifest says {expected_dim}, file header says {dim}")
    need = _HEADER.size + 4 * dim * count
    if len(raw) < need:
        raise IndexFormatError("truncated embedding file")
    if len(raw) > need:
        raise IndexFormatError("trailing bytes in embedding file")
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(count, dim).astype(np.float32)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, ensure_ascii=False) + "\n"


@dataclass
class IndexBundle:
    """Everything a query needs: index, tree, summaries, graph, manifest."""

    index: TreeIndex
    tree: EncodingTree
    summaries: list[Summary]
    graph: TextualAttributedGraph
    manifest: dict = field(default_factory=dict)


def save_index(
    index: TreeIndex,
    tree: EncodingTree,
    summaries: list[Summary],
    g: TextualAttributedGraph,
    directory: str | Path,
    manifest: dict | None = None,
) -> Path:
    """Write an index directory; ``manifest`` entries are merged into the manifest."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    g.save(out / "graph.jsonl")
    (out / "tree.json").write_text(_dump_json(tree.to_dict(g)), encoding="utf-8")
    with open(out / "summaries.jsonl", "w", encoding="utf-8") as fh:
        for s in summaries:
            fh.write(json.dumps({"id": s.id, "text": s.text, "source": s.source}, ensure_ascii=False) + "\n")
    write_embeddings(out / "embeddings.bin", index.embeddings)

    meta = dict(manifest or {})
    meta.update(
        {
            "manifest_version": MANIFEST_VERSION,
            "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "counts": {
                "graph_nodes": g.n,
                "graph_edges": g.m,
                "tree_nodes": len(index),
                "levels": int(tree.L),
            },
            "dim": int(index.dim),
            "ann": {
                "enabled": index.ann is not None,
                "nprobe": None if index.ann is None else index.ann.nprobe,
                "recall": index.ann_recall,
            },
            "checksums": {name: _sha256(out / name) for name in INDEX_FILES},
        }
    )
    (out / "manifest.json").write_text(_dump_json(meta), encoding="utf-8")
    return out


def load_index(directory: str | Path) -> IndexBundle:
    src = Path(directory)
    if not (src / "manifest.json").exists():
        raise IndexFormatError(f"no index at {src} (manifest.json missing)")
    manifest = json.loads((src / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("manifest_version") != MANIFEST_VERSION:
        raise IndexFormatError(
            f"version mismatch: manifest version {manifest.get('manifest_version')}, expected {MANIFEST_VERSION}"
        )
    for name in INDEX_FILES:
        if not (src / name).exists():
            raise IndexFormatError(f"missing index file {name}")

    emb = read_embeddings(src / "embeddings.bin", expected_dim=manifest.get("dim"))
    for name, digest in manifest.get("checksums", {}).items():
        if _sha256(src / name) != digest:
            raise IndexFormatError(f"checksum failure on {name}")

    with open(src / "graph.jsonl", encoding="utf-8") as fh:
        g = parse_graph_lines(fh)
    tree = EncodingTree.from_dict(json.loads((src / "tree.json").read_text(encoding="utf-8")), g)
    summaries = []
    with open(src / "summaries.jsonl", encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            summaries.append(Summary(int(rec["id"]), rec["text"], rec["source"]))
    if len(emb) != len(tree):
        raise IndexFormatError(f"{len(emb)} embedding rows for {len(tree)} tree nodes")
    index = build_index(tree, summaries, emb)
    ann = manifest.get("ann", {})
    if ann.get("enabled"):
        attach_ann(index, seed=manifest.get("params", {}).get("seed", 42))
    return IndexBundle(index, tree, summaries, g, manifest)
