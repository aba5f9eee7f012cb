"""Brute-force reference computations and synthetic instance generators.

Everything here is written to be obviously correct rather than fast. The
oracles never touch the cached adjacency, the entropy model or the solver.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .entropy import EntropyParams
from .graph import TextualAttributedGraph
from .tree import EncodingTree

MAX_ENUMERATION = 20

TOPIC_WORDS = (
    "river", "stone", "cloud", "ember", "maple", "harbor", "violet", "copper",
    "falcon", "meadow", "quartz", "lantern", "glacier", "orchid", "thunder", "saffron",
    "canyon", "willow", "comet", "coral", "prairie", "obsidian", "juniper", "tundra",
    "marble", "cedar", "lagoon", "ivory", "summit", "pepper", "nebula", "bamboo",
)


# -- naive entropy -----------------------------------------------------------


def _raw_edges(g: TextualAttributedGraph) -> list[tuple[str, str]]:
    return [(rec["src"], rec["dst"]) for rec in g.records() if rec["kind"] == "edge"]


def _naive_hsem(rows: list[np.ndarray], h: float) -> float:
    n = len(rows)
    d = len(rows[0])
    log_norm = -0.5 * d * math.log(2 * math.pi * h * h)
    total = 0.0
    for i in range(n):
        exps = []
        for j in range(n):
            diff = rows[i] - rows[j]
            exps.append(-float(diff @ diff) / (2 * h * h))
        top = max(exps)
        log_p = top + math.log(sum(math.exp(e - top) for e in exps)) - math.log(n) + log_norm
        total += log_p
    return -total / n


def _naive_term(child: set, parent: set, edges, degree: dict, total_vol: int, emb: dict, params: EntropyParams) -> float:
    if child == parent:
        return 0.0
    vol = sum(degree[v] for v in child)
    parent_vol = sum(degree[v] for v in parent)
    cut = sum(1 for a, b in edges if (a in child) != (b in child))
    structural = 0.0 if cut == 0 else -(cut / total_vol) * math.log2(vol / parent_vol)
    if params.lam == 0:
        return structural
    rows = [emb[v] for v in sorted(child)]
    return structural + params.lam * _naive_hsem(rows, params.bandwidth)


def _naive_context(g: TextualAttributedGraph, embeddings):
    edges = _raw_edges(g)
    degree = {v: 0 for v in g.ids}
    for a, b in edges:
        degree[a] += 1
        degree[b] += 1
    z = np.asarray(embeddings, dtype=np.float64)
    emb = {v: z[i] for i, v in enumerate(g.ids)}
    return edges, degree, sum(degree.values()), emb


def oracle_total_entropy(tree: EncodingTree, g: TextualAttributedGraph, embeddings, params: EntropyParams) -> float:
    """Total tree entropy summed term by term from the raw edge list."""
    tree.validate(g.n, regulated=False)
    edges, degree, total_vol, emb = _naive_context(g, embeddings)
    sets = {i: {g.ids[k] for k in node.members} for i, node in tree.nodes.items()}
    total = 0.0
    for i, node in tree.nodes.items():
        if node.parent is None:
            continue
        total += _naive_term(sets[i], sets[node.parent], edges, degree, total_vol, emb, params)
    return total


def enumerate_bipartitions(g: TextualAttributedGraph, cluster, embeddings, params: EntropyParams):
    """Exhaustive optimum over all two-sided splits of ``cluster``.

    Returns ((side_a, side_b), objective) with side A holding the smallest id;
    ties go to the lexicographically smallest side A.
    """
    members = sorted(set(cluster))
    if len(members) < 2:
        raise ValueError("cluster needs at least 2 nodes")
    if len(members) > MAX_ENUMERATION:
        raise ValueError(f"cluster too large for enumeration ({len(members)} > {MAX_ENUMERATION})")
    edges, degree, total_vol, emb = _naive_context(g, embeddings)
    parent = set(members)
    first, rest = members[0], members[1:]
    memo: dict[frozenset, float] = {}

    def term(side: frozenset) -> float:
        if side not in memo:
            memo[side] = _naive_term(set(side), parent, edges, degree, total_vol, emb, params)
        return memo[side]

    best = None
    for r in range(0, len(rest)):
        for extra in itertools.combinations(rest, r):
            a = frozenset((first, *extra))
            b = frozenset(parent - a)
            value = term(a) + term(b)
            key = sorted(a)
            if best is None or value < best[0] - 1e-12 * max(1.0, abs(best[0])) or (
                abs(value - best[0]) <= 1e-12 * max(1.0, abs(best[0])) and key < best[1]
            ):
                best = (value, key, sorted(b))
    return (tuple(best[1]), tuple(best[2])), best[0]


# -- generators ----------------------------------------------------------------


@dataclass
class PlantedInstance:
    graph: TextualAttributedGraph
    embeddings: np.ndarray
    labels: np.ndarray
    semantic_labels: np.ndarray
    kind: str = "sbm"


@dataclass
class CatalyticInstance:
    graph: TextualAttributedGraph
    embeddings: np.ndarray
    pair: tuple[str, str]
    delta: float = 0.05
    gamma: int = 3
    bandwidth: float = 0.4
    grid: tuple[float, ...] = (0.0, 0.1, 0.25, 0.5, 0.75, 1.0, 2.0, 5.0, 10.0)
    lambda0: float | None = None

    def similarity(self) -> float:
        u, v = (self.graph.index_of(x) for x in self.pair)
        return float(self.embeddings[u] @ self.embeddings[v])

    def geodesic(self) -> int:
        return geodesic_distance(self.graph, *self.pair)


def geodesic_distance(g: TextualAttributedGraph, a: str, b: str) -> int:
    """Breadth-first hop count between two nodes; -1 when disconnected."""
    src, dst = g.index_of(a), g.index_of(b)
    dist = {src: 0}
    frontier = [src]
    while frontier:
        nxt = []
        for i in frontier:
            for j in g.neighbors(i):
                j = int(j)
                if j not in dist:
                    dist[j] = dist[i] + 1
                    nxt.append(j)
        frontier = nxt
    return dist.get(dst, -1)


def _topic_text(rng: np.random.Generator, topic: int, node: int, words: int = 4) -> str:
    vocab = [TOPIC_WORDS[(3 * topic + k) % len(TOPIC_WORDS)] for k in range(3)]
    picks = rng.choice(len(vocab), size=words)
    return " ".join([f"topic{topic}"] + [vocab[p] for p in picks] + [f"item{node}"])


def _semantic_vectors(rng, labels: np.ndarray, dim: int, noise: float) -> np.ndarray:
    k = int(labels.max()) + 1
    if dim < k:
        raise ValueError(f"dim {dim} too small for {k} semantic clusters")
    z = np.eye(dim)[labels] + noise * rng.standard_normal((len(labels), dim))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def gen_planted(
    kind: str = "sbm",
    n: int = 120,
    seed: int = 42,
    semantic_layout: str = "aligned",
    blocks: int = 4,
    p_in: float = 0.3,
    p_out: float = 0.02,
    noise: float = 0.05,
    dim: int = 16,
) -> PlantedInstance:
    """Seeded synthetic instance.

    ``sbm`` plants ``blocks`` structural blocks; semantic clusters follow the
    blocks (``aligned``), a shifted labelling (``misaligned``) or are drawn at
    random (``random``). ``barbell`` is two cliques joined by one edge and
    ``path`` is a simple path with endpoints sharing an embedding.
    """
    if n < 4:
        raise ValueError("n must be >= 4")
    rng = np.random.default_rng(seed)
    ids = [f"n{i:0{len(str(n - 1))}d}" for i in range(n)]
    if kind == "sbm":
        if not 1 <= blocks <= n:
            raise ValueError("blocks must be in [1, n]")
        labels = np.arange(n) * blocks // n
        prob = np.where(labels[:, None] == labels[None, :], p_in, p_out)
        upper = np.triu(rng.random((n, n)) < prob, k=1)
        pairs = list(zip(*np.nonzero(upper)))
        # keep the graph connected along each block and between blocks
        for i in range(n - 1):
            if not upper[i, i + 1]:
                pairs.append((i, i + 1))
    elif kind == "barbell":
        half = n // 2
        labels = (np.arange(n) >= half).astype(np.int64)
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if labels[i] == labels[j]]
        pairs.append((half - 1, half))
    elif kind == "path":
        labels = np.zeros(n, dtype=np.int64)
        pairs = [(i, i + 1) for i in range(n - 1)]
    else:
        raise ValueError(f"unknown instance kind {kind!r}")

    if kind == "path":
        if semantic_layout not in ("endpoints-identical", "aligned"):
            raise ValueError(f"unknown semantic layout {semantic_layout!r} for path")
        sem = np.concatenate([[0], np.arange(1, n - 1), [0]]).astype(np.int64)
        z = np.eye(n - 1)[sem]
    else:
        k = int(labels.max()) + 1
        if semantic_layout == "aligned":
            sem = labels.copy()
        elif semantic_layout == "misaligned":
            sem = (labels + (np.arange(n) % 2)) % k
        elif semantic_layout == "random":
            sem = rng.integers(0, k, size=n)
        else:
            raise ValueError(f"unknown semantic layout {semantic_layout!r}")
        z = _semantic_vectors(rng, sem, max(dim, k), noise)

    nodes = [(ids[i], _topic_text(rng, int(sem[i]), i)) for i in range(n)]
    seen = set()
    edges = []
    for i, j in sorted((int(a), int(b)) for a, b in pairs):
        if (i, j) not in seen:
            seen.add((i, j))
            edges.append((ids[i], ids[j], f"link{i}-{j}"))
    g = TextualAttributedGraph(nodes, edges)
    return PlantedInstance(g, z, labels.astype(np.int64), sem.astype(np.int64), kind)


def path_instance(n: int = 5, bandwidth: float = 0.4) -> CatalyticInstance:
    """Path u - w1 - ... - v whose endpoints share an embedding; interior rows orthonormal."""
    if n < 5:
        raise ValueError("path instance needs n >= 5 for a geodesic above 3")
    labels = ["u"] + [f"w{i}" for i in range(1, n - 1)] + ["v"]
    z = np.eye(n - 1)[np.concatenate([[0], np.arange(1, n - 1), [0]])]
    nodes = [(lab, f"{lab} {'anchor' if lab in ('u', 'v') else 'bridge'}") for lab in labels]
    edges = [(labels[i], labels[i + 1], None) for i in range(n - 1)]
    inst = CatalyticInstance(TextualAttributedGraph(nodes, edges), z, ("u", "v"), bandwidth=bandwidth)
    if not inst.similarity() > 1 - inst.delta:
        raise ValueError("endpoint similarity below 1 - delta")
    if not inst.geodesic() > inst.gamma:
        raise ValueError("endpoint geodesic not above gamma")
    return inst


@dataclass
class SweepRow:
    lam: float
    split: tuple[tuple[str, ...], tuple[str, ...]]
    objective: float
    together: bool
    bridging: tuple[str, ...] = ()


@dataclass
class SweepReport:
    rows: list[SweepRow] = field(default_factory=list)
    lambda0: float | None = None
    monotone: bool = True
    violations: list[float] = field(default_factory=list)


def catalytic_sweep(instance: CatalyticInstance, grid=None, params: EntropyParams | None = None) -> SweepReport:
    """Exhaustive root bipartition for every lambda on the grid."""
    grid = tuple(instance.grid if grid is None else grid)
    if not grid:
        raise ValueError("empty lambda grid")
    base = params or EntropyParams(bandwidth=instance.bandwidth)
    g = instance.graph
    u, v = instance.pair
    report = SweepReport()
    for lam in grid:
        p = EntropyParams(lam=lam, bandwidth=base.bandwidth, subsample_cap=base.subsample_cap, seed=base.seed)
        (a, b), obj = enumerate_bipartitions(g, g.ids, instance.embeddings, p)
        side = a if u in a else b
        together = v in side
        bridging = tuple(x for x in side if x not in (u, v)) if together else ()
        report.rows.append(SweepRow(lam, (a, b), obj, together, bridging))
    flags = [r.together for r in report.rows]
    if any(flags):
        first = flags.index(True)
        report.lambda0 = report.rows[first].lam
        report.violations = [r.lam for r in report.rows[first:] if not r.together]
        report.monotone = not report.violations
    instance.lambda0 = report.lambda0
    return report


def label_agreement(tree: EncodingTree, labels, depth: int = 1) -> float:
    """Adjusted Rand index between a tree level and reference labels."""
    from sklearn.metrics import adjusted_rand_score

    pred = np.empty(len(labels), dtype=np.int64)
    for k, node in enumerate(tree.level(depth)):
        pred[node.members] = k
    return float(adjusted_rand_score(np.asarray(labels), pred))


def random_tree(g: TextualAttributedGraph, L: int, rng: np.random.Generator) -> EncodingTree:
    """Random regulated tree over ``g``: each level randomly refines the previous one."""
    tree = EncodingTree(L)
    everything = np.arange(g.n, dtype=np.int64)
    tree.add(everything, None, g.volume_of(everything), g.cut_of(everything))
    frontier = [tree.root]
    for depth in range(1, L + 1):
        nxt = []
        for pid in frontier:
            members = tree.nodes[pid].members
            if depth == L:
                parts = [members[i : i + 1] for i in range(len(members))]
            elif len(members) == 1:
                parts = [members]
            else:
                k = int(rng.integers(1, len(members) + 1))
                lab = rng.integers(0, k, size=len(members))
                parts = [members[lab == c] for c in range(k) if (lab == c).any()]
            for part in parts:
                nxt.append(tree.add(np.sort(part), pid, g.volume_of(part), g.cut_of(part)).id)
        frontier = nxt
    return tree


def random_graph(n: int, p: float, rng: np.random.Generator, dim: int = 3):
    """Seeded Erdos-Renyi style graph with at least one edge, plus random unit embeddings."""
    ids = [f"v{i:02d}" for i in range(n)]
    edges = [(ids[i], ids[j], None) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    if not edges:
        edges = [(ids[0], ids[1], None)]
    z = rng.standard_normal((n, dim))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    g = TextualAttributedGraph([(v, f"text of {v}") for v in ids], edges)
    return g, z


def tree_from_nested(g: TextualAttributedGraph, nested, L: int | None = None) -> EncodingTree:
    """Tree from a nested list spec: a string is a leaf, a list is an internal node.

    ``nested`` describes the root's children, e.g. ``[["a", "b"], ["c"]]``.
    A one-element list around a subtree makes a node whose set equals its
    child's (a pass-through).
    """

    def members(spec) -> list[str]:
        if isinstance(spec, str):
            return [spec]
        return [v for child in spec for v in members(child)]

    def height(spec) -> int:
        return 0 if isinstance(spec, str) else 1 + max(height(c) for c in spec)

    tree = EncodingTree(height(nested) if L is None else L)

    def add(spec, parent):
        idx = g.indices(members(spec))
        node = tree.add(idx, parent, g.volume_of(idx), g.cut_of(idx))
        if not isinstance(spec, str):
            for child in spec:
                add(child, node.id)
        return node

    root = add(list(nested), None)
    if sorted(root.members.tolist()) != list(range(g.n)):
        raise ValueError("nested spec does not cover the graph exactly")
    return tree
