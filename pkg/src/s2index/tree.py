"""Encoding trees and their construction by entropy-guided top-down partitioning.

Construction runs in three stages:

1. recursive bipartition of every cluster down to singletons,
2. pruning internal nodes (cheapest entropy increase first) until the height
   is at most ``L``,
3. regulation: pass-through nodes are stacked above shallow leaves so every
   leaf sits at depth exactly ``L``.
"""

from __future__ import annotations

import heapq
import logging
import math
from collections import deque
from dataclasses import dataclass
from itertools import product

import numpy as np
import scipy.sparse as sp
from numba import njit

from .entropy import (
    EntropyParams,
    S2Entropy,
    _stable_key,
    log_kernel_norm,
    sq_distances,
)
from .graph import TextualAttributedGraph

log = logging.getLogger(__name__)


class TreeError(ValueError):
    """Invalid tree structure or an operation applied to the wrong node."""


@dataclass(frozen=True)
class SolverConfig:
    exact_threshold: int = 12
    seed: int = 42
    # moves must beat the current objective by more than this
    improve_tol: float = 1e-12
    max_passes: int = 200
    power_iterations: int = 300
    kmeans_iterations: int = 25

    def __post_init__(self):
        if self.exact_threshold < 2:
            raise ValueError("exact_threshold must be >= 2")
        if self.exact_threshold > 20:
            raise ValueError("exact_threshold above 20 is not supported")


class TreeNode:
    __slots__ = ("id", "parent", "children", "depth", "members", "volume", "cut")

    def __init__(self, id, parent, depth, members, volume, cut):
        self.id = id
        self.parent = parent
        self.children: list[int] = []
        self.depth = depth
        self.members = members
        self.volume = volume
        self.cut = cut

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def __repr__(self) -> str:
        return (
            f"TreeNode(id={self.id}, parent={self.parent}, depth={self.depth}, "
            f"size={len(self.members)}, children={self.children})"
        )


class EncodingTree:
    """Rooted hierarchy of node sets over one graph.

    ``members`` of every tree node is a sorted int64 array of graph node
    indices.
    """

    def __init__(self, L: int):
        if L < 1:
            raise ValueError(f"L must be >= 1, got {L}")
        self.L = L
        self.nodes: dict[int, TreeNode] = {}
        self.root: int | None = None
        self._next_id = 0

    def add(self, members: np.ndarray, parent: int | None, volume: int, cut: int, position=None) -> TreeNode:
        depth = 0 if parent is None else self.nodes[parent].depth + 1
        node = TreeNode(self._next_id, parent, depth, members, volume, cut)
        self._next_id += 1
        self.nodes[node.id] = node
        if parent is None:
            if self.root is not None:
                raise TreeError("tree already has a root")
            self.root = node.id
        elif position is None:
            self.nodes[parent].children.append(node.id)
        else:
            self.nodes[parent].children.insert(position, node.id)
        return node

    def __len__(self) -> int:
        return len(self.nodes)

    def __getitem__(self, key: int) -> TreeNode:
        return self.nodes[key]

    @property
    def height(self) -> int:
        return max(node.depth for node in self.nodes.values())

    def leaves(self) -> list[TreeNode]:
        return [node for node in self.nodes.values() if node.is_leaf]

    def level(self, depth: int) -> list[TreeNode]:
        return [node for node in self.nodes.values() if node.depth == depth]

    def is_pass_through(self, node_id: int) -> bool:
        node = self.nodes[node_id]
        return len(node.children) == 1 and len(self.nodes[node.children[0]].members) == len(node.members)

    def is_ancestor(self, a: int, b: int) -> bool:
        cur = self.nodes[b].parent
        while cur is not None:
            if cur == a:
                return True
            cur = self.nodes[cur].parent
        return False

    def subtree(self, node_id: int) -> list[int]:
        out, stack = [], [node_id]
        while stack:
            cur = stack.pop()
            out.append(cur)
            stack.extend(reversed(self.nodes[cur].children))
        return out

    def deepest_leaf(self) -> dict[int, int]:
        """Depth of the deepest leaf below every tree node."""
        deepest: dict[int, int] = {}
        for node_id in reversed(self.bfs_order()):
            node = self.nodes[node_id]
            if node.is_leaf:
                deepest[node_id] = node.depth
            else:
                deepest[node_id] = max(deepest[c] for c in node.children)
        return deepest

    def bfs_order(self) -> list[int]:
        out, queue = [], deque([self.root])
        while queue:
            cur = queue.popleft()
            out.append(cur)
            if len(out) > len(self.nodes):
                raise TreeError("cycle detected")
            queue.extend(self.nodes[cur].children)
        return out

    def copy(self) -> "EncodingTree":
        other = EncodingTree(self.L)
        other.root = self.root
        other._next_id = self._next_id
        for node in self.nodes.values():
            dup = TreeNode(node.id, node.parent, node.depth, node.members, node.volume, node.cut)
            dup.children = list(node.children)
            other.nodes[node.id] = dup
        return other

    def canonicalize(self) -> "EncodingTree":
        """Copy with ids renumbered in breadth-first order (root = 0)."""
        order = self.bfs_order()
        remap = {old: new for new, old in enumerate(order)}
        other = EncodingTree(self.L)
        other.root = 0
        other._next_id = len(order)
        for old in order:
            node = self.nodes[old]
            dup = TreeNode(
                remap[old],
                None if node.parent is None else remap[node.parent],
                node.depth,
                node.members,
                node.volume,
                node.cut,
            )
            dup.children = [remap[c] for c in node.children]
            other.nodes[dup.id] = dup
        return other

    def level_partitions(self) -> dict[int, list[np.ndarray]]:
        out: dict[int, list[np.ndarray]] = {}
        for node in self.nodes.values():
            out.setdefault(node.depth, []).append(node.members)
        return out

    def validate(self, n: int, regulated: bool = True) -> None:
        """Raise ``TreeError`` unless every structural invariant holds."""
        if self.root is None:
            raise TreeError("tree has no root")
        root = self.nodes[self.root]
        if root.parent is not None or root.depth != 0:
            raise TreeError("root must have no parent and depth 0")
        if not np.array_equal(root.members, np.arange(n)):
            raise TreeError("root node set must equal V")
        seen = set()
        for node_id in self.bfs_order():
            if node_id in seen:
                raise TreeError("cycle detected")
            seen.add(node_id)
            node = self.nodes[node_id]
            if len(node.members) == 0:
                raise TreeError(f"tree node {node_id} has an empty node set")
            for c in node.children:
                child = self.nodes[c]
                if child.parent != node_id:
                    raise TreeError(f"child {c} does not point back to parent {node_id}")
                if child.depth != node.depth + 1:
                    raise TreeError(f"depth of {c} inconsistent with parent {node_id}")
            if node.children:
                union = np.concatenate([self.nodes[c].members for c in node.children])
                if len(union) != len(node.members) or not np.array_equal(np.sort(union), node.members):
                    raise TreeError(f"tree node {node_id} is not the disjoint union of its children")
        if len(seen) != len(self.nodes):
            raise TreeError("unreachable tree nodes")
        if regulated:
            for leaf in self.leaves():
                if len(leaf.members) != 1:
                    raise TreeError(f"leaf {leaf.id} is not a singleton")
                if leaf.depth != self.L:
                    raise TreeError(f"leaf {leaf.id} at depth {leaf.depth}, expected {self.L}")
            for depth, sets in self.level_partitions().items():
                cover = np.sort(np.concatenate(sets))
                if not np.array_equal(cover, np.arange(n)):
                    raise TreeError(f"level {depth} does not partition V")

    # -- serialization ---------------------------------------------------

    def to_dict(self, g: TextualAttributedGraph) -> dict:
        nodes = []
        for node_id in sorted(self.nodes):
            node = self.nodes[node_id]
            rec = {
                "id": node.id,
                "parent": node.parent,
                "children": list(node.children),
                "depth": node.depth,
            }
            if node.is_leaf:
                rec["leaf_member"] = g.ids[int(node.members[0])]
            rec["pass_through"] = self.is_pass_through(node_id)
            nodes.append(rec)
        return {"L": self.L, "nodes": nodes}

    @classmethod
    def from_dict(cls, data: dict, g: TextualAttributedGraph) -> "EncodingTree":
        tree = cls(int(data["L"]))
        recs = {int(r["id"]): r for r in data["nodes"]}
        roots = [i for i, r in recs.items() if r["parent"] is None]
        if len(roots) != 1:
            raise TreeError(f"expected exactly one root, found {len(roots)}")
        for node_id, rec in recs.items():
            node = TreeNode(node_id, rec["parent"], int(rec["depth"]), None, 0, 0)
            node.children = [int(c) for c in rec["children"]]
            tree.nodes[node_id] = node
        tree.root = roots[0]
        tree._next_id = max(recs) + 1
        for node_id in reversed(tree.bfs_order()):
            node = tree.nodes[node_id]
            if node.is_leaf:
                if "leaf_member" not in recs[node_id]:
                    raise TreeError(f"leaf {node_id} has no leaf_member")
                node.members = np.array([g.index_of(recs[node_id]["leaf_member"])], dtype=np.int64)
            else:
                node.members = np.sort(np.concatenate([tree.nodes[c].members for c in node.children]))
            node.volume = g.volume_of(node.members)
            node.cut = g.cut_of(node.members)
        return tree


# -- bipartition solvers ---------------------------------------------------


class _Cluster:
    """Local view of one cluster: ids, degrees, induced adjacency, kernels."""

    def __init__(self, model: S2Entropy, members: np.ndarray, cap: int | None, seed: int):
        g = model.g
        self.model = model
        self.members = members
        self.m = len(members)
        self.ids = [g.ids[i] for i in members]
        self.order = sorted(range(self.m), key=self.ids.__getitem__)
        self.deg = g.degrees[members].astype(np.int64)
        self.vol = int(self.deg.sum())
        self.cut = g.cut_of(members)
        self.adj: sp.csr_matrix = g.adjacency[members][:, members].tocsr()
        self.key = _stable_key(members.tobytes())
        self.rng = np.random.default_rng([seed, self.key])
        self.lam = model.lam
        self.total_vol = model.total_volume
        h = model.params.bandwidth
        self.log_norm = log_kernel_norm(model.z.shape[1], h)
        if self.lam:
            if cap is not None and self.m > cap:
                anchors = np.sort(self.rng.choice(self.m, size=cap, replace=False))
            else:
                anchors = np.arange(self.m)
            z = model.z[members[anchors]]
            kernel = np.exp(-sq_distances(z, z) / (2 * h * h))
            np.fill_diagonal(kernel, 1.0)
            self.anchors = anchors
            self.anchor_pos = np.full(self.m, -1, dtype=np.int64)
            self.anchor_pos[anchors] = np.arange(len(anchors))
            self.kernel = kernel

    def structural(self, cut, vol):
        if cut == 0:
            return 0.0
        return -(cut / self.total_vol) * math.log2(vol / self.vol)

    def side_ids(self, in_a: np.ndarray) -> tuple[str, ...]:
        return tuple(sorted(self.ids[i] for i in np.flatnonzero(in_a)))

    def orient(self, in_a: np.ndarray) -> np.ndarray:
        """Flip so side A holds the smallest node id."""
        return in_a if in_a[self.order[0]] else ~in_a

    def true_objective(self, in_a: np.ndarray) -> float:
        model = self.model
        total = 0.0
        for side in (in_a, ~in_a):
            idx = self.members[side]
            vol, cut = model.stats(idx)
            total += model.term(idx, cut, vol, self.vol, self.m)
        return total


def _exact_bipartition(c: _Cluster) -> tuple[np.ndarray, float]:
    m = c.m
    first = c.order[0]
    others = [i for i in range(m) if i != first]
    # every assignment of the other nodes to side B, except "none"
    bits = np.array(list(product((False, True), repeat=m - 1))[1:], dtype=bool)
    in_a = np.ones((len(bits), m), dtype=bool)
    in_a[:, others] = ~bits
    in_b = ~in_a

    deg = c.deg.astype(np.float64)
    vol_a = in_a @ deg
    vol_b = c.vol - vol_a
    coo = sp.triu(c.adj, k=1).tocoo()
    ei, ej = coo.row, coo.col
    e_a = (in_a[:, ei] & in_a[:, ej]).sum(1)
    e_b = (in_b[:, ei] & in_b[:, ej]).sum(1)
    # cut relative to the whole graph: edges leaving the cluster count too
    cut_a = vol_a - 2 * e_a
    cut_b = vol_b - 2 * e_b

    def struct(cut, vol):
        out = np.zeros(len(cut))
        nz = cut > 0
        out[nz] = -(cut[nz] / c.total_vol) * np.log2(vol[nz] / c.vol)
        return out

    obj = struct(cut_a, vol_a) + struct(cut_b, vol_b)
    if c.lam:
        k = c.kernel
        if len(c.anchors) != m:
            z = c.model.z[c.members]
            h = c.model.params.bandwidth
            k = np.exp(-sq_distances(z, z) / (2 * h * h))
            np.fill_diagonal(k, 1.0)
        obj = obj + c.lam * (_batch_hsem(in_a, k, c.log_norm) + _batch_hsem(in_b, k, c.log_norm))

    best = obj.min()
    tol = 1e-12 * max(1.0, abs(best))
    cands = np.flatnonzero(obj <= best + tol)
    pick = min(cands, key=lambda s: c.side_ids(in_a[s]))
    return in_a[pick].copy(), float(obj[pick])


def _batch_hsem(mask: np.ndarray, kernel: np.ndarray, log_norm: float) -> np.ndarray:
    f = mask.astype(np.float64)
    sizes = f.sum(1)
    dens = f @ kernel
    logs = np.where(mask, np.log(np.where(mask, dens, 1.0)), 0.0).sum(1)
    return -logs / sizes + np.log(sizes) - log_norm


@njit(cache=True)
def _side_hsem(r, in_anchor_a, side_a, skip, log_norm):
    total = 0.0
    count = 0
    for i in range(len(r)):
        if i == skip:
            continue
        if in_anchor_a[i] == side_a:
            total += np.log(r[i])
            count += 1
    return total, count


@njit(cache=True)
def _structural(cut, vol, cluster_vol, total_vol):
    if cut == 0:
        return 0.0
    return -(cut / total_vol) * np.log2(vol / cluster_vol)


@njit(cache=True)
def _relocation_search(order, in_a, deg, indptr, indices, cluster_vol, total_vol,
                       lam, kernel, anchor_pos, log_norm, tol, max_passes):
    """First-improvement single-node relocation until a pass finds nothing.

    Semantic entropy of a side is evaluated on its anchor rows; ``kernel`` is
    the anchor-by-anchor Gaussian kernel matrix (unnormalized, unit diagonal).
    Returns the final assignment, objective and number of passes.
    """
    m = len(in_a)
    in_a = in_a.copy()
    nbr_a = np.zeros(m, dtype=np.int64)
    nbr_b = np.zeros(m, dtype=np.int64)
    for x in range(m):
        for k in range(indptr[x], indptr[x + 1]):
            if in_a[indices[k]]:
                nbr_a[x] += 1
            else:
                nbr_b[x] += 1
    size_a = 0
    vol_a = 0
    e2_a = 0
    e2_b = 0
    for x in range(m):
        if in_a[x]:
            size_a += 1
            vol_a += deg[x]
            e2_a += nbr_a[x]
        else:
            e2_b += nbr_b[x]
    cut_a = vol_a - e2_a
    cut_b = (cluster_vol - vol_a) - e2_b

    na = kernel.shape[0]
    anc_a = np.zeros(na, dtype=np.bool_)
    r_a = np.zeros(na)
    r_b = np.zeros(na)
    h_a = 0.0
    h_b = 0.0
    semantic = lam > 0.0 and na > 0
    if semantic:
        for x in range(m):
            p = anchor_pos[x]
            if p >= 0:
                anc_a[p] = in_a[x]
        for i in range(na):
            for j in range(na):
                if anc_a[j]:
                    r_a[i] += kernel[i, j]
                else:
                    r_b[i] += kernel[i, j]
        s, c = _side_hsem(r_a, anc_a, True, -1, log_norm)
        h_a = -s / c + np.log(c) - log_norm if c > 0 else -log_norm
        s, c = _side_hsem(r_b, anc_a, False, -1, log_norm)
        h_b = -s / c + np.log(c) - log_norm if c > 0 else -log_norm

    value = (_structural(cut_a, vol_a, cluster_vol, total_vol)
             + _structural(cut_b, cluster_vol - vol_a, cluster_vol, total_vol))
    if semantic:
        value += lam * (h_a + h_b)

    passes = 0
    while passes < max_passes:
        passes += 1
        improved = False
        for x in order:
            from_a = in_a[x]
            if from_a and size_a == 1:
                continue
            if (not from_a) and size_a == m - 1:
                continue
            d = deg[x]
            na_x = nbr_a[x]
            nb_x = nbr_b[x]
            if from_a:
                new_cut_a = cut_a - (d - na_x) + na_x
                new_cut_b = cut_b + (d - nb_x) - nb_x
                new_vol_a = vol_a - d
            else:
                new_cut_a = cut_a + (d - na_x) - na_x
                new_cut_b = cut_b - (d - nb_x) + nb_x
                new_vol_a = vol_a + d
            new_h_a = h_a
            new_h_b = h_b
            p = anchor_pos[x] if semantic else -1
            if p >= 0:
                sign = -1.0 if from_a else 1.0
                sa = 0.0
                ca = 0
                sb = 0.0
                cb = 0
                for i in range(na):
                    side_a = anc_a[i] if i != p else (not from_a)
                    if side_a:
                        sa += np.log(r_a[i] + sign * kernel[i, p])
                        ca += 1
                    else:
                        sb += np.log(r_b[i] - sign * kernel[i, p])
                        cb += 1
                new_h_a = -sa / ca + np.log(ca) - log_norm if ca > 0 else -log_norm
                new_h_b = -sb / cb + np.log(cb) - log_norm if cb > 0 else -log_norm
            new_value = (_structural(new_cut_a, new_vol_a, cluster_vol, total_vol)
                         + _structural(new_cut_b, cluster_vol - new_vol_a, cluster_vol, total_vol))
            if semantic:
                new_value += lam * (new_h_a + new_h_b)
            if new_value < value - tol * max(1.0, abs(value)):
                in_a[x] = not from_a
                size_a += -1 if from_a else 1
                cut_a = new_cut_a
                cut_b = new_cut_b
                vol_a = new_vol_a
                for k in range(indptr[x], indptr[x + 1]):
                    y = indices[k]
                    if from_a:
                        nbr_a[y] -= 1
                        nbr_b[y] += 1
                    else:
                        nbr_a[y] += 1
                        nbr_b[y] -= 1
                if p >= 0:
                    sign = -1.0 if from_a else 1.0
                    for i in range(na):
                        r_a[i] += sign * kernel[i, p]
                        r_b[i] -= sign * kernel[i, p]
                    anc_a[p] = not from_a
                h_a = new_h_a
                h_b = new_h_b
                value = new_value
                improved = True
        if not improved:
            break
    return in_a, value, passes


def _local_search(c: _Cluster, in_a: np.ndarray, cfg: SolverConfig) -> np.ndarray:
    if c.lam:
        kernel, anchor_pos = c.kernel, c.anchor_pos
    else:
        kernel, anchor_pos = np.zeros((0, 0)), np.full(c.m, -1, dtype=np.int64)
    mask, _, passes = _relocation_search(
        np.asarray(c.order, dtype=np.int64),
        in_a.astype(np.bool_),
        c.deg,
        c.adj.indptr.astype(np.int64),
        c.adj.indices.astype(np.int64),
        c.vol,
        c.total_vol,
        float(c.lam),
        kernel,
        anchor_pos,
        c.log_norm,
        cfg.improve_tol,
        cfg.max_passes,
    )
    if passes >= cfg.max_passes:
        log.warning("local search hit max_passes=%d on a cluster of %d nodes", cfg.max_passes, c.m)
    return mask


def _fix_empty(in_a: np.ndarray, score: np.ndarray) -> np.ndarray:
    if in_a.all() or not in_a.any():
        order = np.argsort(score, kind="stable")
        in_a = np.zeros(len(in_a), dtype=bool)
        in_a[order[: len(in_a) // 2]] = True
    return in_a


def spectral_seed(c: _Cluster, iterations: int = 300, stable: int = 25) -> np.ndarray:
    """Sign split of an approximate Fiedler vector of the induced subgraph.

    Power iteration on ``shift*I - Laplacian`` restricted to vectors orthogonal
    to the all-ones vector; stops once the sign pattern has been stable for
    ``stable`` iterations.
    """
    adj = c.adj.astype(np.float64)
    local_deg = np.asarray(adj.sum(1)).ravel()
    shift = 2.0 * local_deg.max() + 1.0
    op = sp.diags(shift - local_deg) + adj
    if c.m <= 1024:
        op = op.toarray()
    v = c.rng.standard_normal(c.m)
    v -= v.mean()
    v /= np.linalg.norm(v) or 1.0
    signs, same = v >= 0, 0
    for _ in range(iterations):
        w = op @ v
        w -= w.mean()
        norm = np.linalg.norm(w)
        if norm == 0:
            break
        v = w / norm
        new = v >= 0
        same = same + 1 if np.array_equal(new, signs) else 0
        signs = new
        if same >= stable:
            break
    return _fix_empty(v >= 0, v)


def kmeans_seed(c: _Cluster, iterations: int = 25) -> np.ndarray:
    """Two-means split of the cluster's embeddings."""
    z = c.model.z[c.members]
    c1 = z[c.order[0]]
    d1 = ((z - c1) ** 2).sum(1)
    c2 = z[int(np.argmax(d1))]
    in_a = np.ones(c.m, dtype=bool)
    for _ in range(iterations):
        da = ((z - c1) ** 2).sum(1)
        db = ((z - c2) ** 2).sum(1)
        new = da <= db
        if new.all() or not new.any():
            break
        if np.array_equal(new, in_a):
            break
        in_a = new
        c1, c2 = z[in_a].mean(0), z[~in_a].mean(0)
    return _fix_empty(in_a, ((z - z[c.order[0]]) ** 2).sum(1))


def random_seed(c: _Cluster) -> np.ndarray:
    in_a = c.rng.random(c.m) < 0.5
    if in_a.all() or not in_a.any():
        in_a[c.order[0]] = True
        in_a[c.order[-1]] = False
    return in_a


def bipartition(
    model: S2Entropy, members: np.ndarray, cfg: SolverConfig = SolverConfig()
) -> tuple[np.ndarray, np.ndarray, float]:
    """Split ``members`` into two nonempty sides minimizing the children's entropy.

    Returns (side_a, side_b, objective) where side A holds the
    lexicographically smallest node id.
    """
    members = np.asarray(members, dtype=np.int64)
    if len(members) < 2:
        raise TreeError("cannot partition a singleton")
    c = _Cluster(model, members, model.params.subsample_cap, cfg.seed)
    if c.m <= cfg.exact_threshold:
        in_a, _ = _exact_bipartition(c)
    else:
        results = []
        for seed_mask in (
            spectral_seed(c, cfg.power_iterations),
            kmeans_seed(c, cfg.kmeans_iterations),
            random_seed(c),
        ):
            mask = _local_search(c, c.orient(seed_mask), cfg)
            mask = c.orient(mask)
            results.append((c.true_objective(mask), c.side_ids(mask), mask))
        best = min(r[0] for r in results)
        tol = 1e-12 * max(1.0, abs(best))
        in_a = min((r for r in results if r[0] <= best + tol), key=lambda r: r[1])[2]
    in_a = c.orient(in_a)
    return members[in_a], members[~in_a], c.true_objective(in_a)


# -- tree operations -------------------------------------------------------


def partition_node(
    tree: EncodingTree, alpha: int, model: S2Entropy, cfg: SolverConfig = SolverConfig()
) -> tuple[int, int]:
    node = tree.nodes[alpha]
    if node.children:
        raise TreeError(f"tree node {alpha} already has children")
    side_a, side_b, _ = bipartition(model, node.members, cfg)
    ids = []
    for side in (side_a, side_b):
        vol, cut = model.stats(side)
        ids.append(tree.add(side, alpha, vol, cut).id)
    return ids[0], ids[1]


def _term(tree: EncodingTree, node: TreeNode, parent: TreeNode, model: S2Entropy) -> float:
    return model.term(node.members, node.cut, node.volume, parent.volume, len(parent.members))


def _check_prunable(tree: EncodingTree, alpha: int) -> TreeNode:
    node = tree.nodes.get(alpha)
    if node is None:
        raise TreeError(f"unknown tree node {alpha}")
    if node.parent is None:
        raise TreeError("cannot prune the root")
    if node.is_leaf:
        raise TreeError(f"cannot prune leaf {alpha}")
    return node


def prune_delta(tree: EncodingTree, alpha: int, model: S2Entropy) -> float:
    """Entropy change caused by pruning ``alpha``, evaluated locally."""
    node = _check_prunable(tree, alpha)
    parent = tree.nodes[node.parent]
    delta = -_term(tree, node, parent, model)
    for c in node.children:
        child = tree.nodes[c]
        delta += _term(tree, child, parent, model) - _term(tree, child, node, model)
    return delta


def prune_node(tree: EncodingTree, alpha: int) -> None:
    node = _check_prunable(tree, alpha)
    parent = tree.nodes[node.parent]
    pos = parent.children.index(alpha)
    parent.children[pos : pos + 1] = node.children
    for c in node.children:
        tree.nodes[c].parent = parent.id
    for d in node.children:
        for sub in tree.subtree(d):
            tree.nodes[sub].depth -= 1
    del tree.nodes[alpha]


def regulate(tree: EncodingTree, alpha: int, beta: int) -> int:
    """Insert a pass-through node between ``alpha`` and its child ``beta``."""
    child = tree.nodes.get(beta)
    if child is None or child.parent != alpha:
        raise TreeError(f"{alpha} is not the parent of {beta}")
    parent = tree.nodes[alpha]
    pos = parent.children.index(beta)
    parent.children.pop(pos)
    gamma = tree.add(child.members, alpha, child.volume, child.cut, position=pos)
    gamma.children = [beta]
    child.parent = gamma.id
    for sub in tree.subtree(beta):
        tree.nodes[sub].depth += 1
    return gamma.id


def _prune_stage(tree: EncodingTree, model: S2Entropy) -> int:
    L = tree.L
    deepest = tree.deepest_leaf()
    # lazy heap: an entry is live while its version matches; eligibility
    # (a leaf deeper than L below the node) only ever turns off
    version: dict[int, int] = {}
    heap: list[tuple[float, int, int]] = []

    def push(node_id: int) -> None:
        node = tree.nodes[node_id]
        if node.parent is None or node.is_leaf or deepest[node_id] <= L:
            return
        ver = version.get(node_id, 0) + 1
        version[node_id] = ver
        heapq.heappush(heap, (prune_delta(tree, node_id, model), node_id, ver))

    for node_id in tree.nodes:
        push(node_id)
    pruned = 0
    while deepest[tree.root] > L:
        if not heap:
            raise TreeError("no prunable node on an over-long path")
        delta, alpha, ver = heapq.heappop(heap)
        if version.get(alpha) != ver or alpha not in tree.nodes or deepest[alpha] <= L:
            continue
        node = tree.nodes[alpha]
        parent_id, children = node.parent, list(node.children)
        for d in children:
            for sub in tree.subtree(d):
                deepest[sub] -= 1
        prune_node(tree, alpha)
        del deepest[alpha], version[alpha]
        cur = parent_id
        while cur is not None:
            here = tree.nodes[cur]
            value = max(deepest[k] for k in here.children)
            if value == deepest[cur] and cur != parent_id:
                break
            deepest[cur] = value
            cur = here.parent
        for t in (parent_id, *children):
            push(t)
        pruned += 1
    return pruned


def _regulate_stage(tree: EncodingTree) -> int:
    inserted = 0
    root = tree.nodes[tree.root]
    if root.is_leaf:
        tree.add(root.members, root.id, root.volume, root.cut)
    for leaf in sorted(tree.leaves(), key=lambda n: n.id):
        while leaf.depth < tree.L:
            regulate(tree, leaf.parent, leaf.id)
            inserted += 1
    return inserted


def build_encoding_tree(
    g: TextualAttributedGraph,
    embeddings,
    params: EntropyParams,
    L: int,
    cfg: SolverConfig = SolverConfig(),
    model: S2Entropy | None = None,
) -> EncodingTree:
    """Build a height-``L`` encoding tree minimizing semantic-structural entropy."""
    if g.n == 0:
        raise TreeError("cannot build a tree over an empty graph")
    if model is None:
        model = S2Entropy(g, embeddings, params)
    tree = EncodingTree(L)
    everything = np.arange(g.n, dtype=np.int64)
    tree.add(everything, None, g.total_volume, 0)

    queue = deque([tree.root])
    while queue:
        node_id = queue.popleft()
        if len(tree.nodes[node_id].members) > 1:
            queue.extend(partition_node(tree, node_id, model, cfg))
    log.debug("stage 1: %d tree nodes, height %d", len(tree), tree.height)

    pruned = _prune_stage(tree, model)
    log.debug("stage 2: pruned %d nodes", pruned)
    inserted = _regulate_stage(tree)
    log.debug("stage 3: inserted %d pass-through nodes", inserted)

    tree = tree.canonicalize()
    tree.validate(g.n, regulated=True)
    return tree

