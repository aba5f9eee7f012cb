"""Semantic-structural entropy.

Each non-root tree node contributes a structural term (log base 2, scaled by
its cut) plus ``lam`` times the semantic density entropy of its cluster
(natural log, Gaussian KDE with the cluster's own points as centers).

A tree node whose node set equals its parent's set contributes exactly zero.
Such nodes only arise from regulation chains, and the convention is what
makes regulation entropy-neutral.
"""

from __future__ import annotations

import hashlib
import math
import threading
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .graph import TextualAttributedGraph

DEFAULT_BANDWIDTH_GRID = (0.05, 0.1, 0.2, 0.4, 0.8, 1.6)


@dataclass(frozen=True)
class EntropyParams:
    """Weights and KDE settings.

    ``subsample_cap`` bounds the cluster size used for the O(n^2) semantic
    entropy; ``None`` disables subsampling.
    """

    lam: float = 1.0
    bandwidth: float = 0.4
    dim: int | None = None
    subsample_cap: int | None = 2048
    seed: int = 42

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be > 0, got {self.bandwidth}")
        if self.dim is not None and self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if self.subsample_cap is not None and self.subsample_cap < 2:
            raise ValueError("subsample_cap must be >= 2")


def log_kernel_norm(dim: int, h: float) -> float:
    """log of the Gaussian kernel's peak value, -(d/2) ln(2 pi h^2)."""
    return -0.5 * dim * math.log(2.0 * math.pi * h * h)


def sq_distances(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] + (y * y).sum(1)[None, :] - 2.0 * (x @ y.T)
    np.maximum(d, 0.0, out=d)
    return d


def _self_sq_distances(z: np.ndarray) -> np.ndarray:
    d = sq_distances(z, z)
    np.fill_diagonal(d, 0.0)
    return d


def _check_dim(z: np.ndarray, params: EntropyParams) -> None:
    if params.dim is not None and z.shape[-1] != params.dim:
        raise ValueError(f"dimension mismatch: expected {params.dim}, got {z.shape[-1]}")


def kde_log_density(point, cluster, params: EntropyParams) -> float:
    """Log of the Gaussian KDE built on ``cluster`` evaluated at ``point``."""
    z = np.atleast_2d(np.asarray(cluster, dtype=np.float64))
    p = np.asarray(point, dtype=np.float64).reshape(1, -1)
    if len(z) == 0:
        raise ValueError("empty cluster")
    if p.shape[1] != z.shape[1]:
        raise ValueError(f"dimension mismatch: point {p.shape[1]} vs cluster {z.shape[1]}")
    _check_dim(z, params)
    h = params.bandwidth
    d2 = sq_distances(p, z)[0]
    return float(
        logsumexp(-d2 / (2 * h * h)) - math.log(len(z)) + log_kernel_norm(z.shape[1], h)
    )


def _hsem_exact(z: np.ndarray, h: float) -> float:
    n, d = z.shape
    if n == 1:
        return -log_kernel_norm(d, h)
    logk = -_self_sq_distances(z) / (2 * h * h)
    logp = logsumexp(logk, axis=1) - math.log(n) + log_kernel_norm(d, h)
    return float(-logp.mean())


def _stable_key(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def subsample_rows(n: int, cap: int, seed: int, key: int) -> np.ndarray:
    rng = np.random.default_rng([seed, key])
    return np.sort(rng.choice(n, size=cap, replace=False))


def semantic_entropy(cluster, params: EntropyParams, key: int | None = None) -> float:
    """Semantic density entropy (nats) of the embedding rows in ``cluster``.

    Clusters above ``params.subsample_cap`` are evaluated on a uniform
    subsample seeded by ``params.seed`` and ``key`` (default: content hash).
    """
    z = np.atleast_2d(np.asarray(cluster, dtype=np.float64))
    if len(z) == 0:
        raise ValueError("empty cluster")
    _check_dim(z, params)
    cap = params.subsample_cap
    if cap is not None and len(z) > cap:
        if key is None:
            key = _stable_key(np.ascontiguousarray(z).tobytes())
        z = z[subsample_rows(len(z), cap, params.seed, key)]
    return _hsem_exact(z, params.bandwidth)


def structural_value(cut: int, vol: int, parent_vol: int, total_vol: int) -> float:
    if cut == 0:
        return 0.0
    return -(cut / total_vol) * math.log2(vol / parent_vol)


class S2Entropy:
    """Entropy evaluator bound to one graph, its node embeddings and params.

    Semantic entropies are memoized per node set.
    """

    def __init__(self, g: TextualAttributedGraph, embeddings, params: EntropyParams):
        z = np.asarray(embeddings, dtype=np.float64)
        if z.ndim != 2 or len(z) != g.n:
            raise ValueError(f"embeddings must have one row per node ({g.n}), got shape {z.shape}")
        if not np.isfinite(z).all():
            raise ValueError("embeddings contain non-finite values")
        _check_dim(z, params)
        self.g = g
        self.z = z
        self.params = params
        self._cache: dict[bytes, float] = {}
        self._lock = threading.Lock()

    @property
    def lam(self) -> float:
        return self.params.lam

    @property
    def total_volume(self) -> int:
        return self.g.total_volume

    def stats(self, idx: np.ndarray) -> tuple[int, int]:
        """(volume, cut) of an index set."""
        return self.g.volume_of(idx), self.g.cut_of(idx)

    def semantic(self, idx: np.ndarray) -> float:
        idx = np.asarray(idx, dtype=np.int64)
        raw = idx.tobytes()
        hit = self._cache.get(raw)
        if hit is not None:
            return hit
        p = self.params
        z = self.z[idx]
        if p.subsample_cap is not None and len(idx) > p.subsample_cap:
            z = z[subsample_rows(len(idx), p.subsample_cap, p.seed, _stable_key(raw))]
        value = _hsem_exact(z, p.bandwidth)
        with self._lock:
            self._cache.setdefault(raw, value)
        return value

    def structural(self, cut: int, vol: int, parent_vol: int) -> float:
        return structural_value(cut, vol, parent_vol, self.total_volume)

    def term(self, idx, cut: int, vol: int, parent_vol: int, parent_size: int) -> float:
        """Contribution of one tree node given its own and its parent's stats."""
        if len(idx) == parent_size:
            return 0.0
        s = self.structural(cut, vol, parent_vol)
        if self.lam == 0:
            return s
        return s + self.lam * self.semantic(idx)

    def term_for(self, child_idx, parent_idx) -> float:
        child_idx = np.asarray(child_idx, dtype=np.int64)
        parent_idx = np.asarray(parent_idx, dtype=np.int64)
        vol, cut = self.stats(child_idx)
        return self.term(child_idx, cut, vol, self.g.volume_of(parent_idx), len(parent_idx))


def _child_parent(g: TextualAttributedGraph, child_set, parent_set) -> tuple[np.ndarray, np.ndarray]:
    c = g.indices(child_set)
    p = g.indices(parent_set)
    if not np.isin(c, p).all():
        raise ValueError("child set is not a subset of parent set")
    return c, p


def structural_term(g: TextualAttributedGraph, child_set, parent_set) -> float:
    """Structural entropy contribution (bits) of a cluster under its parent."""
    c, p = _child_parent(g, child_set, parent_set)
    return structural_value(g.cut_of(c), g.volume_of(c), g.volume_of(p), g.total_volume)


def s2_term(g: TextualAttributedGraph, child_set, parent_set, embeddings, params: EntropyParams) -> float:
    c, p = _child_parent(g, child_set, parent_set)
    return S2Entropy(g, embeddings, params).term_for(c, p)


def tree_terms(tree, model: S2Entropy) -> dict[int, float]:
    """Per tree node contribution, keyed by tree-node id (root excluded)."""
    out = {}
    for node in tree.nodes.values():
        if node.parent is None:
            continue
        par = tree.nodes[node.parent]
        out[node.id] = model.term(node.members, node.cut, node.volume, par.volume, len(par.members))
    return out


def total_tree_entropy(tree, g: TextualAttributedGraph, embeddings, params: EntropyParams) -> float:
    return tree_entropy(tree, S2Entropy(g, embeddings, params))


def tree_entropy(tree, model: S2Entropy) -> float:
    return math.fsum(tree_terms(tree, model).values())


def entropy_breakdown(tree, model: S2Entropy) -> dict:
    """Structural and semantic totals plus per-level sums."""
    structural = semantic = 0.0
    levels: dict[int, float] = {}
    for node in tree.nodes.values():
        if node.parent is None:
            continue
        par = tree.nodes[node.parent]
        if len(node.members) == len(par.members):
            continue
        s = model.structural(node.cut, node.volume, par.volume)
        h = model.semantic(node.members) if model.lam else 0.0
        structural += s
        semantic += h
        levels[node.depth] = levels.get(node.depth, 0.0) + s + model.lam * h
    return {
        "structural": structural,
        "semantic": semantic,
        "lambda": model.lam,
        "total": structural + model.lam * semantic,
        "per_level": {str(k): v for k, v in sorted(levels.items())},
    }


def loo_log_density(z: np.ndarray, h: float) -> np.ndarray:
    """Leave-one-out log KDE density at every row of ``z``."""
    n, d = z.shape
    logk = -_self_sq_distances(z) / (2 * h * h)
    np.fill_diagonal(logk, -np.inf)
    return logsumexp(logk, axis=1) - math.log(n - 1) + log_kernel_norm(d, h)


def select_bandwidth(
    embeddings,
    grid: Sequence[float] = DEFAULT_BANDWIDTH_GRID,
    cap: int | None = 2048,
    seed: int = 42,
) -> float:
    """Grid value maximizing the mean leave-one-out log density.

    Ties go to the smallest bandwidth.
    """
    grid = sorted(float(h) for h in grid)
    if not grid:
        raise ValueError("empty bandwidth grid")
    if any(h <= 0 for h in grid):
        raise ValueError("bandwidths must be positive")
    z = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if len(z) < 2:
        mid = grid[(len(grid) - 1) // 2]
        warnings.warn(f"fewer than 2 embeddings; using grid midpoint h={mid}", stacklevel=2)
        return mid
    if cap is not None and len(z) > cap:
        z = z[subsample_rows(len(z), cap, seed, 0)]
    best_h, best = grid[0], -math.inf
    for h in grid:
        score = float(loo_log_density(z, h).mean())
        if score > best:
            best_h, best = h, score
    return best_h

