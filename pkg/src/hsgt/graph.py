"""Undirected simple graphs in compressed adjacency form, plus BFS primitives."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from hsgt.errors import InputError

ABSENT = None


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable undirected graph without self-loops or duplicate edges.

    ``indices[indptr[v]:indptr[v + 1]]`` is the sorted neighbor list of ``v``.
    """

    num_nodes: int
    indptr: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        self.indptr.setflags(write=False)
        self.indices.setflags(write=False)

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    @property
    def num_edges(self) -> int:
        return int(self.indices.shape[0] // 2)

    def neighbors(self, v: int) -> np.ndarray:
        self._check_node(v)
        return self.indices[self.indptr[v]:self.indptr[v + 1]]

    def edges(self) -> np.ndarray:
        """Each undirected edge once as ``[u, v]`` with ``u < v``, lexicographically sorted."""
        src = np.repeat(np.arange(self.num_nodes), self.degrees)
        keep = src < self.indices
        return np.stack([src[keep], self.indices[keep]], axis=1)

    def adjacency(self) -> sp.csr_matrix:
        data = np.ones(self.indices.shape[0], dtype=np.float64)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.num_nodes, self.num_nodes))

    def _check_node(self, v: int) -> None:
        if not 0 <= v < self.num_nodes:
            raise InputError(f"node id {v} out of range [0, {self.num_nodes})")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.num_nodes == other.num_nodes
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
        )

    def __repr__(self) -> str:
        return f"Graph(num_nodes={self.num_nodes}, num_edges={self.num_edges})"


def load_edge_list(edge_rows: Iterable[Sequence[int]], num_nodes: int) -> Graph:
    """Build a canonical graph: symmetrized, deduplicated, self-loops dropped."""
    if num_nodes < 0:
        raise InputError("num_nodes must be non-negative")
    edges = np.asarray(list(edge_rows) if not isinstance(edge_rows, np.ndarray) else edge_rows, dtype=np.int64)
    if edges.size == 0:
        edges = edges.reshape(0, 2)
    if edges.ndim != 2 or edges.shape[1] != 2:
        raise InputError("edge rows must be (src, dst) pairs")
    if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
        bad = edges[(edges < 0).any(axis=1) | (edges >= num_nodes).any(axis=1)][0]
        raise InputError(f"edge ({bad[0]}, {bad[1]}) has a node id outside [0, {num_nodes})")
    edges = edges[edges[:, 0] != edges[:, 1]]
    both = np.concatenate([edges, edges[:, ::-1]], axis=0)
    both = np.unique(both, axis=0)
    counts = np.bincount(both[:, 0], minlength=num_nodes)
    indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return Graph(num_nodes, indptr, both[:, 1].astype(np.int64).copy())


def from_adjacency(adj: sp.spmatrix) -> Graph:
    coo = sp.coo_matrix(adj)
    return load_edge_list(np.stack([coo.row, coo.col], axis=1), adj.shape[0])


def k_hop_neighborhood(g: Graph, v: int, hops: int) -> set[int]:
    """Nodes ``u != v`` within BFS distance ``hops`` of ``v``."""
    if hops < 0:
        raise InputError("hop count must be non-negative")
    g._check_node(v)
    dist = _bfs_distances(g, v, hops)
    del dist[v]
    return set(dist)


def truncated_spd(g: Graph, sources: Iterable[int], targets: Iterable[int], max_dist: int) -> dict:
    """Shortest-path distances capped at ``max_dist``.

    Returns a map ``(s, t) -> distance`` over all source/target pairs, with
    ``ABSENT`` (``None``) when ``t`` is farther than ``max_dist`` or unreachable.
    """
    if max_dist < 0:
        raise InputError("max_dist must be non-negative")
    targets = list(targets)
    out = {}
    for s in sources:
        g._check_node(s)
        dist = _bfs_distances(g, s, max_dist)
        for t in targets:
            out[(s, t)] = dist.get(t, ABSENT)
    return out


def _bfs_distances(g: Graph, v: int, limit: int) -> dict[int, int]:
    dist = {v: 0}
    queue = deque([v])
    while queue:
        u = queue.popleft()
        if dist[u] == limit:
            continue
        for w in g.indices[g.indptr[u]:g.indptr[u + 1]]:
            w = int(w)
            if w not in dist:
                dist[w] = dist[u] + 1
                queue.append(w)
    return dist


def spd_matrix(g: Graph, max_dist: int) -> np.ndarray:
    """Dense ``[n x n]`` truncated SPD matrix; ``-1`` marks distances beyond ``max_dist``.

    Layered frontier expansion with sparse products, so cost grows with
    ``max_dist * n * |E|`` rather than all-pairs search.
    """
    n = g.num_nodes
    dist = np.full((n, n), -1, dtype=np.int16)
    np.fill_diagonal(dist, 0)
    if n == 0 or max_dist == 0:
        return dist
    adj = g.adjacency()
    reached = np.eye(n, dtype=bool)
    frontier = np.eye(n, dtype=np.float64)
    for hop in range(1, max_dist + 1):
        grown = np.asarray(adj.T @ frontier.T).T > 0
        fresh = grown & ~reached
        if not fresh.any():
            break
        dist[fresh] = hop
        reached |= fresh
        frontier = fresh.astype(np.float64)
    return dist


def induced_subgraph(g: Graph, nodes: Sequence[int]) -> tuple[Graph, np.ndarray]:
    """Subgraph on ``nodes``; new id ``i`` corresponds to old id ``node_ids[i]``.

    A sequence keeps its order; a set is sorted first.
    """
    if isinstance(nodes, (set, frozenset)):
        nodes = sorted(nodes)
    node_ids = np.asarray(nodes, dtype=np.int64).reshape(-1)
    if node_ids.size and (node_ids.min() < 0 or node_ids.max() >= g.num_nodes):
        raise InputError("induced_subgraph: node id out of range")
    if np.unique(node_ids).size != node_ids.size:
        raise InputError("induced_subgraph: duplicate node ids")
    remap = np.full(g.num_nodes, -1, dtype=np.int64)
    remap[node_ids] = np.arange(node_ids.size)
    starts, stops = g.indptr[node_ids], g.indptr[node_ids + 1]
    counts = stops - starts
    src_new = np.repeat(np.arange(node_ids.size), counts)
    if counts.sum():
        flat = np.concatenate([g.indices[a:b] for a, b in zip(starts, stops)])
    else:
        flat = np.zeros(0, dtype=np.int64)
    dst_new = remap[flat]
    keep = dst_new >= 0
    edges = np.stack([src_new[keep], dst_new[keep]], axis=1)
    return load_edge_list(edges, node_ids.size), node_ids
