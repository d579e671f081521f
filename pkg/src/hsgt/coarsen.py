"""Graph hierarchies by recursive coarsening.

A level is produced by partitioning the previous level's nodes, contracting
each cluster to a supernode (an edge joins two supernodes whenever any of
their members are adjacent) and averaging member features.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from hsgt.data import LabeledDataset
from hsgt.errors import InputError
from hsgt.graph import Graph, load_edge_list, spd_matrix

log = logging.getLogger(__name__)

METHODS = ("multilevel", "random", "import")


@dataclass(frozen=True, eq=False)
class PartitionMapping:
    """Surjective map from fine node ids to ``[0, num_clusters)``."""

    phi: np.ndarray
    num_clusters: int

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=np.int64)
        object.__setattr__(self, "phi", phi)
        phi.setflags(write=False)
        if phi.ndim != 1:
            raise InputError("partition mapping must be a vector")
        if phi.size and (phi.min() < 0 or phi.max() >= self.num_clusters):
            raise InputError("partition mapping has cluster ids outside [0, num_clusters)")
        if np.unique(phi).size != self.num_clusters:
            raise InputError("partition mapping is not surjective: some cluster is empty")

    @property
    def num_fine(self) -> int:
        return self.phi.shape[0]

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.phi, minlength=self.num_clusters)

    def preimage(self, clusters) -> np.ndarray:
        """Sorted fine ids mapped into any of ``clusters``."""
        clusters = np.asarray(sorted(clusters) if isinstance(clusters, (set, frozenset)) else clusters,
                              dtype=np.int64)
        if clusters.size == 0:
            return np.zeros(0, dtype=np.int64)
        return np.flatnonzero(np.isin(self.phi, clusters))


@dataclass(eq=False)
class Hierarchy:
    """Levels ``0..H`` of graphs and features linked by ``H`` mappings."""

    graphs: list[Graph]
    features: list[np.ndarray]
    mappings: list[PartitionMapping]
    ratios: list[float]
    method: str = "multilevel"
    seed: int = 0
    _spd: dict = field(default_factory=dict, repr=False)

    @property
    def depth(self) -> int:
        return len(self.mappings)

    def level_spd(self, level: int, max_spd: int) -> np.ndarray:
        """Truncated SPD matrix of a whole level, computed once and cached."""
        key = (level, max_spd)
        if key not in self._spd:
            spd = spd_matrix(self.graphs[level], max_spd)
            spd.flags.writeable = False
            self._spd[key] = spd
        return self._spd[key]

    def num_nodes(self, level: int) -> int:
        return self.graphs[level].num_nodes

    def ancestors(self, nodes) -> np.ndarray:
        """``[H + 1, len(nodes)]`` ids of each level-0 node's chain up the hierarchy."""
        current = np.asarray(nodes, dtype=np.int64)
        chain = [current]
        for mapping in self.mappings:
            current = mapping.phi[current]
            chain.append(current)
        return np.stack(chain)

    def manifest(self) -> dict:
        return {
            "levels": [
                {"level": l, "num_nodes": g.num_nodes, "num_edges": g.num_edges}
                for l, g in enumerate(self.graphs)
            ],
            "ratios": list(self.ratios),
            "method": self.method,
            "seed": self.seed,
        }


def edge_cut(g: Graph, phi: PartitionMapping | np.ndarray) -> int:
    labels = phi.phi if isinstance(phi, PartitionMapping) else np.asarray(phi)
    e = g.edges()
    return int(np.count_nonzero(labels[e[:, 0]] != labels[e[:, 1]]))


def _check_target(g: Graph, target_clusters: int) -> None:
    if not 1 <= target_clusters <= max(g.num_nodes, 0) or g.num_nodes == 0:
        raise InputError(f"target_clusters must lie in [1, {g.num_nodes}], got {target_clusters}")


def _canonical(labels: np.ndarray) -> np.ndarray:
    """Relabel clusters in order of their smallest member."""
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first)
    remap = np.empty(order.size, dtype=np.int64)
    remap[np.unique(labels)[order]] = np.arange(order.size)
    return remap[labels]


def partition_random(g: Graph, target_clusters: int, seed: int = 0) -> PartitionMapping:
    """Uniformly random balanced assignment: cluster sizes differ by at most one."""
    _check_target(g, target_clusters)
    rng = np.random.default_rng(seed)
    phi = np.empty(g.num_nodes, dtype=np.int64)
    phi[rng.permutation(g.num_nodes)] = np.arange(g.num_nodes) % target_clusters
    return PartitionMapping(phi, target_clusters)


def partition_multilevel(
    g: Graph,
    target_clusters: int,
    seed: int = 0,
    refine_passes: int = 8,
) -> PartitionMapping:
    """Edge-cut-minimizing partition into exactly ``target_clusters`` clusters.

    Heavy-edge matching contracts the non-isolated nodes until the supernode
    count reaches the target, then greedy boundary moves reduce the edge-cut
    while no cluster exceeds twice the mean size. Isolated nodes go to the
    smallest clusters. The result is deterministic; ``seed`` is accepted for
    interface parity with :func:`partition_random`.
    """
    _check_target(g, target_clusters)
    n, k = g.num_nodes, target_clusters
    if k == n:
        return PartitionMapping(np.arange(n), n)
    if k == 1:
        return PartitionMapping(np.zeros(n, dtype=np.int64), 1)

    cap = max(2, math.ceil(2 * n / k))
    connected = np.flatnonzero(g.degrees > 0)
    isolated = np.flatnonzero(g.degrees == 0)
    k_conn = min(k, connected.size)

    labels = np.full(n, -1, dtype=np.int64)
    if k_conn:
        labels[connected] = _contract(g, connected, k_conn, cap)
    sizes = np.bincount(labels[labels >= 0], minlength=k).astype(np.int64)
    next_label = k_conn
    for v in isolated:
        if next_label < k:
            target = next_label
            next_label += 1
        else:
            target = int(np.argmin(sizes))
        labels[v] = target
        sizes[target] += 1

    floor = max(1, n // (2 * k))
    _refine(g, labels, sizes, cap, floor, refine_passes)
    return PartitionMapping(_canonical(labels), k)


def _contract(g: Graph, nodes: np.ndarray, target: int, cap: int) -> np.ndarray:
    """Heavy-edge matching rounds on the subgraph over ``nodes``; returns labels in ``[0, target)``."""
    weights = g.adjacency()[nodes][:, nodes].tocsr()
    node_weight = np.ones(nodes.size, dtype=np.int64)
    owner = np.arange(nodes.size)
    count = nodes.size

    while count > target:
        matched = np.full(count, -1, dtype=np.int64)
        merges = 0
        order = np.lexsort((np.arange(count), node_weight))
        indptr, indices, data = weights.indptr, weights.indices, weights.data
        for u in order:
            if count - merges == target:
                break
            if matched[u] != -1:
                continue
            best, best_w = -1, 0.0
            for pos in range(indptr[u], indptr[u + 1]):
                v = indices[pos]
                if v == u or matched[v] != -1 or node_weight[u] + node_weight[v] > cap:
                    continue
                w = data[pos]
                if w > best_w or (w == best_w and v < best):
                    best, best_w = v, w
            if best >= 0:
                matched[u], matched[best] = best, u
                merges += 1
        if merges == 0:
            # Stalled (only possible across components): pair the lightest supernodes.
            order = np.lexsort((np.arange(count), node_weight))
            needed = count - target
            for a, b in zip(order[0:2 * needed:2], order[1:2 * needed:2]):
                matched[a], matched[b] = b, a
                merges += 1
        # Collapse matched pairs; lower index names the new supernode.
        rep = np.where((matched >= 0) & (matched < np.arange(count)), matched, np.arange(count))
        uniq, new_id = np.unique(rep, return_inverse=True)
        proj = sp.csr_matrix((np.ones(count), (np.arange(count), new_id)), shape=(count, uniq.size))
        weights = (proj.T @ weights @ proj).tocsr()
        weights.setdiag(0)
        weights.eliminate_zeros()
        node_weight = np.bincount(new_id, weights=node_weight).astype(np.int64)
        owner = new_id[owner]
        count = uniq.size
    return owner


def _refine(g: Graph, labels: np.ndarray, sizes: np.ndarray, cap: int, floor: int, passes: int) -> None:
    """Greedy boundary moves with positive edge-cut gain, in place."""
    indptr, indices = g.indptr, g.indices
    for _ in range(passes):
        moved = 0
        for v in range(g.num_nodes):
            nbrs = indices[indptr[v]:indptr[v + 1]]
            if nbrs.size == 0:
                continue
            own = labels[v]
            if sizes[own] <= floor:
                continue
            clusters, links = np.unique(labels[nbrs], return_counts=True)
            own_links = links[clusters == own].sum()
            best, best_gain = -1, 0
            for c, l in zip(clusters, links):
                if c == own or sizes[c] + 1 > cap:
                    continue
                gain = l - own_links
                if gain > best_gain:
                    best, best_gain = c, gain
            if best >= 0:
                labels[v] = best
                sizes[own] -= 1
                sizes[best] += 1
                moved += 1
        if moved == 0:
            break


def coarsen_graph(g: Graph, mapping: PartitionMapping) -> Graph:
    """Supernode graph: ``a ~ b`` (``a != b``) iff some members of ``a`` and ``b`` are adjacent."""
    if mapping.num_fine != g.num_nodes:
        raise InputError("partition mapping length does not match the graph")
    e = g.edges()
    return load_edge_list(mapping.phi[e], mapping.num_clusters)


def init_coarse_features(x: np.ndarray, mapping: PartitionMapping) -> np.ndarray:
    """Row ``a`` of the result is the mean of the rows of ``x`` mapped to ``a``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != mapping.num_fine:
        raise InputError("feature rows do not match the partition mapping")
    totals = np.zeros((mapping.num_clusters, x.shape[1]), dtype=np.float64)
    np.add.at(totals, mapping.phi, x)
    return totals / mapping.sizes[:, None]


def clusters_for_ratio(alpha: float, n: int) -> int:
    if not 0.0 < alpha <= 1.0:
        raise InputError(f"coarsening ratio must lie in (0, 1], got {alpha}")
    # The tolerance keeps float noise (0.1 * 20 = 2.0000000000000004) from rounding up.
    return max(1, math.ceil(alpha * n - 1e-9))


def build_hierarchy(
    dataset: LabeledDataset,
    ratios: Sequence[float],
    method: str = "multilevel",
    seed: int = 0,
    partitions: Sequence[np.ndarray] | None = None,
) -> Hierarchy:
    """Recursively partition, contract and average features ``len(ratios)`` times.

    With ``method="import"``, ``partitions`` supplies one mapping per level and
    ``ratios`` is replaced by the realized ratios.
    """
    if method not in METHODS:
        raise InputError(f"unknown coarsening method {method!r}")
    graphs = [dataset.graph]
    features = [np.asarray(dataset.features, dtype=np.float64)]
    mappings: list[PartitionMapping] = []
    if method == "import":
        if partitions is None:
            raise InputError("import method needs partitions")
        levels = len(partitions)
    else:
        levels = len(ratios)
    level_seeds = np.random.SeedSequence(seed).generate_state(max(levels, 1))
    realized = []
    for level in range(levels):
        g = graphs[-1]
        if method == "import":
            phi = np.asarray(partitions[level], dtype=np.int64)
            if phi.shape != (g.num_nodes,):
                raise InputError(f"imported partition for level {level + 1} has {phi.size} entries, "
                                 f"expected {g.num_nodes}")
            mapping = PartitionMapping(phi, int(phi.max()) + 1 if phi.size else 0)
        else:
            k = clusters_for_ratio(ratios[level], g.num_nodes)
            if k < 1:
                raise InputError(f"level {level + 1} would have no nodes")
            partition = partition_multilevel if method == "multilevel" else partition_random
            mapping = partition(g, k, int(level_seeds[level]))
        if mapping.num_clusters < 1:
            raise InputError(f"level {level + 1} collapsed to zero nodes")
        mappings.append(mapping)
        graphs.append(coarsen_graph(g, mapping))
        features.append(init_coarse_features(features[-1], mapping))
        realized.append(mapping.num_clusters / g.num_nodes)
        log.debug("level %d: %d -> %d nodes", level + 1, g.num_nodes, mapping.num_clusters)
    out_ratios = realized if method == "import" else [float(a) for a in ratios]
    return Hierarchy(graphs, features, mappings, out_ratios, method, seed)


# --- partition files and manifest ---------------------------------------------

def partition_path(directory: str | Path, level: int) -> Path:
    return Path(directory) / f"part_l{level}.tsv"


def write_partition(mapping: PartitionMapping, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for node, cluster in enumerate(mapping.phi):
            fh.write(f"{node}\t{cluster}\n")


def read_partition(path: str | Path) -> np.ndarray:
    path = Path(path)
    pairs = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.rstrip("\n").split("\t")
            try:
                node, cluster = int(fields[0]), int(fields[1])
            except (ValueError, IndexError) as exc:
                raise InputError(f"{path}:{lineno}: expected node_id<TAB>cluster_id") from exc
            if node in pairs:
                raise InputError(f"{path}:{lineno}: node {node} listed twice")
            pairs[node] = cluster
    n = len(pairs)
    if sorted(pairs) != list(range(n)):
        raise InputError(f"{path}: node ids must cover 0..{n - 1}")
    return np.asarray([pairs[i] for i in range(n)], dtype=np.int64)


def save_hierarchy(h: Hierarchy, directory: str | Path) -> None:
    """Write ``part_l<level>.tsv`` for levels ``1..H`` and ``hierarchy.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for level, mapping in enumerate(h.mappings, start=1):
        write_partition(mapping, partition_path(directory, level))
    with open(directory / "hierarchy.json", "w", encoding="utf-8") as fh:
        json.dump(h.manifest(), fh, indent=2)


def load_partitions(directory: str | Path) -> list[np.ndarray]:
    directory = Path(directory)
    out = []
    level = 1
    while partition_path(directory, level).exists():
        out.append(read_partition(partition_path(directory, level)))
        level += 1
    return out
