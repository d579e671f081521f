"""Top-to-bottom hierarchical batch sampling.

A batch starts from a set of top-level target nodes and expands them level by
level through the partition preimages, so every sampled supernode arrives
with all of its members. Each level then adds sampled neighbors, takes the
induced subgraph and builds the attention structure: a receptive field per
node and an SPD index per (query, key) pair.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from hsgt.coarsen import Hierarchy, PartitionMapping
from hsgt.errors import InputError, NumericError
from hsgt.graph import Graph, induced_subgraph, spd_matrix

MASKED = -1
UNREACHED = -2


@dataclass
class SamplerConfig:
    batch_size: int = 4
    fanout_1hop: int = 5
    fanout_2hop: int = 10
    fanout_high: int = 5
    p: float = 0.1
    max_spd: int = 2
    full_batch: bool = False
    global_field: bool = False
    p_per_level: list[float] | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise InputError("batch_size must be at least 1")
        if min(self.fanout_1hop, self.fanout_2hop, self.fanout_high) < 0:
            raise InputError("fanouts must be non-negative")
        probs = [self.p] + list(self.p_per_level or [])
        if not all(0.0 <= q <= 1.0 for q in probs):
            raise InputError("intra-batch probability must lie in [0, 1]")
        if self.max_spd < 0:
            raise InputError("max_spd must be non-negative")

    def p_at(self, level: int) -> float:
        if self.p_per_level and level < len(self.p_per_level):
            return self.p_per_level[level]
        return self.p

    def fanouts_at(self, level: int) -> tuple[int, int]:
        return (self.fanout_1hop, self.fanout_2hop) if level == 0 else (self.fanout_high, 0)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class LevelBatch:
    """One level of a batch. ``nodes`` lists targets first (sorted), then neighbors (sorted)."""

    level: int
    nodes: np.ndarray
    num_targets: int
    subgraph: Graph
    bias_index: np.ndarray
    features: np.ndarray | None = None
    degrees: np.ndarray | None = None

    @property
    def targets(self) -> np.ndarray:
        return self.nodes[:self.num_targets]

    @property
    def neighbors(self) -> np.ndarray:
        return self.nodes[self.num_targets:]

    @property
    def size(self) -> int:
        return self.nodes.shape[0]

    def pairs(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Unmasked (query, key) positions in row-major order with their bias index."""
        rows, cols = np.nonzero(self.bias_index != MASKED)
        return rows, cols, self.bias_index[rows, cols]


@dataclass(eq=False)
class Batch:
    levels: list[LevelBatch]
    # parent_positions[l][i]: position among level l+1 targets of level-l target i's cluster
    parent_positions: list[np.ndarray] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.levels) - 1

    @property
    def targets0(self) -> np.ndarray:
        return self.levels[0].targets

    def supervised(self, mask: np.ndarray) -> np.ndarray:
        """Positions among level-0 targets whose node is set in ``mask``."""
        return np.flatnonzero(mask[self.targets0])

    def ancestor_positions(self) -> np.ndarray:
        """``[H + 1, T0]``: for each level-0 target, its ancestor's position among each level's targets."""
        current = np.arange(self.levels[0].num_targets)
        chain = [current]
        for parents in self.parent_positions:
            current = parents[current]
            chain.append(current)
        return np.stack(chain)


def epoch_batches(h: Hierarchy, cfg: SamplerConfig, rng: np.random.Generator) -> list[np.ndarray]:
    """Disjoint top-level target sets covering ``V^H``; only the last may be short."""
    top = h.num_nodes(h.depth)
    if cfg.full_batch:
        return [np.arange(top)]
    order = rng.permutation(top)
    return [np.sort(order[i:i + cfg.batch_size]) for i in range(0, top, cfg.batch_size)]


def expand_targets(mapping: PartitionMapping, targets: Iterable[int]) -> set[int]:
    """Exact preimage union of ``targets`` under ``mapping``."""
    return set(int(v) for v in mapping.preimage(sorted(set(int(t) for t in targets))))


def sample_neighbors(
    g: Graph,
    targets: Iterable[int],
    fanout_1hop: int,
    fanout_2hop: int,
    rng: np.random.Generator,
) -> set[int]:
    """Layered uniform neighbor sampling.

    Per target: up to ``fanout_1hop`` direct neighbors without replacement, then
    up to ``fanout_2hop`` nodes at distance exactly 2 drawn from the neighbors
    of the chosen 1-hop nodes. Targets themselves are excluded from the result.
    """
    if fanout_1hop < 0 or fanout_2hop < 0:
        raise InputError("fanouts must be non-negative")
    target_list = sorted(set(int(t) for t in targets))
    picked: set[int] = set()
    if fanout_1hop == 0:
        return picked
    for v in target_list:
        direct = g.indices[g.indptr[v]:g.indptr[v + 1]]
        if direct.size == 0:
            continue
        hop1 = direct if direct.size <= fanout_1hop else rng.choice(direct, fanout_1hop, replace=False)
        picked.update(int(u) for u in hop1)
        if fanout_2hop == 0:
            continue
        pool = np.unique(np.concatenate([g.indices[g.indptr[u]:g.indptr[u + 1]] for u in np.sort(hop1)]))
        pool = np.setdiff1d(pool, np.append(direct, v), assume_unique=False)
        if pool.size == 0:
            continue
        hop2 = pool if pool.size <= fanout_2hop else rng.choice(pool, fanout_2hop, replace=False)
        picked.update(int(u) for u in hop2)
    return picked - set(target_list)


def build_receptive_fields(
    subgraph: Graph,
    max_spd: int,
    p: float,
    rng: np.random.Generator | None,
    global_field: bool = False,
    spd: np.ndarray | None = None,
) -> np.ndarray:
    """Boolean ``[n x n]`` matrix whose row ``i`` is the receptive field of node ``i``.

    A field holds the node itself, its ``max_spd``-hop neighbors inside the
    subgraph and every other node that wins an independent coin flip with
    probability ``p`` (drawn per ordered pair).
    """
    n = subgraph.num_nodes
    if not 0.0 <= p <= 1.0:
        raise InputError("p must lie in [0, 1]")
    if global_field or p == 1.0:
        return np.ones((n, n), dtype=bool)
    if spd is None:
        spd = spd_matrix(subgraph, max_spd)
    fields = spd >= 0
    if p > 0.0:
        if rng is None:
            raise InputError("p > 0 needs an rng")
        fields |= rng.random((n, n)) < p
    np.fill_diagonal(fields, True)
    return fields


def build_bias_index(
    subgraph: Graph,
    fields: np.ndarray,
    max_spd: int,
    spd: np.ndarray | None = None,
) -> np.ndarray:
    """Per-pair attention bias codes for one level of a batch.

    Entry ``(i, j)`` is the SPD between nodes ``i`` and ``j`` when ``j`` lies in
    the field of ``i`` within ``max_spd`` hops, ``UNREACHED`` when ``j`` is in
    the field but farther away, and ``MASKED`` when ``j`` is outside the field.
    """
    if spd is None:
        spd = spd_matrix(subgraph, max_spd)
    if fields.shape != spd.shape:
        raise InputError("fields and spd matrices differ in shape")
    index = np.where(fields, np.where(spd >= 0, spd, UNREACHED), MASKED).astype(np.int8)
    if fields.shape[0] and not np.all(fields.any(axis=1)):
        raise NumericError("a receptive field is empty")
    return index


def sample_batch(
    h: Hierarchy,
    top_targets: Iterable[int],
    cfg: SamplerConfig,
    rng: np.random.Generator,
) -> Batch:
    """Assemble targets, neighborhoods, subgraphs and bias indices for every level."""
    depth = h.depth
    top = np.unique(np.asarray(list(top_targets) if not isinstance(top_targets, np.ndarray) else top_targets,
                               dtype=np.int64))
    if top.size and (top.min() < 0 or top.max() >= h.num_nodes(depth)):
        raise InputError("top-level targets out of range")
    targets = [None] * (depth + 1)
    targets[depth] = top
    for level in range(depth, 0, -1):
        targets[level - 1] = h.mappings[level - 1].preimage(targets[level])

    levels = []
    for level in range(depth + 1):
        g = h.graphs[level]
        tgt = targets[level]
        if cfg.full_batch:
            extra = np.zeros(0, dtype=np.int64)
        else:
            f1, f2 = cfg.fanouts_at(level)
            extra = np.asarray(sorted(sample_neighbors(g, tgt, f1, f2, rng)), dtype=np.int64)
        nodes = np.concatenate([tgt, extra])
        sub, _ = induced_subgraph(g, nodes)
        if nodes.shape[0] == g.num_nodes and np.array_equal(nodes, np.arange(g.num_nodes)):
            # Whole level in id order: the induced subgraph is the level itself.
            spd = h.level_spd(level, cfg.max_spd)
        else:
            spd = spd_matrix(sub, cfg.max_spd)
        fields = build_receptive_fields(sub, cfg.max_spd, cfg.p_at(level), rng, cfg.global_field, spd=spd)
        bias = build_bias_index(sub, fields, cfg.max_spd, spd=spd)
        levels.append(LevelBatch(level, nodes, tgt.shape[0], sub, bias,
                                 features=h.features[level][nodes], degrees=g.degrees[nodes]))

    parents = []
    for level in range(depth):
        cluster = h.mappings[level].phi[targets[level]]
        parents.append(np.searchsorted(targets[level + 1], cluster))
    return Batch(levels, parents)


def dump_batch(batch: Batch, path: str | Path) -> None:
    """Write per-level targets, sampled ids and bias-index matrices as JSON."""
    doc = {
        "levels": [
            {
                "level": lb.level,
                "targets": lb.targets.tolist(),
                "sampled": lb.nodes.tolist(),
                "bias_index": lb.bias_index.tolist(),
            }
            for lb in batch.levels
        ],
        "codes": {"masked": MASKED, "unreached": UNREACHED},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
