"""Labeled datasets: file formats, synthetic SBM generation and splitting."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from hsgt.errors import InputError
from hsgt.graph import Graph, load_edge_list

log = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "valid", "test")
SPLIT_CODES = {name: code for code, name in enumerate(SPLIT_NAMES)}
UNSPLIT = -1

EDGE_FILE = "edges.tsv"
FEATURE_FILE = "features.tsv"
LABEL_FILE = "labels.tsv"
SPLIT_FILE = "splits.tsv"
NODE_MAP_FILE = "node_map.tsv"


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """A graph with dense node features, class labels and a split tag per node.

    ``labels`` uses -1 for unlabeled nodes and ``split`` uses -1 for untagged
    ones; ``node_names`` maps dense ids back to external ids.
    """

    graph: Graph
    features: np.ndarray
    labels: np.ndarray
    split: np.ndarray
    num_classes: int
    node_names: tuple[str, ...] | None = None

    def __post_init__(self):
        n = self.graph.num_nodes
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise InputError(f"feature matrix has {self.features.shape[0]} rows for {n} nodes")
        if not np.all(np.isfinite(self.features)):
            raise InputError("feature matrix contains non-finite values")
        if self.labels.shape != (n,) or self.split.shape != (n,):
            raise InputError("labels and split must have one entry per node")
        labeled = self.labels >= 0
        if labeled.any() and self.labels.max() >= self.num_classes:
            raise InputError("label index outside [0, num_classes)")
        for arr in (self.features, self.labels, self.split):
            arr.setflags(write=False)

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def mask(self, split_name: str) -> np.ndarray:
        if split_name not in SPLIT_CODES:
            raise InputError(f"unknown split {split_name!r}")
        return (self.split == SPLIT_CODES[split_name]) & (self.labels >= 0)

    def with_split(self, split: np.ndarray) -> LabeledDataset:
        return replace(self, split=np.asarray(split, dtype=np.int8))

    def with_labels(self, labels: np.ndarray) -> LabeledDataset:
        return replace(self, labels=np.asarray(labels, dtype=np.int64))


# --- file formats -----------------------------------------------------------

def _data_lines(path: Path):
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.rstrip("\n").rstrip("\r")
                if not line.strip() or line.lstrip().startswith("#"):
                    continue
                yield lineno, line
    except FileNotFoundError as exc:
        raise InputError(f"missing file: {path}") from exc


def _split_tab(path: Path, lineno: int, line: str, parts: int) -> list[str]:
    fields = line.split("\t")
    if len(fields) != parts:
        raise InputError(f"{path}:{lineno}: expected {parts} tab-separated fields, got {len(fields)}")
    return [f.strip() for f in fields]


def read_features(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Read ``node_id<TAB>f1 f2 ... fF``; returns external ids in file order and the matrix."""
    path = Path(path)
    names, rows = [], []
    seen = set()
    for lineno, line in _data_lines(path):
        node, values = _split_tab(path, lineno, line, 2)
        if node in seen:
            raise InputError(f"{path}:{lineno}: duplicate node id {node!r}")
        seen.add(node)
        try:
            row = [float(x) for x in values.split()]
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: non-numeric feature value") from exc
        if rows and len(row) != len(rows[0]):
            raise InputError(f"{path}:{lineno}: expected {len(rows[0])} features, got {len(row)}")
        names.append(node)
        rows.append(row)
    if not rows:
        raise InputError(f"{path}: no feature rows")
    return names, np.asarray(rows, dtype=np.float64)


def read_edges(path: str | Path, index: dict[str, int]) -> np.ndarray:
    path = Path(path)
    edges = []
    for lineno, line in _data_lines(path):
        src, dst = _split_tab(path, lineno, line, 2)
        for node in (src, dst):
            if node not in index:
                raise InputError(f"{path}:{lineno}: node {node!r} has no feature row")
        edges.append((index[src], index[dst]))
    return np.asarray(edges, dtype=np.int64).reshape(-1, 2)


def read_labels(path: str | Path, index: dict[str, int]) -> np.ndarray:
    path = Path(path)
    labels = np.full(len(index), -1, dtype=np.int64)
    for lineno, line in _data_lines(path):
        node, value = _split_tab(path, lineno, line, 2)
        if node not in index:
            raise InputError(f"{path}:{lineno}: node {node!r} has no feature row")
        try:
            labels[index[node]] = int(value)
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: class index {value!r} is not an integer") from exc
        if labels[index[node]] < 0:
            raise InputError(f"{path}:{lineno}: negative class index")
    return labels


def read_splits(path: str | Path, index: dict[str, int]) -> np.ndarray:
    path = Path(path)
    split = np.full(len(index), UNSPLIT, dtype=np.int8)
    for lineno, line in _data_lines(path):
        node, tag = _split_tab(path, lineno, line, 2)
        if node not in index:
            raise InputError(f"{path}:{lineno}: node {node!r} has no feature row")
        if tag not in SPLIT_CODES:
            raise InputError(f"{path}:{lineno}: split tag must be train|valid|test, got {tag!r}")
        split[index[node]] = SPLIT_CODES[tag]
    return split


def _names(ds: LabeledDataset) -> list[str]:
    return list(ds.node_names) if ds.node_names else [str(i) for i in range(ds.num_nodes)]


def write_dataset(ds: LabeledDataset, directory: str | Path) -> None:
    """Write the generic TSV layout readable by :func:`ingest_dataset`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = _names(ds)
    with open(directory / FEATURE_FILE, "w", encoding="utf-8") as fh:
        for name, row in zip(names, ds.features):
            fh.write(name + "\t" + " ".join(repr(float(x)) for x in row) + "\n")
    with open(directory / EDGE_FILE, "w", encoding="utf-8") as fh:
        for u, v in ds.graph.edges():
            fh.write(f"{names[u]}\t{names[v]}\n")
    with open(directory / LABEL_FILE, "w", encoding="utf-8") as fh:
        for name, label in zip(names, ds.labels):
            if label >= 0:
                fh.write(f"{name}\t{label}\n")
    if np.any(ds.split != UNSPLIT):
        write_splits(ds, directory / SPLIT_FILE)


def write_splits(ds: LabeledDataset, path: str | Path) -> None:
    names = _names(ds)
    with open(path, "w", encoding="utf-8") as fh:
        for name, code in zip(names, ds.split):
            if code != UNSPLIT:
                fh.write(f"{name}\t{SPLIT_NAMES[code]}\n")


def write_node_map(ds: LabeledDataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, name in enumerate(_names(ds)):
            fh.write(f"{i}\t{name}\n")


def ingest_dataset(directory: str | Path, fmt: str = "generic") -> LabeledDataset:
    """Load a dataset directory.

    ``generic`` reads ``features.tsv``, ``edges.tsv``, ``labels.tsv`` and an
    optional ``splits.tsv``. ``cora-content`` reads the ``cora.content`` /
    ``cora.cites`` pair (whitespace separated, class name in the last column).
    Node order follows the feature/content file.
    """
    directory = Path(directory)
    if fmt == "generic":
        names, features = read_features(directory / FEATURE_FILE)
        index = {name: i for i, name in enumerate(names)}
        graph = load_edge_list(read_edges(directory / EDGE_FILE, index), len(names))
        labels = read_labels(directory / LABEL_FILE, index)
        split_path = directory / SPLIT_FILE
        split = read_splits(split_path, index) if split_path.exists() else np.full(len(names), UNSPLIT, np.int8)
        num_classes = int(labels.max()) + 1 if (labels >= 0).any() else 0
        return LabeledDataset(graph, features, labels, split, num_classes, tuple(names))
    if fmt == "cora-content":
        return _ingest_cora(directory)
    raise InputError(f"unknown dataset format {fmt!r}")


def _ingest_cora(directory: Path) -> LabeledDataset:
    content = directory / "cora.content"
    cites = directory / "cora.cites"
    names, rows, classes = [], [], []
    index: dict[str, int] = {}
    for lineno, line in _data_lines(content):
        fields = line.split()
        if len(fields) < 3:
            raise InputError(f"{content}:{lineno}: expected id, features and class")
        if fields[0] in index:
            raise InputError(f"{content}:{lineno}: duplicate paper id {fields[0]!r}")
        try:
            row = [float(x) for x in fields[1:-1]]
        except ValueError as exc:
            raise InputError(f"{content}:{lineno}: non-numeric feature value") from exc
        if rows and len(row) != len(rows[0]):
            raise InputError(f"{content}:{lineno}: expected {len(rows[0])} features, got {len(row)}")
        index[fields[0]] = len(names)
        names.append(fields[0])
        rows.append(row)
        classes.append(fields[-1])
    edges = []
    for lineno, line in _data_lines(cites):
        fields = line.split()
        if len(fields) != 2:
            raise InputError(f"{cites}:{lineno}: expected two paper ids")
        for node in fields:
            if node not in index:
                raise InputError(f"{cites}:{lineno}: paper {node!r} has no content row")
        edges.append((index[fields[0]], index[fields[1]]))
    class_names = sorted(set(classes))
    labels = np.asarray([class_names.index(c) for c in classes], dtype=np.int64)
    graph = load_edge_list(np.asarray(edges, dtype=np.int64).reshape(-1, 2), len(names))
    features = np.asarray(rows, dtype=np.float64)
    split = np.full(len(names), UNSPLIT, dtype=np.int8)
    return LabeledDataset(graph, features, labels, split, len(class_names), tuple(names))


# --- synthetic data and splits ----------------------------------------------

def generate_sbm(
    blocks: int,
    nodes_per_block: int,
    p_in: float,
    p_out: float,
    feature_noise: float,
    seed: int,
) -> LabeledDataset:
    """Stochastic block model with one-hot block features plus Gaussian noise."""
    if blocks < 1 or nodes_per_block < 1:
        raise InputError("generate_sbm: need at least one block with one node")
    if not 0.0 <= p_out < p_in <= 1.0:
        raise InputError("generate_sbm: need 0 <= p_out < p_in <= 1")
    if feature_noise < 0:
        raise InputError("generate_sbm: feature_noise must be non-negative")
    rng = np.random.default_rng(seed)
    n = blocks * nodes_per_block
    labels = np.repeat(np.arange(blocks), nodes_per_block)
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    hit = rng.random(iu.shape[0]) < prob
    graph = load_edge_list(np.stack([iu[hit], ju[hit]], axis=1), n)
    features = np.eye(blocks)[labels]
    if feature_noise > 0:
        features = features + feature_noise * rng.standard_normal(features.shape)
    split = np.full(n, UNSPLIT, dtype=np.int8)
    return LabeledDataset(graph, features, labels.astype(np.int64), split, blocks)


def split_dataset(
    ds: LabeledDataset,
    mode: str = "random-118",
    seed: int = 0,
    split_path: str | Path | None = None,
) -> LabeledDataset:
    """Assign train/valid/test tags.

    ``random-118`` shuffles the labeled nodes and gives ``floor(n/10)`` each to
    train and valid, the remainder to test. ``predefined`` reads a split file.
    """
    if mode == "predefined":
        if split_path is None or not Path(split_path).exists():
            raise InputError("predefined split mode needs an existing split file")
        index = {name: i for i, name in enumerate(_names(ds))}
        return ds.with_split(read_splits(split_path, index))
    if mode != "random-118":
        raise InputError(f"unknown split mode {mode!r}")
    labeled = np.flatnonzero(ds.labels >= 0)
    if labeled.size == 0:
        raise InputError("cannot split a dataset without labels")
    order = np.random.default_rng(seed).permutation(labeled)
    tenth = labeled.size // 10
    split = np.full(ds.num_nodes, UNSPLIT, dtype=np.int8)
    split[order[:tenth]] = SPLIT_CODES["train"]
    split[order[tenth:2 * tenth]] = SPLIT_CODES["valid"]
    split[order[2 * tenth:]] = SPLIT_CODES["test"]
    return ds.with_split(split)
