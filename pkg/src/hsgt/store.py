"""Historical embeddings for supernodes (levels >= 1)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from hsgt.engine.checkpoint import load_arrays, save_arrays
from hsgt.errors import InputError

NEVER = -1


class HistoricalStore:
    """Per-level tables of the latest aggregated embedding of every supernode.

    Rows start at zero. ``push`` overwrites rows and stamps them with the
    current step; ``pull`` returns copies plus the number of steps since each
    row was pushed (``inf`` for rows never pushed). The owner advances the
    step counter once per processed batch.
    """

    def __init__(self, level_sizes: Sequence[int], width: int):
        # level_sizes[l - 1] is |V^l| for l = 1..H
        self.level_sizes = [int(n) for n in level_sizes]
        self.width = int(width)
        self.step = 0
        self.tables = [np.zeros((n, self.width)) for n in self.level_sizes]
        self.last_push = [np.full(n, NEVER, dtype=np.int64) for n in self.level_sizes]
        self.pull_count = 0
        self.reset_stats()

    def reset_stats(self) -> None:
        """Clear the running staleness tally over pulled rows."""
        self.pulled_rows = 0
        self.unpushed_rows = 0
        self.staleness_total = 0.0

    def mean_staleness(self) -> float:
        """Mean staleness of pulled rows that had been pushed; ``nan`` if none."""
        pushed = self.pulled_rows - self.unpushed_rows
        return self.staleness_total / pushed if pushed else float("nan")

    @property
    def depth(self) -> int:
        return len(self.level_sizes)

    def _table(self, level: int) -> int:
        if level < 1:
            raise InputError("the store only holds levels >= 1")
        if level > self.depth:
            raise InputError(f"level {level} beyond store depth {self.depth}")
        return level - 1

    def advance(self) -> int:
        self.step += 1
        return self.step

    def push(self, level: int, ids, rows) -> None:
        t = self._table(level)
        ids = np.asarray(ids, dtype=np.int64)
        rows = np.asarray(rows)
        if rows.shape != (ids.shape[0], self.width):
            raise InputError(f"push: expected rows of shape {(ids.shape[0], self.width)}, got {rows.shape}")
        self.tables[t][ids] = rows
        self.last_push[t][ids] = self.step

    def pull(self, level: int, ids) -> tuple[np.ndarray, np.ndarray]:
        t = self._table(level)
        ids = np.asarray(ids, dtype=np.int64)
        self.pull_count += 1
        stamps = self.last_push[t][ids]
        staleness = np.where(stamps == NEVER, np.inf, self.step - stamps).astype(np.float64)
        finite = np.isfinite(staleness)
        self.pulled_rows += ids.shape[0]
        self.unpushed_rows += int((~finite).sum())
        self.staleness_total += float(staleness[finite].sum())
        return self.tables[t][ids].copy(), staleness

    def reset(self) -> None:
        for table in self.tables:
            table.fill(0.0)
        for stamps in self.last_push:
            stamps.fill(NEVER)
        self.step = 0

    def copy(self) -> HistoricalStore:
        other = HistoricalStore(self.level_sizes, self.width)
        other.step = self.step
        other.tables = [t.copy() for t in self.tables]
        other.last_push = [s.copy() for s in self.last_push]
        return other

    def save(self, path: str | Path) -> None:
        arrays = {
            "step": np.asarray([self.step], dtype=np.float64),
            "width": np.asarray([self.width], dtype=np.float64),
        }
        for level, (table, stamps) in enumerate(zip(self.tables, self.last_push), start=1):
            arrays[f"level{level}"] = table
            arrays[f"level{level}.last_push"] = stamps.astype(np.float64)
        save_arrays(path, arrays)

    @classmethod
    def load(cls, path: str | Path) -> HistoricalStore:
        arrays = load_arrays(path)
        tables = []
        level = 1
        while f"level{level}" in arrays:
            tables.append(arrays[f"level{level}"])
            level += 1
        width = int(arrays["width"][0])
        store = cls([t.shape[0] for t in tables], width)
        store.step = int(arrays["step"][0])
        store.tables = [t.copy() for t in tables]
        store.last_push = [arrays[f"level{l}.last_push"].astype(np.int64) for l in range(1, level)]
        return store
